"""Screening datasets: loading, preprocessing, splitting and client partitioning.

Three on-disk layouts are understood:

* ``flamenco`` - ``case_id, client_id, <indicator columns>, target[, split]``
  with raw indicator scores, min-max normalized on load;
* ``asdtest`` - the UCI ASD children screening table (CSV or ARFF), one-hot
  encoded and min-max normalized, partitioned equally across clients;
* ``generic`` - the flamenco layout with features already in [0, 1]; this is
  what :func:`write_dataset_csv` emits, so it round-trips exactly.

Training sets hold only presumed-normal cases: every ``target == 0`` case
(minus an optional held-out fraction) plus the unlabelled cases whose mean
indicator value reaches a quantile of the normal cases' means.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, EmptyDatasetError, SchemaError

logger = logging.getLogger(__name__)

ID_COLUMNS = ("case_id", "client_id")
TARGET_COLUMN = "target"
SPLIT_COLUMN = "split"
ASD_TARGET_COLUMNS = ("Class/ASD", "class/asd", "Class", "class", "target")
MISSING = {"?", ""}


class Target(IntEnum):
    UNKNOWN = -1
    NEGATIVE = 0
    POSITIVE = 1


class Schema(str, Enum):
    FLAMENCO = "flamenco"
    ASDTEST = "asdtest"
    GENERIC = "generic"


@dataclass(frozen=True, eq=False)
class Case:
    case_id: str
    client_id: str
    target: int
    features: np.ndarray

    def __post_init__(self):
        if self.target not in (-1, 0, 1):
            raise DataError(f"case {self.case_id}: unknown target code {self.target}")
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 1 or not np.all(np.isfinite(f)):
            raise DataError(f"case {self.case_id}: features must be a finite vector")
        f.setflags(write=False)
        object.__setattr__(self, "features", f)

    def with_client(self, client_id: str) -> Case:
        return Case(self.case_id, client_id, self.target, self.features)


@dataclass
class ClientData:
    train: list[Case] = field(default_factory=list)
    eval: list[Case] = field(default_factory=list)


@dataclass
class FederatedDataset:
    name: str
    feature_count: int
    clients: dict[str, ClientData]

    def __post_init__(self):
        seen = set()
        for cid, data in self.clients.items():
            for c in data.train:
                if c.target == Target.POSITIVE:
                    raise DataError(f"positive case {c.case_id} placed in a training set")
            for c in data.train + data.eval:
                if c.features.size != self.feature_count:
                    raise DataError(f"case {c.case_id} has {c.features.size} features")
                if c.case_id in seen:
                    raise DataError(f"duplicate case_id {c.case_id}")
                seen.add(c.case_id)

    @property
    def client_ids(self) -> list[str]:
        return sorted(self.clients)

    def train_cases(self) -> list[Case]:
        return [c for cid in self.client_ids for c in self.clients[cid].train]

    def eval_cases(self) -> list[Case]:
        return [c for cid in self.client_ids for c in self.clients[cid].eval]

    def all_cases(self) -> list[Case]:
        return self.train_cases() + self.eval_cases()

    @classmethod
    def from_cases(
        cls, name: str, cases: Sequence[Case], train_ids: Iterable[str]
    ) -> FederatedDataset:
        if not cases:
            raise EmptyDatasetError("no cases")
        train_ids = set(train_ids)
        clients: dict[str, ClientData] = {}
        for c in cases:
            slot = clients.setdefault(c.client_id, ClientData())
            (slot.train if c.case_id in train_ids else slot.eval).append(c)
        return cls(name, int(cases[0].features.size), dict(sorted(clients.items())))


@dataclass
class RawTable:
    """Parsed rows before encoding: raw string cells keyed by column name."""

    schema: Schema
    columns: list[str]
    cells: dict[str, list[str]]

    def __len__(self) -> int:
        return len(next(iter(self.cells.values()))) if self.cells else 0

    @property
    def feature_columns(self) -> list[str]:
        skip = set(ID_COLUMNS) | {TARGET_COLUMN, SPLIT_COLUMN}
        if self.schema is Schema.ASDTEST:
            skip = {_asd_target_column(self.columns)}
        return [c for c in self.columns if c not in skip]

    @property
    def targets(self) -> np.ndarray:
        if self.schema is Schema.ASDTEST:
            raw = self.cells[_asd_target_column(self.columns)]
            return np.array([_asd_target(v) for v in raw], dtype=np.int64)
        return np.array([_parse_target(v) for v in self.cells[TARGET_COLUMN]], dtype=np.int64)

    def numeric_features(self) -> np.ndarray:
        cols = self.feature_columns
        out = np.empty((len(self), len(cols)))
        for j, name in enumerate(cols):
            for i, cell in enumerate(self.cells[name]):
                try:
                    out[i, j] = float(cell)
                except ValueError:
                    raise SchemaError(f"row {i + 1}: non-numeric value {cell!r} in {name!r}") from None
        if not np.all(np.isfinite(out)):
            raise SchemaError("indicator cells must be finite")
        return out


def _parse_target(cell: str) -> int:
    try:
        value = int(float(cell))
    except ValueError:
        raise SchemaError(f"unparseable target {cell!r}") from None
    if value not in (-1, 0, 1) or float(cell) != value:
        raise SchemaError(f"unknown target code {cell!r}; expected -1, 0 or 1")
    return value


def _asd_target_column(columns: Sequence[str]) -> str:
    for name in ASD_TARGET_COLUMNS:
        if name in columns:
            return name
    raise SchemaError(f"no target column among {ASD_TARGET_COLUMNS}")


def _asd_target(cell: str) -> int:
    v = cell.strip().strip("'\"").lower()
    if v in ("yes", "1"):
        return 1
    if v in ("no", "0"):
        return 0
    raise SchemaError(f"unknown ASD class {cell!r}")


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".arff":
        header, data_lines = [], []
        in_data = False
        for line in text.splitlines():
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            low = s.lower()
            if low.startswith("@attribute"):
                name = s.split(None, 2)[1]
                header.append(name.strip("'\""))
            elif low.startswith("@data"):
                in_data = True
            elif in_data:
                data_lines.append(s)
        rows = list(csv.reader(data_lines, skipinitialspace=True))
    else:
        reader = csv.reader(text.splitlines())
        rows = [r for r in reader if r and not r[0].startswith("#")]
        if not rows:
            raise EmptyDatasetError(f"{path}: no header row")
        header, rows = [h.strip() for h in rows[0]], rows[1:]
    return header, [[c.strip().strip("'\"") for c in r] for r in rows]


def load_csv(path, schema: Schema | str = Schema.FLAMENCO) -> RawTable:
    """Read and validate a dataset file into a :class:`RawTable`."""
    schema = Schema(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    header, rows = _read_rows(path)
    if not header:
        raise EmptyDatasetError(f"{path}: no header row")
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise SchemaError(f"row {i + 1}: expected {len(header)} cells, got {len(r)}")

    if schema is Schema.ASDTEST:
        _asd_target_column(header)
        complete = [r for r in rows if not any(c in MISSING for c in r)]
        if len(complete) < len(rows):
            logger.info("dropped %d rows with missing values", len(rows) - len(complete))
        rows = complete
        if not rows:
            raise EmptyDatasetError(f"{path}: no complete rows")
    else:
        required = ["case_id", TARGET_COLUMN] + (["client_id"] if schema is Schema.FLAMENCO else [])
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")

    cells = {name: [r[j] for r in rows] for j, name in enumerate(header)}
    table = RawTable(schema, list(header), cells)
    table.targets  # validates target codes eagerly
    if schema is not Schema.ASDTEST:
        table.numeric_features()
        if len(set(cells["case_id"])) != len(table):
            raise SchemaError(f"{path}: case_id values are not unique")
        if SPLIT_COLUMN in cells:
            bad = {s for s in cells[SPLIT_COLUMN] if s not in ("train", "test")}
            if bad:
                raise SchemaError(f"{path}: split values must be train/test, got {sorted(bad)}")
    return table


def minmax_columns(x: np.ndarray) -> np.ndarray:
    """Column-wise min-max scaling; constant columns map to 0."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    out = np.zeros_like(x)
    ok = span > 0
    out[:, ok] = (x[:, ok] - lo[ok]) / span[ok]
    return out


def _is_numeric(values: Sequence[str]) -> bool:
    try:
        for v in values:
            float(v)
    except ValueError:
        return False
    return True


def preprocess_asdtest(raw: RawTable, encoding: str = "onehot") -> tuple[np.ndarray, list[str]]:
    """Encode categorical columns and min-max every output column.

    ``encoding="onehot"`` expands each categorical column into one indicator
    per category; ``"label"`` maps categories to sorted integer codes first.
    Returns the feature matrix and its column names.
    """
    if encoding not in ("onehot", "label"):
        raise ValueError(f"unknown encoding {encoding!r}")
    blocks, names = [], []
    for col in raw.feature_columns:
        values = raw.cells[col]
        if _is_numeric(values):
            blocks.append(minmax_columns(np.array(values, dtype=np.float64)[:, None]))
            names.append(col)
            continue
        categories = sorted(set(values))
        index = {c: i for i, c in enumerate(categories)}
        codes = np.array([index[v] for v in values])
        if encoding == "label":
            blocks.append(minmax_columns(codes[:, None].astype(np.float64)))
            names.append(col)
        else:
            onehot = np.zeros((len(values), len(categories)))
            onehot[np.arange(len(values)), codes] = 1.0
            blocks.append(onehot)
            names.extend(f"{col}={c}" for c in categories)
    return np.hstack(blocks), names


def admission_threshold(cases: Sequence[Case], quantile: float) -> float:
    normals = [c.features.mean() for c in cases if c.target == Target.NEGATIVE]
    if not normals:
        raise DataError("no target=0 cases to derive the admission threshold from")
    return float(np.quantile(normals, quantile))


def split_train_test(
    cases: Sequence[Case],
    presumed_normal_threshold: float = 0.5,
    normal_holdout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[list[Case], list[Case]]:
    """Presumed-normal training set and the evaluation remainder.

    Unlabelled cases join training when their mean feature value is at least
    the ``presumed_normal_threshold`` quantile of the normal cases' means; a
    quantile of 1.0 admits none. ``normal_holdout`` moves that fraction of
    the normal cases to evaluation so ranking metrics stay defined.
    """
    q = presumed_normal_threshold
    if not 0.0 <= q <= 1.0:
        raise ValueError("presumed_normal_threshold must be a quantile in [0, 1]")
    if not 0.0 <= normal_holdout < 1.0:
        raise ValueError("normal_holdout must lie in [0, 1)")
    thr = admission_threshold(cases, q)
    train_ids = set()
    normals = [c for c in cases if c.target == Target.NEGATIVE]
    keep = normals
    n_hold = int(round(normal_holdout * len(normals)))
    if n_hold:
        if rng is None:
            raise ValueError("holding out normal cases needs an rng")
        held = set(rng.choice(len(normals), size=n_hold, replace=False).tolist())
        keep = [c for i, c in enumerate(normals) if i not in held]
    train_ids.update(c.case_id for c in keep)
    if q < 1.0:
        train_ids.update(
            c.case_id for c in cases if c.target == Target.UNKNOWN and c.features.mean() >= thr
        )
    train = [c for c in cases if c.case_id in train_ids]
    evaluation = [c for c in cases if c.case_id not in train_ids]
    return train, evaluation


def _deal(cases: Sequence[Case], k: int, rng: np.random.Generator) -> list[Case]:
    """Reassign client ids round a random permutation; input order is kept."""
    order = rng.permutation(len(cases))
    assigned: list[Case] = [None] * len(cases)  # type: ignore[list-item]
    for client, chunk in enumerate(np.array_split(order, k)):
        for i in chunk:
            assigned[i] = cases[i].with_client(f"client_{client}")
    return assigned


def partition_equal(
    cases: Sequence[Case],
    k: int,
    rng: np.random.Generator,
    name: str = "partitioned",
    train_ids: Iterable[str] | None = None,
) -> FederatedDataset:
    """Deal shuffled cases into ``k`` clients whose sizes differ by at most one.

    Without ``train_ids`` the default presumed-normal split is applied.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if k > len(cases):
        raise DataError(f"cannot split {len(cases)} cases into {k} clients")
    assigned = _deal(cases, k, rng)
    if train_ids is None:
        train, _ = split_train_test(assigned)
        train_ids = [c.case_id for c in train]
    return FederatedDataset.from_cases(name, assigned, train_ids)


def _cases_from_table(table: RawTable, features: np.ndarray, client_default: str) -> list[Case]:
    ids = table.cells.get("case_id") or [f"case-{i:05d}" for i in range(len(table))]
    clients = table.cells.get("client_id") or [client_default] * len(table)
    return [
        Case(cid, client, int(t), features[i])
        for i, (cid, client, t) in enumerate(zip(ids, clients, table.targets))
    ]


def build_dataset(
    table: RawTable,
    *,
    name: str | None = None,
    quantile: float = 0.5,
    normal_holdout: float = 0.0,
    clients: int = 5,
    rng: np.random.Generator | None = None,
    encoding: str = "onehot",
) -> FederatedDataset:
    """Turn a loaded table into a federated dataset.

    A ``split`` column, when present, fixes train/test membership. Otherwise
    the presumed-normal rule decides. FLAMENCO and generic files keep their
    ``client_id`` column; ASDTest rows are dealt equally into ``clients``.
    """
    name = name or table.schema.value
    if table.schema is Schema.ASDTEST:
        if rng is None:
            raise ValueError("ASDTest partitioning needs an rng")
        features, _ = preprocess_asdtest(table, encoding)
        cases = [
            Case(f"asd-{i:04d}", "unassigned", int(t), features[i])
            for i, t in enumerate(table.targets)
        ]
        assigned = _deal(cases, clients, rng)
        train, _ = split_train_test(assigned, quantile, normal_holdout, rng)
        return FederatedDataset.from_cases(name, assigned, [c.case_id for c in train])

    x = table.numeric_features()
    if table.schema is Schema.FLAMENCO:
        x = minmax_columns(x)
    elif np.any(x < 0) or np.any(x > 1):
        raise SchemaError("generic datasets must carry features already scaled to [0, 1]")
    cases = _cases_from_table(table, x, "client_0")
    if "client_id" not in table.cells and clients > 1:
        if rng is None:
            raise ValueError("partitioning needs an rng")
        cases = _deal(cases, clients, rng)
    if SPLIT_COLUMN in table.cells:
        split = dict(zip(table.cells["case_id"], table.cells[SPLIT_COLUMN]))
        train_ids = [c.case_id for c in cases if split[c.case_id] == "train"]
    else:
        train, _ = split_train_test(cases, quantile, normal_holdout, rng)
        train_ids = [c.case_id for c in train]
    return FederatedDataset.from_cases(name, cases, train_ids)


def write_dataset_csv(dataset: FederatedDataset, path) -> None:
    """Write in the generic layout with a ``split`` column (17 significant digits)."""
    names = [f"f{j}" for j in range(dataset.feature_count)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "client_id", *names, TARGET_COLUMN, SPLIT_COLUMN])
        for cid in dataset.client_ids:
            data = dataset.clients[cid]
            for split, cases in (("train", data.train), ("test", data.eval)):
                for c in cases:
                    w.writerow(
                        [c.case_id, c.client_id, *(repr(float(v)) for v in c.features), c.target, split]
                    )


def load_dataset(path, schema: Schema | str = Schema.FLAMENCO, **kwargs) -> FederatedDataset:
    return build_dataset(load_csv(path, schema), **kwargs)


def generate_synthetic(
    n_normal: int,
    n_anomaly: int,
    n_unknown: int,
    feature_count: int,
    separation: float,
    k_clients: int,
    rng: np.random.Generator,
    *,
    noise: float = 0.05,
    label_skew: float = 0.0,
    quantity_skew: float = 0.0,
    client_shift: float = 0.0,
    rank: int = 0,
    residual: float = 0.1,
    unknown_normal_rate: float = 0.7,
    normal_holdout: float = 0.3,
    quantile: float = 0.5,
    name: str = "synthetic",
) -> FederatedDataset:
    """Planted-anomaly data in the screening layout.

    Normal cases scatter (``noise`` std per feature) around a high-score
    centroid; anomalies sit ``separation`` noise-stds lower on every feature.
    ``label_skew`` in [0, 1] pushes anomalies towards the first half of the
    clients, ``quantity_skew`` in [0, 1) makes client sizes unequal and
    ``client_shift`` adds a per-client offset to every feature (feature skew).
    Unlabelled cases are normal with probability ``unknown_normal_rate``.
    """
    if feature_count < 1:
        raise DataError("feature_count must be positive")
    if min(n_normal, n_anomaly, n_unknown) < 0 or separation < 0:
        raise DataError("counts and separation must be non-negative")
    if n_normal < k_clients:
        raise DataError("need at least one normal case per client")
    if not 0 <= label_skew <= 1 or not 0 <= quantity_skew < 1:
        raise ValueError("label_skew must lie in [0, 1] and quantity_skew in [0, 1)")
    k = k_clients
    centroid = rng.uniform(0.55, 0.8, size=feature_count)
    offsets = rng.normal(0.0, client_shift, size=(k, feature_count)) if client_shift else np.zeros((k, feature_count))
    share = (1 - quantity_skew) / k + quantity_skew * rng.dirichlet(np.ones(k))
    hot = max(1, k // 2)

    loadings = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(feature_count, rank)) if rank else None

    def draw(kind: int, client: int) -> np.ndarray:
        if loadings is None:
            spread = rng.normal(0.0, noise, size=feature_count)
        else:
            spread = noise * (loadings @ rng.normal(size=rank) + rng.normal(0.0, residual, size=feature_count))
        x = centroid + offsets[client] + spread
        if kind == Target.POSITIVE:
            x = x - separation * noise
        return np.clip(x, 0.0, 1.0)

    cases: list[Case] = []

    def add(target: int, kind: int, client: int) -> None:
        cases.append(Case(f"syn-{len(cases):05d}", f"client_{client}", target, draw(kind, client)))

    for i in range(n_normal):
        add(0, 0, i if i < k else int(rng.choice(k, p=share)))
    for _ in range(n_anomaly):
        if rng.random() < label_skew:
            client = int(rng.integers(hot))
        else:
            client = int(rng.choice(k, p=share))
        add(1, 1, client)
    for _ in range(n_unknown):
        kind = 0 if rng.random() < unknown_normal_rate else 1
        add(-1, kind, int(rng.choice(k, p=share)))

    train, _ = split_train_test(cases, quantile, normal_holdout, rng)
    return FederatedDataset.from_cases(name, cases, [c.case_id for c in train])
