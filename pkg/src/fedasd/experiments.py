"""Multi-seed experiments, comparison grids and their on-disk results.

Each seed's history is written as a CSV whose first line carries the config
fingerprint and a digest of the body:

    # fingerprint=<16 hex>; digest=<sha256 hex>

``load_history_csv`` recomputes the digest so edited files are rejected, and
an expected fingerprint can be passed to catch results from a different
config. Wall-clock timings only go to ``summary.json``; the CSVs are
byte-identical across reruns with the same config.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import engine
from . import metrics as M
from .config import ExperimentConfig, to_text
from .datasets import FederatedDataset, Schema, generate_synthetic, load_csv, load_dataset
from .errors import ConfigError, DataError, EmptyDatasetError, IntegrityError, SchemaError
from .models import score_dataset, zero_model
from .nn import ModelParams

logger = logging.getLogger(__name__)

OUTPUT_ENV = "FEDASD_OUTPUT_DIR"
HISTORY_COLUMNS = (
    "round", "train_loss", "test_loss_total", "test_loss_label_-1", "test_loss_label_0",
    "test_loss_label_1", "auc", "ap", "sireos",
)
SCORE_COLUMNS = ("case_id", "client_id", "target", "score")
METRIC_NAMES = ("auc", "ap", "sireos", "test_loss")
DEFAULT_FRACTIONS = (0.4, 0.6, 0.8)


def output_dir(config: ExperimentConfig, override=None) -> Path:
    """``override`` beats the environment variable, which beats the config."""
    return Path(override or os.environ.get(OUTPUT_ENV) or config.run.output_dir)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return "NA"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6f}"


def _parse(cell: str):
    return None if cell == "NA" else float(cell)


def build_dataset_for(config: ExperimentConfig, seed: int) -> FederatedDataset:
    """Dataset for one run; partitions depend on ``data.seed`` or, if unset, the run seed."""
    d = config.data
    rng = engine.derive_rng(seed if d.seed is None else d.seed, "data")
    if d.schema == "synthetic":
        return generate_synthetic(
            d.n_normal, d.n_anomaly, d.n_unknown, d.features, d.separation, d.clients, rng,
            noise=d.noise, label_skew=d.label_skew, quantity_skew=d.quantity_skew,
            client_shift=d.client_shift, rank=d.rank, residual=d.residual,
            unknown_normal_rate=d.unknown_normal_rate,
            normal_holdout=d.normal_holdout, quantile=d.quantile,
        )
    return load_dataset(
        d.path, Schema(d.schema), quantile=d.quantile, normal_holdout=d.normal_holdout,
        clients=d.clients, rng=rng, encoding=d.encoding,
    )


def history_rows(history: engine.TrainingHistory) -> list[list[str]]:
    rows = []
    for rec in history.records:
        m = rec.metrics
        rows.append([
            str(rec.round), _fmt(rec.train_loss), _fmt(m.test_loss), _fmt(m.loss_by_label[-1]),
            _fmt(m.loss_by_label[0]), _fmt(m.loss_by_label[1]), _fmt(m.auc), _fmt(m.ap),
            _fmt(m.sireos),
        ])
    return rows


def _digest(fingerprint: str, body: str) -> str:
    return hashlib.sha256((fingerprint + body).encode("utf-8")).hexdigest()


def _csv_body(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_signed_csv(path: Path, fingerprint: str, header, rows) -> None:
    body = _csv_body(header, rows)
    path.write_text(f"# fingerprint={fingerprint}; digest={_digest(fingerprint, body)}\n{body}", encoding="utf-8")


def read_signed_csv(path, expected_fingerprint: str | None = None) -> tuple[str, list[dict[str, str]]]:
    """Rows of a signed CSV after checking its digest (and fingerprint, if given)."""
    text = Path(path).read_text(encoding="utf-8")
    first, _, body = text.partition("\n")
    try:
        fp_part, dg_part = first.lstrip("# ").split(";")
        fingerprint = fp_part.strip().split("=", 1)[1]
        digest = dg_part.strip().split("=", 1)[1]
    except (ValueError, IndexError):
        raise IntegrityError(f"{path}: missing fingerprint header") from None
    if _digest(fingerprint, body) != digest:
        raise IntegrityError(f"{path}: contents do not match the recorded digest")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise IntegrityError(
            f"{path}: produced by config {fingerprint}, expected {expected_fingerprint}"
        )
    return fingerprint, list(csv.DictReader(io.StringIO(body)))


def load_history_csv(path, expected_fingerprint: str | None = None) -> list[dict[str, float | None]]:
    _, rows = read_signed_csv(path, expected_fingerprint)
    return [{k: _parse(v) for k, v in row.items()} for row in rows]


def save_model(path: Path, params: ModelParams, fingerprint: str, input_dim: int) -> None:
    np.savez(path, values=params.values, fingerprint=fingerprint, input_dim=input_dim)


def load_model(path, config: ExperimentConfig) -> ModelParams:
    with np.load(path) as z:
        values = z["values"]
        input_dim = int(z["input_dim"])
        fingerprint = str(z["fingerprint"])
    if fingerprint != config.fingerprint:
        raise IntegrityError(f"{path}: model trained under config {fingerprint}, not {config.fingerprint}")
    spec = engine.build_model_spec(config, input_dim)
    return zero_model(spec).with_values(values)


@dataclass
class SeedResult:
    seed: int
    history: engine.TrainingHistory
    seconds: float

    @property
    def final(self) -> engine.MetricsReport:
        return self.history.final


def _mean_std(values) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def summarize(results: Sequence[SeedResult]) -> dict[str, dict[str, float | None]]:
    out = {}
    for name in METRIC_NAMES:
        mean, std = _mean_std(getattr(r.final, name) for r in results)
        out[name] = {"mean": mean, "std": std}
    return out


def run_one_seed(config: ExperimentConfig, seed: int) -> SeedResult:
    dataset = build_dataset_for(config, seed)
    t0 = time.perf_counter()
    history = engine.run_setting(config, dataset, seed)
    history.dataset = dataset
    result = SeedResult(seed, history, time.perf_counter() - t0)
    logger.info("seed %d: auc=%s (%.2fs)", seed, _fmt(history.final.auc), result.seconds)
    return result


def run_seeds(config: ExperimentConfig, seeds: Sequence[int] | None = None) -> list[SeedResult]:
    """Results in seed order; ``run.parallel_seeds`` > 1 runs seeds on a thread pool."""
    config = config.resolved()
    seeds = list(seeds if seeds is not None else config.run.seeds)
    if config.run.parallel_seeds > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=config.run.parallel_seeds) as pool:
            return list(pool.map(lambda s: run_one_seed(config, s), seeds))
    return [run_one_seed(config, s) for s in seeds]


def score_rows(history: engine.TrainingHistory, config: ExperimentConfig) -> list[list[str]]:
    """Final-model scores of every evaluation case (individual: each client's own model)."""
    dataset = history.dataset
    models_by_client = {cid: h.params for cid, h in history.per_client.items()}
    spec = engine.build_model_spec(config, dataset.feature_count)
    rows = []
    for cid in dataset.client_ids:
        params = models_by_client.get(cid, history.params)
        cases = dataset.clients[cid].eval
        if params is None or not cases:
            continue
        for case, (case_id, score) in zip(cases, score_dataset(params, spec, cases)):
            rows.append([case_id, cid, str(case.target), _fmt(score)])
    return rows


def evaluate_scores(path, features_path=None, sireos_k: int = 10,
                    sireos_percentile: float = 1.0) -> dict[str, float | None]:
    """Metrics from a ``case_id, target, score`` CSV; SIREOS needs a dataset file with features."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    if not rows:
        raise EmptyDatasetError(f"{path}: no scores")
    missing = {"case_id", "target", "score"} - set(rows[0])
    if missing:
        raise SchemaError(f"{path}: missing columns {sorted(missing)}")
    try:
        targets = np.array([int(r["target"]) for r in rows])
        scores = np.array([float(r["score"]) for r in rows])
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    labelled = targets >= 0
    y, s = targets[labelled], scores[labelled]
    out = {
        "n": len(rows),
        "auc": M.auc_roc(s, y) if y.size else None,
        "ap": M.average_precision(s, y) if y.size else None,
        "sireos": None,
    }
    if features_path is not None:
        table = load_csv(features_path, Schema.GENERIC)
        x = table.numeric_features()
        index = {cid: i for i, cid in enumerate(table.cells["case_id"])}
        try:
            feats = x[[index[r["case_id"]] for r in rows]]
        except KeyError as exc:
            raise DataError(f"case {exc.args[0]} has no features in {features_path}") from None
        if len(rows) > 1 and scores.sum() > 0:
            out["sireos"] = M.sireos(scores, feats, sireos_k, sireos_percentile)
    return out


def run_experiment(config: ExperimentConfig, out_dir=None, save_models: bool = True) -> dict:
    """Run every seed and write per-seed histories plus summaries to ``out_dir``."""
    config = config.resolved()
    out = output_dir(config, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fp = config.fingerprint
    results = run_seeds(config)
    for r in results:
        write_signed_csv(out / f"history_seed{r.seed}.csv", fp, HISTORY_COLUMNS, history_rows(r.history))
        write_signed_csv(out / f"scores_seed{r.seed}.csv", fp, SCORE_COLUMNS, score_rows(r.history, config))
        if save_models and r.history.params is not None:
            save_model(out / f"model_seed{r.seed}.npz", r.history.params, fp,
                       r.history.params.shapes[0][1])
    summary = summarize(results)
    rows = [[str(r.seed), *(_fmt(getattr(r.final, n)) for n in METRIC_NAMES)] for r in results]
    for stat in ("mean", "std"):
        rows.append([stat, *(_fmt(summary[n][stat]) for n in METRIC_NAMES)])
    write_signed_csv(out / "summary.csv", fp, ("seed", *METRIC_NAMES), rows)
    payload = {
        "fingerprint": fp,
        "config": to_text(config),
        "metrics": summary,
        "seconds": {str(r.seed): r.seconds for r in results},
        "histories": [f"history_seed{r.seed}.csv" for r in results],
    }
    (out / "summary.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return payload


@dataclass(frozen=True)
class Cell:
    setting: str
    aggregator: str
    sampler: str
    fraction: float
    fhe: bool

    @property
    def label(self) -> str:
        if self.setting != "federated":
            return self.setting
        tag = f"{self.aggregator}/{self.sampler}@{self.fraction:g}"
        return tag + ("+fhe" if self.fhe else "")

    def overrides(self) -> dict:
        return {
            "train.setting": self.setting,
            "agg.id": self.aggregator,
            "sampler.id": self.sampler,
            "sampler.fraction": self.fraction,
            "fhe.enabled": self.fhe,
        }


def comparison_grid(
    settings: Sequence[str] = ("federated",),
    aggregators: Sequence[str] = ("fedavg",),
    samplers: Sequence[str] = ("random",),
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    fhe: Sequence[bool] = (False,),
) -> list[Cell]:
    from .aggregators import LINEAR_AGGREGATORS

    cells = []
    for setting in settings:
        if setting != "federated":
            cells.append(Cell(setting, "fedavg", "random", 1.0, False))
            continue
        for agg, smp, frac, enc in itertools.product(aggregators, samplers, fractions, fhe):
            if enc and agg not in LINEAR_AGGREGATORS:
                logger.info("skipping %s with encryption: aggregator is not linear", agg)
                continue
            cells.append(Cell(setting, agg, smp, float(frac), bool(enc)))
    return cells


SWEEPS = ("aggregators", "samplers", "settings", "fhe")


def sweep_cells(sweep: str, config: ExperimentConfig, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                values: Sequence[str] | None = None) -> list[Cell]:
    """Grid for one named sweep; everything not swept comes from ``config``."""
    from .aggregators import AGGREGATOR_IDS
    from .config import SETTINGS
    from .samplers import SAMPLER_IDS

    a, s = config.agg.id, config.sampler
    if sweep == "aggregators":
        return comparison_grid(aggregators=values or AGGREGATOR_IDS, samplers=(s.id,),
                               fractions=(s.fraction,), fhe=(config.fhe.enabled,))
    if sweep == "samplers":
        return comparison_grid(aggregators=(a,), samplers=values or SAMPLER_IDS,
                               fractions=fractions, fhe=(config.fhe.enabled,))
    if sweep == "settings":
        chosen = values or SETTINGS
        return [
            Cell(st, a, s.id, s.fraction, config.fhe.enabled) if st == "federated"
            else Cell(st, "fedavg", "random", 1.0, False)
            for st in chosen
        ]
    if sweep == "fhe":
        from .aggregators import LINEAR_AGGREGATORS

        if a not in LINEAR_AGGREGATORS:
            raise ConfigError(f"the fhe sweep needs a linear aggregator, got {a!r}")
        return comparison_grid(aggregators=(a,), samplers=(s.id,), fractions=(s.fraction,),
                               fhe=(False, True))
    raise ConfigError(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")


def compare(config: ExperimentConfig, cells: Sequence[Cell], out_dir=None) -> list[dict]:
    """Run every cell over the configured seeds; long-format plus per-cell summary CSVs."""
    config = config.resolved()
    out = output_dir(config, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    long_rows, summary_rows, summaries = [], [], []
    for cell in cells:
        cfg = config.replace(**cell.overrides()).resolved()
        results = run_seeds(cfg)
        for r in results:
            long_rows.append([cell.label, cfg.fingerprint, str(r.seed),
                              *(_fmt(getattr(r.final, n)) for n in METRIC_NAMES)])
        s = summarize(results)
        summaries.append({"cell": cell, "fingerprint": cfg.fingerprint, "metrics": s})
        summary_rows.append([cell.label, cfg.fingerprint, str(len(results)),
                             *(_fmt(s[n][k]) for n in METRIC_NAMES for k in ("mean", "std"))])
    fp = config.fingerprint
    write_signed_csv(out / "compare_long.csv", fp,
                     ("cell", "fingerprint", "seed", *METRIC_NAMES), long_rows)
    write_signed_csv(out / "compare_summary.csv", fp,
                     ("cell", "fingerprint", "n_seeds",
                      *(f"{n}_{k}" for n in METRIC_NAMES for k in ("mean", "std"))),
                     summary_rows)
    return summaries
