import json

import numpy as np
import pytest

from fedasd import experiments as X
from fedasd.aggregators import AGGREGATOR_IDS
from fedasd.config import parse_text
from fedasd.errors import ConfigError, IntegrityError
from fedasd.samplers import SAMPLER_IDS

FAST = (
    "data.schema = synthetic\ndata.n_normal = 60\ndata.n_anomaly = 15\ndata.n_unknown = 10\n"
    "data.features = 5\ndata.clients = 3\ntrain.rounds = 2\ntrain.epochs = 3\n"
    "model.hidden_dim = 8\nmodel.latent_dim = 4\n"
)


def cfg(extra="", seeds="0"):
    return parse_text(FAST + f"run.seeds = {seeds}\n" + extra)


def test_single_seed_summary_is_that_seed(tmp_path):
    payload = X.run_experiment(cfg(seeds="7"), tmp_path)
    _, rows = X.read_signed_csv(tmp_path / "summary.csv")
    by_seed = {r["seed"]: r for r in rows}
    assert set(by_seed) == {"7", "mean", "std"}
    for name in X.METRIC_NAMES:
        assert by_seed["mean"][name] == by_seed["7"][name]
        assert float(by_seed["std"][name]) == 0.0
    assert payload["histories"] == ["history_seed7.csv"]


def test_outputs_are_reproducible_and_mean_recomputable(tmp_path):
    c = cfg(seeds="0, 1, 2")
    X.run_experiment(c, tmp_path / "a")
    X.run_experiment(c.replace(run__parallel_seeds=3), tmp_path / "b")
    for name in ("summary.csv", "history_seed1.csv", "scores_seed2.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    data = json.loads((tmp_path / "a" / "summary.json").read_text())
    finals = [X.load_history_csv(tmp_path / "a" / f"history_seed{s}.csv", c.fingerprint)[-1]
              for s in (0, 1, 2)]
    assert data["metrics"]["auc"]["mean"] == pytest.approx(np.mean([f["auc"] for f in finals]), abs=1e-6)
    assert len(X.load_history_csv(tmp_path / "a" / "history_seed0.csv")) == 2


def test_history_columns_and_model_roundtrip(tmp_path):
    c = cfg()
    X.run_experiment(c, tmp_path)
    _, rows = X.read_signed_csv(tmp_path / "history_seed0.csv")
    assert tuple(rows[0]) == X.HISTORY_COLUMNS
    params = X.load_model(tmp_path / "model_seed0.npz", c)
    assert params.values.ndim == 1
    with pytest.raises(IntegrityError):
        X.load_model(tmp_path / "model_seed0.npz", c.replace(train__lr=0.01))


def test_tampering_is_detected(tmp_path):
    c = cfg()
    X.run_experiment(c, tmp_path)
    path = tmp_path / "history_seed0.csv"
    with pytest.raises(IntegrityError):
        X.read_signed_csv(path, "0" * 16)
    text = path.read_text()
    path.write_text(text.replace("\n1,", "\n1,9", 1))
    with pytest.raises(IntegrityError):
        X.read_signed_csv(path)
    path.write_text(text.split("\n", 1)[1])
    with pytest.raises(IntegrityError):
        X.read_signed_csv(path)


def test_output_dir_precedence(tmp_path, monkeypatch):
    c = cfg().replace(run__output_dir=str(tmp_path / "cfg"))
    assert X.output_dir(c) == tmp_path / "cfg"
    monkeypatch.setenv(X.OUTPUT_ENV, str(tmp_path / "env"))
    assert X.output_dir(c) == tmp_path / "env"
    assert X.output_dir(c, tmp_path / "cli") == tmp_path / "cli"
    assert c.fingerprint == cfg().fingerprint


def test_sweep_grids():
    c = cfg()
    assert len(X.sweep_cells("aggregators", c)) == len(AGGREGATOR_IDS) == 8
    smp = X.sweep_cells("samplers", c)
    assert len(smp) == len(SAMPLER_IDS) * 3
    assert sorted({cell.fraction for cell in smp}) == [0.4, 0.6, 0.8]
    assert [cell.setting for cell in X.sweep_cells("settings", c)] == ["centralized", "individual", "federated"]
    assert [cell.fhe for cell in X.sweep_cells("fhe", c)] == [False, True]
    with pytest.raises(ConfigError):
        X.sweep_cells("fhe", c.replace(agg__id="fedyogi"))
    with pytest.raises(ConfigError):
        X.sweep_cells("bogus", c)
    grid = X.comparison_grid(aggregators=("fedavg", "medianavg"), fractions=(1.0,), fhe=(False, True))
    assert [cell.label for cell in grid] == ["fedavg/random@1", "fedavg/random@1+fhe", "medianavg/random@1"]


def test_compare_writes_long_and_summary(tmp_path):
    c = cfg(seeds="0, 1")
    cells = X.sweep_cells("settings", c)
    summaries = X.compare(c, cells, tmp_path)
    assert len(summaries) == 3
    _, long_rows = X.read_signed_csv(tmp_path / "compare_long.csv", c.fingerprint)
    _, summary_rows = X.read_signed_csv(tmp_path / "compare_summary.csv", c.fingerprint)
    assert len(long_rows) == 6 and len(summary_rows) == 3
    for s, row in zip(summaries, summary_rows):
        seeds = [float(r["auc"]) for r in long_rows if r["cell"] == row["cell"]]
        assert float(row["auc_mean"]) == pytest.approx(np.mean(seeds), abs=1e-6)
        assert row["n_seeds"] == "2"


def test_fhe_sweep_pairs(tmp_path):
    c = cfg()
    summaries = X.compare(c, X.sweep_cells("fhe", c), tmp_path)
    plain, enc = (s["metrics"]["auc"]["mean"] for s in summaries)
    assert abs(plain - enc) < 0.01
