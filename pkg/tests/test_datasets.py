import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedasd.datasets import (
    Case,
    FederatedDataset,
    RawTable,
    Schema,
    admission_threshold,
    build_dataset,
    generate_synthetic,
    load_csv,
    load_dataset,
    minmax_columns,
    partition_equal,
    preprocess_asdtest,
    split_train_test,
    write_dataset_csv,
)
from fedasd.errors import DataError, EmptyDatasetError, SchemaError

ASD_COLUMNS = [f"A{i}_Score" for i in range(1, 11)] + [
    "age", "gender", "ethnicity", "jundice", "austim", "contry_of_res",
    "used_app_before", "result", "age_desc", "relation", "Class/ASD",
]


def write_flamenco(path, rng, n=451, k=5, features=19, with_split=True):
    cols = ["case_id", "client_id"] + [f"ind{j}" for j in range(features)] + ["target"]
    if with_split:
        cols.append("split")
    targets = rng.choice([-1, 0, 1], size=n, p=[0.3, 0.5, 0.2])
    split = np.array(["test"] * n, dtype=object)
    normals = np.flatnonzero(targets == 0)
    split[normals[:192]] = "train"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(n):
            row = [f"case{i:04d}", f"school_{i % k}"] + list(rng.integers(0, 40, size=features)) + [int(targets[i])]
            if with_split:
                row.append(split[i])
            w.writerow(row)
    return targets


def write_asdtest(path, rng, n=292, n_missing=43, arff=False):
    rows = []
    for i in range(n):
        scores = list(rng.integers(0, 2, size=10))
        row = scores + [
            str(int(rng.integers(4, 12))), rng.choice(["m", "f"]), rng.choice(["White-European", "Asian", "Others"]),
            rng.choice(["yes", "no"]), rng.choice(["yes", "no"]), rng.choice(["Jordan", "UK", "India"]),
            rng.choice(["yes", "no"]), str(sum(scores)), "4-11 years", rng.choice(["Parent", "Self"]),
            "YES" if sum(scores) > 6 else "NO",
        ]
        if i < n_missing:
            row[10 + int(rng.integers(0, 3))] = "?"
        rows.append(row)
    rows = [rows[i] for i in rng.permutation(n)]
    with open(path, "w", newline="") as fh:
        if arff:
            fh.write("@relation autism\n")
            for c in ASD_COLUMNS:
                fh.write(f"@attribute '{c}' string\n")
            fh.write("@data\n")
            for r in rows:
                fh.write(",".join(map(str, r)) + "\n")
        else:
            w = csv.writer(fh)
            w.writerow(ASD_COLUMNS)
            w.writerows(rows)


def test_flamenco_shape_and_published_split(tmp_path, rng):
    path = tmp_path / "flamenco.csv"
    write_flamenco(path, rng)
    table = load_csv(path, "flamenco")
    assert len(table) == 451 and len(table.feature_columns) == 19
    ds = build_dataset(table)
    assert len(ds.client_ids) == 5 and ds.feature_count == 19
    assert len(ds.train_cases()) == 192 and len(ds.eval_cases()) == 259
    x = np.stack([c.features for c in ds.all_cases()])
    assert x.min() >= 0 and x.max() <= 1
    raw_clients = dict(zip(table.cells["case_id"], table.cells["client_id"]))
    assert all(c.client_id == raw_clients[c.case_id] for c in ds.all_cases())


def test_flamenco_rule_split_without_column(tmp_path, rng):
    path = tmp_path / "f.csv"
    write_flamenco(path, rng, with_split=False)
    ds = load_dataset(path, "flamenco")
    assert all(c.target != 1 for c in ds.train_cases())
    assert all(c.target == 0 for c in ds.clients["school_0"].train if c.target != -1)


def test_loader_errors(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("case_id,client_id,a,target\n")
    with pytest.raises(EmptyDatasetError):
        load_csv(empty)
    bad = tmp_path / "b.csv"
    bad.write_text("case_id,client_id,a,target\nx,c,1.0,2\n")
    with pytest.raises(SchemaError, match="target code"):
        load_csv(bad)
    nonnum = tmp_path / "n.csv"
    nonnum.write_text("case_id,client_id,a,target\nx,c,high,0\n")
    with pytest.raises(SchemaError, match="non-numeric"):
        load_csv(nonnum)
    nocol = tmp_path / "m.csv"
    nocol.write_text("case_id,a,target\nx,1,0\n")
    with pytest.raises(SchemaError, match="client_id"):
        load_csv(nocol)
    dup = tmp_path / "d.csv"
    dup.write_text("case_id,client_id,a,target\nx,c,1,0\nx,c,2,0\n")
    with pytest.raises(SchemaError, match="unique"):
        load_csv(dup)
    with pytest.raises(DataError):
        load_csv(tmp_path / "missing.csv")


@pytest.mark.parametrize("arff", [False, True])
def test_asdtest_loading_and_partition(tmp_path, rng, arff):
    path = tmp_path / ("asd.arff" if arff else "asd.csv")
    write_asdtest(path, rng, arff=arff)
    table = load_csv(path, "asdtest")
    assert len(table) == 249 and len(table.feature_columns) == 20
    x, names = preprocess_asdtest(table)
    assert x.min() >= 0 and x.max() <= 1
    for prefix in ("gender=", "jundice=", "ethnicity="):
        group = [i for i, n in enumerate(names) if n.startswith(prefix)]
        np.testing.assert_array_equal(x[:, group].sum(axis=1), 1.0)
    ds = build_dataset(table, clients=5, rng=np.random.default_rng(0))
    sizes = sorted(len(d.train) + len(d.eval) for d in ds.clients.values())
    assert sizes == [49, 50, 50, 50, 50]
    lab, _ = preprocess_asdtest(table, "label")
    assert lab.shape == (249, 20)


def test_preprocess_examples():
    table = RawTable(Schema.ASDTEST, ["b", "n", "k", "Class/ASD"],
                     {"b": ["yes", "no", "yes"], "n": ["2", "4", "6"], "k": ["3", "3", "3"],
                      "Class/ASD": ["NO", "YES", "NO"]})
    x, names = preprocess_asdtest(table)
    cols = {n: x[:, i] for i, n in enumerate(names)}
    np.testing.assert_array_equal(cols["b=no"] + cols["b=yes"], 1.0)
    np.testing.assert_allclose(cols["n"], [0, 0.5, 1])
    np.testing.assert_array_equal(cols["k"], 0.0)
    np.testing.assert_array_equal(minmax_columns(np.array([[2.0], [4.0], [6.0]]))[:, 0], [0, 0.5, 1])


def cases_from(means, targets):
    return [Case(f"k{i}", "a", t, np.full(3, m)) for i, (m, t) in enumerate(zip(means, targets))]


def test_split_hand_computed_quantile():
    means = [0.2, 0.4, 0.6, 0.8, 0.5, 0.45]
    targets = [0, 0, 0, 0, -1, -1]
    cases = cases_from(means, targets)
    # median of the normals' means 0.2, 0.4, 0.6, 0.8 is 0.5 -> admits k4 only
    assert admission_threshold(cases, 0.5) == pytest.approx(0.5)
    train, ev = split_train_test(cases, 0.5)
    assert [c.case_id for c in train] == ["k0", "k1", "k2", "k3", "k4"]
    assert [c.case_id for c in ev] == ["k5"]
    # 25th percentile 0.35 admits both
    train, _ = split_train_test(cases, 0.25)
    assert {"k4", "k5"} <= {c.case_id for c in train}


def test_split_boundaries():
    cases = cases_from([0.1, 0.9, 0.95, 0.3], [0, 0, -1, 1])
    train, _ = split_train_test(cases, 1.0)
    assert [c.case_id for c in train] == ["k0", "k1"]
    only = cases_from([0.1, 0.2], [0, 0])
    train, ev = split_train_test(only)
    assert len(train) == 2 and ev == []
    with pytest.raises(DataError):
        split_train_test(cases_from([0.3], [-1]))


def test_split_holdout_needs_rng_and_holds_out(rng):
    cases = cases_from(np.linspace(0, 1, 20), [0] * 20)
    with pytest.raises(ValueError):
        split_train_test(cases, 0.5, 0.25)
    train, ev = split_train_test(cases, 0.5, 0.25, rng)
    assert len(ev) == 5 and len(train) == 15


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 0.9))
def test_no_positive_ever_in_train(seed, q, hold):
    rng = np.random.default_rng(seed)
    n = 30
    targets = rng.choice([-1, 0, 1], size=n)
    targets[0] = 0
    cases = [Case(f"c{i}", "a", int(t), rng.random(4)) for i, t in enumerate(targets)]
    train, ev = split_train_test(cases, q, hold, rng)
    assert all(c.target != 1 for c in train)
    assert len(train) + len(ev) == n


def test_partition_equal(rng):
    cases = [Case(f"c{i}", "x", 0, np.zeros(2)) for i in range(249)]
    ds = partition_equal(cases, 5, np.random.default_rng(3))
    assert sorted(len(d.train) + len(d.eval) for d in ds.clients.values()) == [49, 50, 50, 50, 50]
    again = partition_equal(cases, 5, np.random.default_rng(3))
    assert [c.client_id for c in ds.all_cases()] == [c.client_id for c in again.all_cases()]
    one = partition_equal(cases, 1, rng)
    assert len(one.client_ids) == 1 and len(one.all_cases()) == 249
    with pytest.raises(ValueError):
        partition_equal(cases, 0, rng)


def test_dataset_invariants():
    pos = Case("p", "a", 1, np.zeros(2))
    with pytest.raises(DataError):
        FederatedDataset.from_cases("x", [pos], ["p"])
    with pytest.raises(DataError):
        Case("q", "a", 2, np.zeros(2))
    with pytest.raises(DataError):
        FederatedDataset.from_cases("x", [Case("a", "a", 0, np.zeros(2)), Case("b", "a", 0, np.zeros(3))], [])


def test_csv_round_trip(tmp_path, rng):
    ds = generate_synthetic(40, 10, 10, 6, 3.0, 3, rng, label_skew=0.5, quantity_skew=0.3, client_shift=0.02)
    path = tmp_path / "syn.csv"
    write_dataset_csv(ds, path)
    back = load_dataset(path, "generic")
    assert back.client_ids == ds.client_ids
    for cid in ds.client_ids:
        for part in ("train", "eval"):
            a = getattr(ds.clients[cid], part)
            b = getattr(back.clients[cid], part)
            assert [c.case_id for c in a] == [c.case_id for c in b]
            assert [c.target for c in a] == [c.target for c in b]
            for ca, cb in zip(a, b):
                assert np.max(np.abs(ca.features - cb.features)) <= 1e-12


def test_generic_requires_unit_range(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("case_id,client_id,a,target\nx,c,1.5,0\n")
    with pytest.raises(SchemaError):
        load_dataset(p, "generic")


def test_synthetic_examples(rng):
    ds = generate_synthetic(50, 0, 20, 5, 6.0, 5, rng)
    assert {c.target for c in ds.eval_cases()} <= {0, -1}
    assert all(ds.clients[c].train for c in ds.client_ids)
    with pytest.raises(DataError):
        generate_synthetic(10, 1, 0, 0, 1.0, 2, rng)
    skewed = generate_synthetic(100, 200, 0, 4, 6.0, 4, rng, label_skew=1.0)
    hot = {c.client_id for c in skewed.all_cases() if c.target == 1}
    assert hot <= {"client_0", "client_1"}
    low_rank = generate_synthetic(200, 0, 0, 12, 0.0, 1, rng, rank=2, residual=0.01, normal_holdout=0.0)
    x = np.stack([c.features for c in low_rank.all_cases()])
    sv = np.linalg.svd(x - x.mean(0), compute_uv=False)
    assert sv[2] < 0.1 * sv[1]


def test_synthetic_zero_separation_is_chance_level():
    from fedasd.metrics import auc_roc

    aucs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        ds = generate_synthetic(100, 50, 0, 8, 0.0, 2, rng)
        ev = ds.eval_cases()
        score = [float(np.sum((c.features - 0.67) ** 2)) for c in ev]
        aucs.append(auc_roc(score, [c.target for c in ev]))
    assert abs(np.mean(aucs) - 0.5) <= 0.1
