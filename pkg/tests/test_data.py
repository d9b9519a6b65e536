import json

import numpy as np
import pytest

from dpcate.data import (DataError, Dataset, Domain, Sample, SyntheticConfig, cate_function, generate_synthetic,
                         load_csv, oracle_nuisances, split_disjoint, write_csv)


def test_generate_is_deterministic():
    d1, _ = generate_synthetic(SyntheticConfig(n=200, seed=3))
    d2, _ = generate_synthetic(SyntheticConfig(n=200, seed=3))
    assert np.array_equal(d1.x, d2.x) and np.array_equal(d1.a, d2.a) and np.array_equal(d1.y, d2.y)


def test_samples_inside_declared_domain():
    d, _ = generate_synthetic(SyntheticConfig(n=2000, seed=1))
    assert np.all(d.x >= 0) and np.all(d.x <= 1)
    lo, hi = d.outcome_bounds
    assert d.y.min() >= lo and d.y.max() <= hi
    assert set(np.unique(d.a)) == {0, 1}


def test_dataset1_effect_values():
    f = cate_function("dataset1")
    x = np.array([[0.0, 0.3], [0.5, 0.9]])
    expected = np.exp(2 * x[:, 0]) + 3 * np.sin(4 * x[:, 0])
    assert np.allclose(f(x), expected)
    assert f(np.array([[0.0, 0.0]]))[0] == pytest.approx(1.0)


def test_oracle_propensity_matches_treatment_frequency():
    d, true_cate = generate_synthetic(SyntheticConfig(n=40000, seed=5))
    _, pi = oracle_nuisances(true_cate)
    p = pi(d.x)
    # calibration of the oracle propensity within Monte-Carlo error
    for lo in (0.5, 0.6, 0.7):
        sel = (p >= lo) & (p < lo + 0.1)
        if sel.sum() > 500:
            se = np.sqrt(0.25 / sel.sum())
            assert abs(d.a[sel].mean() - p[sel].mean()) < 4 * se


def test_csv_roundtrip(tmp_path):
    d, _ = generate_synthetic(SyntheticConfig(n=50, seed=2))
    path = tmp_path / "d.csv"
    write_csv(d, path)
    back = load_csv(path, d.covariate_bounds, d.outcome_bounds)
    assert np.array_equal(back.x, d.x) and np.array_equal(back.y, d.y) and np.array_equal(back.a, d.a)


def test_csv_bad_treatment_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x1,a,y\n0.1,1,2.0\n0.2,2,1.0\n")
    with pytest.raises(DataError, match="line 3"):
        load_csv(path)


def test_csv_empty(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("x1,a,y\n")
    with pytest.raises(DataError, match="empty"):
        load_csv(path)


def test_csv_inferred_bounds_contain_data(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1,a,y\n0.0,1,1.0\n1.0,0,3.0\n")
    d = load_csv(path)
    assert d.covariate_bounds[0, 0] < 0.0 < 1.0 < d.covariate_bounds[0, 1]
    assert d.outcome_bounds[0] < 1.0 and d.outcome_bounds[1] > 3.0


def test_out_of_domain_rejected():
    with pytest.raises(DataError):
        Dataset(np.array([[2.0]]), [1], [0.0], [[0, 1]], [-1, 1])
    with pytest.raises(DataError):
        Dataset(np.array([[0.5]]), [1], [5.0], [[0, 1]], [-1, 1])


def test_split_is_disjoint_and_covering():
    d, _ = generate_synthetic(SyntheticConfig(n=101, seed=0))
    a, b = split_disjoint(d, 0.5, seed=4)
    assert len(a) == 50 and len(b) == 51
    rows = {tuple(r) for r in np.column_stack([a.x, a.y])} | {tuple(r) for r in np.column_stack([b.x, b.y])}
    assert len(rows) == 101
    with pytest.raises(ValueError):
        split_disjoint(d, 1.0, seed=0)


def test_with_sample_replaces_one_record():
    d, _ = generate_synthetic(SyntheticConfig(n=10, seed=0))
    z = Sample(np.array([0.5, 0.5]), 1, 0.0)
    d2 = d.with_sample(3, z)
    assert len(d2) == len(d)
    assert np.sum(np.any(d2.x != d.x, axis=1)) == 1


def test_config_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        SyntheticConfig(effect_kind="nope")
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n": 20, "seed": 4, "effect_kind": "dataset2"}))
    cfg = SyntheticConfig.from_json(p)
    assert cfg.n == 20 and cfg.effect_kind == "dataset2"


def test_domain_roundtrip():
    dom = Domain(np.array([[0.0, 1.0], [0.0, 2.0]]), np.array([-1.0, 3.0]))
    back = Domain.from_dict(json.loads(json.dumps(dom.to_dict())))
    assert np.array_equal(back.covariate_bounds, dom.covariate_bounds)
    assert back.contains_x([0.5, 1.5]) and not back.contains_x([0.5, 2.5])
