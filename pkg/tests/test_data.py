import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from btsgp.data import (
    DATA_ROOT_ENV,
    SYNTHETIC,
    DataError,
    Dataset,
    fold_view,
    load_csv,
    load_registry,
    make_folds,
    normalize_features,
    resolve_dataset,
    synthetic_dataset,
    validate_dataset,
    write_csv,
)
from btsgp.exprtree import evaluate


def _write(path, text):
    path.write_text(text)
    return path


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        ds = load_csv(_write(tmp_path / "a.csv", "1,2,3\n4,5,6\n7,8,9\n"))
        assert ds.features.shape == (3, 2)
        assert ds.targets.tolist() == [3, 6, 9]
        assert ds.name == "a"

    def test_header_and_named_target(self, tmp_path):
        ds = load_csv(_write(tmp_path / "b.csv", "u,y,v\n1,2,3\n4,5,6\n"), target_column="y")
        assert ds.features.tolist() == [[1, 3], [4, 6]]
        assert ds.targets.tolist() == [2, 5]

    def test_target_by_index(self, tmp_path):
        ds = load_csv(_write(tmp_path / "c.csv", "1,2,3\n4,5,6\n"), target_column=0)
        assert ds.targets.tolist() == [1, 4]

    @pytest.mark.parametrize("cell,msg", [("NaN", "row 3, column 2"), ("inf", "row 3, column 2"),
                                          ("abc", "row 3, column 2")])
    def test_bad_cell_located(self, tmp_path, cell, msg):
        p = _write(tmp_path / "d.csv", f"a,b,c\n1,2,3\n4,{cell},6\n")
        with pytest.raises(DataError, match=msg):
            load_csv(p)

    def test_ragged_row(self, tmp_path):
        with pytest.raises(DataError, match="row 2"):
            load_csv(_write(tmp_path / "e.csv", "1,2,3\n4,5\n"))

    @pytest.mark.parametrize("text", ["", "\n\n", "x,y\n"])
    def test_empty(self, tmp_path, text):
        with pytest.raises(DataError):
            load_csv(_write(tmp_path / "f.csv", text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "nope.csv")

    def test_named_target_needs_header(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(_write(tmp_path / "g.csv", "1,2\n"), target_column="y")

    def test_airfoil_shaped(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.normal(size=(1503, 5)), rng.normal(size=1503), "airfoil")
        write_csv(ds, tmp_path / "airfoil.csv")
        back = load_csv(tmp_path / "airfoil.csv")
        assert (back.n_cases, back.n_features) == (1503, 5)
        entry = load_registry()["airfoil"]
        assert validate_dataset(back, entry) == []

    @given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(2, 5)),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_round_trip(self, tmp_path_factory, data):
        ds = Dataset(data[:, :-1], data[:, -1], "rt")
        path = tmp_path_factory.mktemp("rt") / "rt.csv"
        write_csv(ds, path)
        back = load_csv(path)
        assert np.array_equal(back.features, ds.features) and np.array_equal(back.targets, ds.targets)
        write_csv(ds, path, header=False)
        assert np.array_equal(load_csv(path, header=False).features, ds.features)


class TestDataset:
    def test_rejects_mismatch_and_nonfinite(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((3, 2)), np.zeros(2))
        with pytest.raises(DataError):
            Dataset(np.array([[np.nan]]), np.zeros(1))


class TestNormalize:
    def test_hand_example(self):
        tr = Dataset(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]), np.array([7.0, 8.0, 9.0]))
        (z, others) = normalize_features(tr)
        assert np.allclose(z.features[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)
        assert z.features[:, 1].tolist() == [0, 0, 0]
        assert z.targets is tr.targets or np.array_equal(z.targets, tr.targets)
        assert others == []

    def test_uses_training_statistics(self):
        tr = Dataset(np.array([[0.0], [2.0]]), np.zeros(2))
        te = Dataset(np.array([[4.0]]), np.array([1.5]))
        _, (zt,) = normalize_features(tr, [te])
        assert zt.features.tolist() == [[3.0]]
        assert zt.targets.tolist() == [1.5]

    def test_feature_count_mismatch(self):
        with pytest.raises(DataError):
            normalize_features(Dataset(np.zeros((2, 2)), np.zeros(2)), [Dataset(np.zeros((2, 3)), np.zeros(2))])

    @given(st.integers(0, 2**32 - 1), st.integers(2, 300), st.integers(1, 6))
    def test_statistics(self, seed, n, d):
        rng = np.random.default_rng(seed)
        X = rng.normal(loc=rng.uniform(-1e3, 1e3, d), scale=rng.uniform(1e-2, 1e3, d), size=(n, d))
        X[:, 0] = 3.0
        y = rng.normal(size=n)
        z, _ = normalize_features(Dataset(X, y))
        assert np.all(z.features[:, 0] == 0)
        for j in range(1, d):
            col = z.features[:, j]
            if np.ptp(X[:, j]) > 0:
                assert abs(col.mean()) < 1e-9
                assert abs(col.var() - 1.0) < 1e-9
        assert np.array_equal(z.targets, y)


class TestFolds:
    def test_even_split(self):
        sizes = np.bincount(make_folds(10, 5, 0).fold_assignments)
        assert sizes.tolist() == [2] * 5

    def test_uneven_split(self):
        sizes = sorted(np.bincount(make_folds(11, 5, 3).fold_assignments).tolist())
        assert sizes == [2, 2, 2, 2, 3]

    def test_rejects_too_many_folds(self):
        with pytest.raises(DataError):
            make_folds(3, 5, 0)

    def test_random_partitions(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, seed = int(rng.integers(5, 400)), int(rng.integers(2**63))
            split = make_folds(n, 5, seed)
            sizes = np.bincount(split.fold_assignments, minlength=5)
            assert sizes.max() - sizes.min() <= 1 and split.n_folds == 5
            ds = Dataset(np.arange(n, dtype=float)[:, None], np.arange(n, dtype=float))
            seen = []
            for f in range(5):
                tr, te = fold_view(ds, split, f)
                a, b = set(tr.targets.tolist()), set(te.targets.tolist())
                assert not a & b and len(a | b) == n
                seen += te.targets.tolist()
            assert sorted(seen) == list(range(n))

    def test_deterministic(self):
        assert np.array_equal(make_folds(50, 5, 9).fold_assignments, make_folds(50, 5, 9).fold_assignments)


class TestSynthetic:
    def test_poly2(self):
        ds = synthetic_dataset("poly2", 100, seed=1)
        x = ds.features
        assert ds.features.shape == (100, 2)
        assert np.allclose(ds.targets, x[:, 0] ** 2 + x[:, 1])
        assert np.all(np.abs(x) <= 1)

    def test_deterministic(self):
        a, b = synthetic_dataset("trig", 30, 5), synthetic_dataset("trig", 30, 5)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.targets, b.targets)

    @pytest.mark.parametrize("name", sorted(SYNTHETIC))
    def test_true_tree_is_exact(self, name):
        ds = synthetic_dataset(name, 200, seed=2)
        tree = SYNTHETIC[name].tree
        assert tree.depth <= 7
        assert evaluate(tree, ds.features, ds.targets).mae == 0.0

    def test_unknown(self):
        with pytest.raises(DataError):
            synthetic_dataset("nope", 10)


class TestRegistry:
    def test_shipped_registry_matches_table(self):
        reg = load_registry()
        want = {"airfoil": (1503, 5), "concrete": (1030, 8), "energyCooling": (768, 8),
                "energyHeating": (768, 8), "towerData": (4999, 25), "wineRed": (1599, 11),
                "wineWhite": (4898, 11), "yacht": (768, 6)}
        assert {k: (v["expected_rows"], v["expected_features"]) for k, v in reg.items()} == want

    def test_registry_rejects_incomplete(self, tmp_path):
        p = _write(tmp_path / "r.json", json.dumps({"x": {"path": "x.csv"}}))
        with pytest.raises(DataError):
            load_registry(p)

    def test_resolve(self, tmp_path, monkeypatch):
        reg = {"toy": {"path": "toy.csv", "target_column": -1, "expected_rows": 2, "expected_features": 1}}
        with pytest.raises(DataError, match=DATA_ROOT_ENV):
            resolve_dataset("toy", reg, data_root=tmp_path)
        _write(tmp_path / "toy.csv", "1,2\n3,4\n")
        monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
        assert resolve_dataset("toy", reg).targets.tolist() == [2, 4]
        reg["toy"]["expected_rows"] = 3
        with pytest.raises(DataError, match="expected 3"):
            resolve_dataset("toy", reg)
        assert resolve_dataset(str(tmp_path / "toy.csv")).n_cases == 2
        assert resolve_dataset("poly2", synthetic_cases=40).n_cases == 40
        with pytest.raises(DataError):
            resolve_dataset("nowhere")
        with pytest.raises(DataError):
            resolve_dataset(str(tmp_path / "missing.csv"))
