import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drdml import (
    Dataset,
    InputError,
    ParameterError,
    ParseError,
    SchemaError,
    ShapeError,
    SizeError,
    load_csv,
    make_fold_plan,
    score_test,
)
from conftest import write_csv

SCHEMA = {"y": "y", "a": "a", "covariates": ["l1"]}


class TestLoadCsv:
    def test_three_row_readback(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", ["y", "a", "l1"], [(1.0, 0, 0.5), (2.0, 1, -0.25), (3.0, 0, 0.75)])
        ds = load_csv(path, SCHEMA)
        assert ds.n == 3 and ds.p == 1
        assert np.array_equal(ds.y, [1.0, 2.0, 3.0])
        assert np.array_equal(ds.a, [0.0, 1.0, 0.0])
        assert np.array_equal(ds.l[:, 0], [0.5, -0.25, 0.75])

    def test_column_order_free(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", ["l1", "y", "a"], [(0.5, 1.0, 0), (0.6, 2.0, 1)])
        ds = load_csv(path, SCHEMA)
        assert np.array_equal(ds.y, [1.0, 2.0])

    def test_missing_column_is_schema_error(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", ["y", "l1"], [(1.0, 0.5), (2.0, 0.6)])
        with pytest.raises(SchemaError, match="'a'"):
            load_csv(path, SCHEMA)

    def test_nan_cell_cites_row(self, tmp_path):
        rows = [(float(i), i % 2, 0.1 * i) for i in range(1, 5)]
        rows.append((1.0, "NaN", 0.5))
        rows.append((2.0, 1, 0.6))
        path = write_csv(tmp_path / "d.csv", ["y", "a", "l1"], rows)
        with pytest.raises(ParseError, match="row 5"):
            load_csv(path, SCHEMA)

    def test_non_numeric_cell_cites_row(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", ["y", "a", "l1"], [(1.0, 0, 0.5), (2.0, "oops", 0.6)])
        with pytest.raises(ParseError, match="row 2"):
            load_csv(path, SCHEMA)

    def test_too_few_rows(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", ["y", "a", "l1"], [(1.0, 0, 0.5)])
        with pytest.raises(SizeError):
            load_csv(path, SCHEMA)

    def test_schema_without_covariates(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", ["y", "a", "l1"], [(1.0, 0, 0.5), (2.0, 1, 0.6)])
        with pytest.raises(SchemaError):
            load_csv(path, {"y": "y", "a": "a", "covariates": []})


class TestDatasetValidation:
    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            Dataset(y=np.zeros(3), a=np.zeros(2), l=np.zeros((3, 1)))

    def test_non_finite_rejected(self):
        with pytest.raises(InputError):
            Dataset(y=np.array([1.0, np.inf]), a=np.zeros(2), l=np.zeros((2, 1)))

    def test_arrays_are_immutable(self):
        ds = Dataset(y=np.array([0.0, 1.0]), a=np.array([0.0, 1.0]), l=np.zeros((2, 1)))
        with pytest.raises(ValueError):
            ds.y[0] = 5.0


class TestMakeFoldPlan:
    def test_even_split_with_nested_halves(self):
        plan = make_fold_plan(10, 5, 0.5, seed=7)
        assert [len(f) for f in plan.folds] == [2] * 5
        for outer, inner in plan.inner_split:
            assert len(outer) == 4 and len(inner) == 4

    def test_remainder_goes_to_first_folds(self):
        plan = make_fold_plan(11, 5, 0.5, seed=7)
        assert sorted((len(f) for f in plan.folds), reverse=True) == [3, 2, 2, 2, 2]
        assert [len(f) for f in plan.folds] == [3, 2, 2, 2, 2]

    def test_same_seed_same_plan(self):
        a = make_fold_plan(37, 4, 0.3, seed=123)
        b = make_fold_plan(37, 4, 0.3, seed=123)
        for fa, fb in zip(a.folds, b.folds):
            assert np.array_equal(fa, fb)
        for (oa, ia), (ob, ib) in zip(a.inner_split, b.inner_split):
            assert np.array_equal(oa, ob) and np.array_equal(ia, ib)

    def test_different_seed_different_plan(self):
        a = make_fold_plan(40, 4, 0.5, seed=1)
        b = make_fold_plan(40, 4, 0.5, seed=2)
        assert any(not np.array_equal(fa, fb) for fa, fb in zip(a.folds, b.folds))

    @pytest.mark.parametrize("k", [1, 0, 15])
    def test_bad_fold_count(self, k):
        with pytest.raises(ParameterError):
            make_fold_plan(10, k, 0.5, seed=0)

    def test_bad_inner_fraction(self):
        with pytest.raises(ParameterError):
            make_fold_plan(10, 5, 0.0, seed=0)
        with pytest.raises(ParameterError):
            make_fold_plan(10, 5, 0.05, seed=0)  # leaves no inner rows

    @given(
        n=st.integers(min_value=4, max_value=1000),
        k=st.integers(min_value=2, max_value=8),
        frac=st.floats(min_value=0.2, max_value=0.8),
        seed=st.integers(min_value=0, max_value=2**63 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_partition_properties(self, n, k, frac, seed):
        if k > n or frac * (n - n / k) < 1.0:
            return
        plan = make_fold_plan(n, k, frac, seed=seed)
        everything = np.concatenate(plan.folds)
        assert len(everything) == n
        assert np.array_equal(np.sort(everything), np.arange(n))
        sizes = [len(f) for f in plan.folds]
        assert max(sizes) - min(sizes) <= 1
        for j, (outer, inner) in enumerate(plan.inner_split):
            comp = np.concatenate([outer, inner])
            expected = np.setdiff1d(np.arange(n), plan.folds[j])
            assert np.array_equal(np.sort(comp), expected)
            assert len(outer) >= 1 and len(inner) >= 1


class TestPermutationEquivariance:
    def test_pipeline_statistic_invariant_under_row_shuffle(self, toy_dataset, linear_pair):
        """Relabelling rows and mapping fold assignments through the same
        permutation leaves the cross-fitted statistic unchanged."""
        data = toy_dataset
        plan = make_fold_plan(data.n, 4, 0.5, seed=5)
        perm = np.random.default_rng(3).permutation(data.n)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(data.n)

        shuffled = Dataset(y=data.y[perm], a=data.a[perm], l=data.l[perm])
        mapped = type(plan)(
            k=plan.k,
            folds=tuple(np.sort(inv[f]) for f in plan.folds),
            inner_split=tuple(
                (np.sort(inv[o]), np.sort(inv[i])) for o, i in plan.inner_split
            ),
            seed=plan.seed,
            n=plan.n,
            inner_fraction=plan.inner_fraction,
        )

        base = score_test(data, plan, 0.4, "dml", linear_pair, seed=11)
        moved = score_test(shuffled, mapped, 0.4, "dml", linear_pair, seed=11)
        assert moved.u_bar == pytest.approx(base.u_bar, abs=1e-12)
        assert moved.standardized == pytest.approx(base.standardized, abs=1e-9)
