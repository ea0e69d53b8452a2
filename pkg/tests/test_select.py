import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogseg.cohort import ClinicalRecord
from cogseg.select import (
    Column,
    SelectedCharacteristic,
    SelectionResult,
    build_design_matrix,
    compute_sampling_weights,
    cv_select,
    default_lambda_grid,
    is_carrier,
    lambda_max,
    lasso_coordinate_descent,
    lasso_objective,
    make_selection_result,
)


def _records(n=12, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        records.append(
            ClinicalRecord(
                f"case_{i:05d}",
                {
                    "smoker": bool(i % 2),
                    "age": float(40 + i),
                    "grade": ["g1", "g2", "g3"][i % 3],
                    "constant_flag": True,
                    "noise": float(rng.normal()),
                },
            )
        )
    return records


def _dice_for(records, seed=1):
    rng = np.random.default_rng(seed)
    return {r.case_id: float(rng.uniform(0.2, 0.9)) for r in records}


class TestDesignMatrix:
    def test_column_typing_and_names(self):
        records = _records()
        design = build_design_matrix(records, _dice_for(records))
        names = [c.name for c in design.columns]
        assert "smoker" in names
        assert "age" in names
        assert "grade=g1" in names and "grade=g2" in names and "grade=g3" in names
        assert "constant_flag" not in names  # zero variance dropped
        kinds = {c.name: c.kind for c in design.columns}
        assert kinds["smoker"] == "binary"
        assert kinds["age"] == "continuous"
        assert kinds["grade=g2"] == "binary"

    def test_three_level_categorical_gives_three_columns(self):
        records = _records()
        design = build_design_matrix(records, _dice_for(records))
        grade_cols = [c for c in design.columns if c.source == "grade"]
        assert len(grade_cols) == 3
        assert [c.level for c in grade_cols] == ["g1", "g2", "g3"]

    def test_standardization(self):
        records = _records()
        design = build_design_matrix(records, _dice_for(records))
        np.testing.assert_allclose(design.X.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(design.X.std(axis=0), 1.0, atol=1e-9)

    def test_complete_case_key_dropped(self):
        records = _records()
        records[3].entries["age"] = None
        design = build_design_matrix(records, _dice_for(records))
        assert all(c.source != "age" for c in design.columns)
        assert len(design.case_ids) == len(records)

    def test_rows_sorted_by_case_id(self):
        records = _records()
        shuffled = list(reversed(records))
        design = build_design_matrix(shuffled, _dice_for(records))
        assert design.case_ids == sorted(r.case_id for r in records)

    def test_too_few_cases(self):
        records = _records(n=9)
        with pytest.raises(ValueError):
            build_design_matrix(records, _dice_for(records))

    def test_missing_dice_entry(self):
        records = _records()
        dice = _dice_for(records)
        del dice[records[0].case_id]
        with pytest.raises(ValueError):
            build_design_matrix(records, dice)

    def test_no_usable_columns(self):
        records = [
            ClinicalRecord(f"c{i}", {"flag": True}) for i in range(12)
        ]
        dice = {f"c{i}": 0.5 for i in range(12)}
        with pytest.raises(ValueError):
            build_design_matrix(records, dice)

    def test_original_scale_conversion(self):
        records = _records()
        design = build_design_matrix(records, _dice_for(records))
        rng = np.random.default_rng(3)
        beta_std = rng.normal(size=design.X.shape[1])
        intercept_std = 0.37
        pred_std = intercept_std + design.X @ beta_std
        intercept, beta = design.to_original_scale(intercept_std, beta_std)
        raw = design.X * design.column_stds + design.column_means
        pred_raw = intercept + raw @ beta
        np.testing.assert_allclose(pred_raw, pred_std, atol=1e-10)


class TestCoordinateDescent:
    def test_kkt_zero_solution_at_lambda_max(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(40, 6))
        X = (X - X.mean(0)) / X.std(0)
        y = rng.normal(size=40)
        lam = lambda_max(X, y)
        for factor in (1.0, 1.0001, 2.0):
            intercept, beta = lasso_coordinate_descent(X, y, lam * factor)
            np.testing.assert_allclose(beta, 0.0, atol=1e-12)
            assert intercept == pytest.approx(float(y.mean()))

    def test_matches_ols_at_lambda_zero(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(50, 4))
        y = rng.normal(size=50)
        intercept, beta = lasso_coordinate_descent(X, y, 0.0, tol=1e-12)
        ones = np.column_stack([np.ones(50), X])
        coef, *_ = np.linalg.lstsq(ones, y, rcond=None)
        assert intercept == pytest.approx(coef[0], abs=1e-6)
        np.testing.assert_allclose(beta, coef[1:], atol=1e-6)

    def test_orthonormal_closed_form(self):
        rng = np.random.default_rng(2)
        n, p = 64, 5
        raw = rng.normal(size=(n, p))
        Q, _ = np.linalg.qr(raw - raw.mean(0))
        X = Q * np.sqrt(n)  # columns orthogonal, norm sqrt(n)
        y = rng.normal(size=n)
        ols = X.T @ (y - y.mean()) / n
        for lam in (0.01, 0.05, 0.2):
            _, beta = lasso_coordinate_descent(X, y, lam)
            closed = np.sign(ols) * np.maximum(np.abs(ols) - lam, 0.0)
            np.testing.assert_allclose(beta, closed, atol=1e-6)

    def test_objective_value_definition(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(20, 3))
        y = rng.normal(size=20)
        beta = np.array([0.5, -1.0, 0.0])
        got = lasso_objective(X, y, 0.2, beta, lam=0.1)
        resid = y - 0.2 - X @ beta
        expect = 0.5 * np.mean(resid**2) + 0.1 * np.abs(beta).sum()
        assert got == pytest.approx(expect, rel=1e-12)

    def test_warm_start_agrees_with_cold(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(30, 5))
        y = X[:, 0] * 2 + rng.normal(size=30)
        cold = lasso_coordinate_descent(X, y, 0.05)
        warm = lasso_coordinate_descent(X, y, 0.05, beta0=np.full(5, 0.3))
        assert cold[0] == pytest.approx(warm[0], abs=1e-6)
        np.testing.assert_allclose(cold[1], warm[1], atol=1e-6)

    def test_column_order_invariance(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(40, 6))
        y = X @ np.array([1.0, 0, 0.5, 0, 0, -0.7]) + 0.1 * rng.normal(size=40)
        perm = np.array([3, 0, 5, 1, 4, 2])
        _, beta = lasso_coordinate_descent(X, y, 0.05)
        _, beta_p = lasso_coordinate_descent(X[:, perm], y, 0.05)
        np.testing.assert_allclose(beta_p, beta[perm], atol=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.001, 0.5))
    def test_descent_beats_zero_vector(self, seed, lam):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(25, 4))
        y = rng.normal(size=25)
        intercept, beta = lasso_coordinate_descent(X, y, lam)
        at_zero = lasso_objective(X, y, float(y.mean()), np.zeros(4), lam)
        at_sol = lasso_objective(X, y, intercept, beta, lam)
        assert at_sol <= at_zero + 1e-12


class TestGridAndCv:
    def test_default_grid_endpoints(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(30, 4))
        y = rng.normal(size=30)
        grid = default_lambda_grid(X, y, size=100)
        lam = lambda_max(X, y)
        assert len(grid) == 100
        assert grid[0] == pytest.approx(lam)
        assert grid[-1] == pytest.approx(lam * 1e-3)
        assert np.all(np.diff(grid) < 0)

    def test_degenerate_target_rejected(self):
        X = np.random.default_rng(7).normal(size=(20, 3))
        with pytest.raises(ValueError):
            default_lambda_grid(X, np.zeros(20))

    def test_one_se_rule_holds(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(60, 8))
        y = X[:, 1] - 0.5 * X[:, 4] + 0.3 * rng.normal(size=60)
        path = cv_select(X, y, seed=0)
        i_min = path.index_of(path.lambda_min)
        i_1se = path.index_of(path.lambda_1se)
        assert path.lambda_1se >= path.lambda_min
        ceiling = path.cv_mean[i_min] + path.cv_se[i_min]
        assert path.cv_mean[i_1se] <= ceiling + 1e-12
        # largest qualifying lambda: anything bigger on the grid violates the bound
        if i_1se > 0:
            assert path.cv_mean[i_1se - 1] > ceiling

    def test_path_l1_norm_weakly_increasing(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(50, 6))
        y = X @ np.array([0.8, 0, -0.6, 0, 0.4, 0]) + 0.2 * rng.normal(size=50)
        path = cv_select(X, y, seed=1)
        norms = np.abs(path.coefficients_std).sum(axis=1)
        assert np.all(np.diff(norms) >= -1e-6)

    def test_deterministic_in_seed(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(40, 5))
        y = rng.normal(size=40)
        a = cv_select(X, y, seed=3)
        b = cv_select(X, y, seed=3)
        assert a.lambda_1se == b.lambda_1se
        np.testing.assert_array_equal(a.cv_mean, b.cv_mean)

    def test_pure_noise_selects_nothing_usually(self):
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            X = rng.normal(size=(100, 10))
            y = rng.normal(size=100)
            path = cv_select(X, y, seed=seed)
            idx = path.index_of(path.lambda_1se)
            if not path.coefficients_std[idx].any():
                hits += 1
        assert hits >= 18  # >= 90%

    def test_single_strong_predictor_recovered(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(80, 10))
        y = 2.0 * X[:, 0] + 0.1 * rng.normal(size=80)
        path = cv_select(X, y, seed=2)
        idx = path.index_of(path.lambda_1se)
        beta = path.coefficients_std[idx]
        assert beta[0] > 0
        assert set(np.nonzero(beta)[0]) == {0}

    def test_provided_grid_sorted_internally(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(30, 4))
        y = rng.normal(size=30)
        a = cv_select(X, y, lambda_grid=np.array([0.1, 0.2, 0.3]), seed=0)
        b = cv_select(X, y, lambda_grid=np.array([0.3, 0.2, 0.1]), seed=0)
        np.testing.assert_array_equal(a.lambdas, b.lambdas)
        assert np.all(np.diff(a.lambdas) < 0)
        with pytest.raises(ValueError):
            cv_select(X, y, lambda_grid=np.array([]))


class TestCarriersAndSelection:
    def test_is_carrier_binary_and_level(self):
        b = Column(name="smoker", source="smoker", kind="binary")
        lv = Column(name="grade=g2", source="grade", kind="binary", level="g2")
        rec = ClinicalRecord("c", {"smoker": True, "grade": "g2", "size": 4.0})
        assert is_carrier(b, rec)
        assert is_carrier(lv, rec)
        rec2 = ClinicalRecord("c2", {"smoker": False, "grade": "g1", "size": 1.0})
        assert not is_carrier(b, rec2)
        assert not is_carrier(lv, rec2)

    def test_is_carrier_continuous_needs_threshold(self):
        col = Column(name="size", source="size", kind="continuous")
        rec = ClinicalRecord("c", {"size": 4.0})
        with pytest.raises(ValueError):
            is_carrier(col, rec)
        assert is_carrier(col, rec, threshold=3.0)
        assert not is_carrier(col, rec, threshold=4.0)  # strictly above

    def test_selection_result_roundtrip(self):
        records = _records(n=20)
        dice = {
            r.case_id: 0.8 - 0.3 * float(r.entries["smoker"]) + 0.01 * i
            for i, r in enumerate(records)
        }
        design = build_design_matrix(records, dice)
        path = cv_select(
            design.X,
            design.y,
            seed=0,
            column_names=[c.name for c in design.columns],
            column_means=design.column_means,
            column_stds=design.column_stds,
        )
        result = make_selection_result(design, path, records)
        back = SelectionResult.from_dict(result.to_dict())
        assert back.intercept == pytest.approx(result.intercept)
        assert [c.name for c in back.selected] == [c.name for c in result.selected]
        assert back.frequencies == pytest.approx(result.frequencies)

    def test_ulp_residue_coefficients_are_not_selected(self):
        # two-level one-hot pairs are perfectly anti-correlated after
        # standardization; the losing partner can end up at +-1ulp instead
        # of exactly zero and must not count as support
        from cogseg.select import LassoPath

        records = _records(n=12)
        design = build_design_matrix(records, _dice_for(records))
        p = len(design.columns)
        coefs = np.zeros(p)
        coefs[0] = 2e-16
        coefs[1] = 0.02
        path = LassoPath(
            lambdas=np.array([0.1]),
            intercepts=np.array([0.5]),
            coefficients=coefs[None, :].copy(),
            intercepts_std=np.array([0.5]),
            coefficients_std=coefs[None, :],
            cv_mean=np.array([1.0]),
            cv_se=np.array([0.1]),
            lambda_min=0.1,
            lambda_1se=0.1,
            column_names=[c.name for c in design.columns],
        )
        result = make_selection_result(design, path, records)
        assert [c.name for c in result.selected] == [design.columns[1].name]

    def test_continuous_threshold_is_training_median(self):
        records = _records(n=20)
        rng = np.random.default_rng(13)
        sizes = rng.uniform(1.0, 8.0, size=20)
        for r, s in zip(records, sizes):
            r.entries["size"] = float(s)
        # dice strongly driven by size so it gets selected
        dice = {r.case_id: 0.1 * r.entries["size"] + 0.001 * rng.normal() for r in records}
        design = build_design_matrix(records, dice)
        path = cv_select(
            design.X,
            design.y,
            seed=0,
            column_names=[c.name for c in design.columns],
            column_means=design.column_means,
            column_stds=design.column_stds,
        )
        result = make_selection_result(design, path, records)
        size_sel = [c for c in result.selected if c.source == "size"]
        assert size_sel, "size should be selected"
        assert size_sel[0].threshold == pytest.approx(float(np.median(sizes)))
        assert size_sel[0].sign == "+"


class TestSamplingWeightsFromSelection:
    def test_binary_frequency_half_doubles_lackers(self):
        sel = SelectionResult(
            intercept=0.5,
            selected=[
                SelectedCharacteristic("smoker", "smoker", "binary", 0.4, "+")
            ],
        )
        records = [
            ClinicalRecord(f"c{i}", {"smoker": i % 2 == 0}) for i in range(10)
        ]
        w = compute_sampling_weights(sel, records)
        lacker = w.weights["c1"]
        carrier = w.weights["c0"]
        assert lacker / carrier == pytest.approx(2.0)

    def test_two_binaries_compound_to_eight(self):
        # freq(a)=0.5, freq(b)=0.25, positive coefficients: a case lacking
        # both gets 2 * 4 = 8 times the weight of a carrier of both
        sel = SelectionResult(
            intercept=0.0,
            selected=[
                SelectedCharacteristic("a", "a", "binary", 0.3, "+"),
                SelectedCharacteristic("b", "b", "binary", 0.9, "+"),
            ],
        )
        records = []
        for i in range(8):
            records.append(
                ClinicalRecord(f"c{i}", {"a": i < 4, "b": i < 2})
            )
        w = compute_sampling_weights(sel, records)
        assert w.weights["c7"] / w.weights["c0"] == pytest.approx(8.0)

    def test_negative_coefficient_swaps_roles(self):
        sel = SelectionResult(
            intercept=0.0,
            selected=[
                SelectedCharacteristic("flag", "flag", "binary", -0.5, "-")
            ],
        )
        records = [ClinicalRecord(f"c{i}", {"flag": i % 2 == 0}) for i in range(10)]
        w = compute_sampling_weights(sel, records)
        carrier = w.weights["c0"]
        lacker = w.weights["c1"]
        assert carrier / lacker == pytest.approx(2.0)

    def test_degenerate_frequency_rejected(self):
        sel = SelectionResult(
            intercept=0.0,
            selected=[SelectedCharacteristic("flag", "flag", "binary", 0.5, "+")],
        )
        records = [ClinicalRecord(f"c{i}", {"flag": True}) for i in range(5)]
        with pytest.raises(ValueError):
            compute_sampling_weights(sel, records)

    def test_weights_mean_one(self):
        sel = SelectionResult(
            intercept=0.0,
            selected=[SelectedCharacteristic("flag", "flag", "binary", 0.5, "+")],
        )
        records = [ClinicalRecord(f"c{i}", {"flag": i < 3}) for i in range(10)]
        w = compute_sampling_weights(sel, records)
        assert np.mean(list(w.weights.values())) == pytest.approx(1.0)

    def test_continuous_uses_threshold(self):
        sel = SelectionResult(
            intercept=0.0,
            selected=[
                SelectedCharacteristic("size", "size", "continuous", 0.7, "+", threshold=3.0)
            ],
        )
        records = [
            ClinicalRecord(f"c{i}", {"size": float(i)}) for i in range(8)
        ]
        # carriers: size > 3 -> cases 4..7, freq 0.5; positive coefficient
        # boosts the below-median cases
        w = compute_sampling_weights(sel, records)
        assert w.weights["c0"] / w.weights["c7"] == pytest.approx(2.0)


def test_hard_subgroup_pattern_is_up_weighted():
    # characteristics mirror the difficult-case profile: no kidney disease,
    # never smoked, smaller lesions, partial nephrectomy
    rng = np.random.default_rng(21)
    records, dice = [], {}
    for i in range(40):
        hard = i < 20
        size = float(rng.uniform(1.0, 3.0) if hard else rng.uniform(4.0, 8.0))
        records.append(
            ClinicalRecord(
                f"case_{i:05d}",
                {
                    "comorbidities.chronic_kidney_disease": not hard,
                    "smoking_history": "never_smoked" if hard else "previous_smoker",
                    "radiographic_size": size,
                    "surgical_procedure": "partial_nephrectomy" if hard else "radical_nephrectomy",
                    "age": float(rng.uniform(40, 80)),
                },
            )
        )
        dice[records[-1].case_id] = float(
            np.clip(0.35 + (0.35 if not hard else 0.0) + 0.02 * rng.normal(), 0, 1)
        )
    design = build_design_matrix(records, dice)
    path = cv_select(
        design.X,
        design.y,
        seed=0,
        column_names=[c.name for c in design.columns],
        column_means=design.column_means,
        column_stds=design.column_stds,
    )
    result = make_selection_result(design, path, records)
    assert result.selected, "coupled characteristics should be selected"
    weights = compute_sampling_weights(result, records)
    hard_ids = [r.case_id for r in records[:20]]
    soft_ids = [r.case_id for r in records[20:]]
    hard_mean = np.mean([weights.weights[i] for i in hard_ids])
    soft_mean = np.mean([weights.weights[i] for i in soft_ids])
    assert hard_mean > soft_mean
