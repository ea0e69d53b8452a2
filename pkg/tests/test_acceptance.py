"""Acceptance suite: one test per shipping criterion.

Each test states its tolerance inline and runs against the public API only,
so `pytest tests/test_acceptance.py -v` yields one pass/fail line per
criterion. The two experiment-scale criteria share one smoke run through a
module fixture.
"""
import json
import time

import numpy as np
import pytest
import torch

from cogseg import pipeline
from cogseg.cohort import generate_synthetic_cohort
from cogseg.config import load_config
from cogseg.evalkit import CLASS_NAMES, HIERARCHY, class_mask, dice, surface_dice
from cogseg.select import (
    SelectedCharacteristic,
    SelectionResult,
    compute_sampling_weights,
    cv_select,
    lambda_max,
    lasso_coordinate_descent,
)
from cogseg.stats import compare_arms, paired_t, shapiro_wilk, wilcoxon_signed_rank
from cogseg.train import (
    CaseSampler,
    LossConfig,
    PlateauScheduler,
    SamplingWeights,
    combined_loss,
)
from cogseg.unet3d import NetworkConfig, build

from test_evalkit import brute_dice, brute_surface_dice
from test_stats import _paired_reports


# --------------------------------------------------------------------------
# 1. metric oracle equivalence
# --------------------------------------------------------------------------


def test_criterion_1_metrics_match_brute_force_oracles():
    rng = np.random.default_rng(2024)
    spacings = [(1.0, 1.0, 1.0), (3.0, 1.5625, 1.5625), (2.0, 0.7, 1.3)]
    for trial in range(200):
        shape = tuple(rng.integers(2, 9, size=3))
        a = rng.random(shape) < rng.uniform(0.1, 0.9)
        b = rng.random(shape) < rng.uniform(0.1, 0.9)
        spacing = spacings[trial % len(spacings)]
        tolerance = [0.0, 0.5, 1.0, 2.0][trial % 4]

        assert dice(a, b) == pytest.approx(brute_dice(a, b), abs=1e-9)
        got = surface_dice(a, b, spacing, tolerance)
        want = brute_surface_dice(a, b, spacing, tolerance)
        assert got == pytest.approx(want, abs=1e-9)

    # hierarchical class construction: exact nested label unions
    groupings = dict(HIERARCHY)
    assert list(groupings) == ["kidney_and_masses", "masses", "tumor"]
    assert groupings["kidney_and_masses"] == frozenset({1, 2, 3})
    assert groupings["masses"] == frozenset({2, 3})
    assert groupings["tumor"] == frozenset({2})
    assert groupings["tumor"] < groupings["masses"] < groupings["kidney_and_masses"]
    labels = rng.integers(0, 4, size=(6, 6, 6))
    for name, label_set in groupings.items():
        assert np.array_equal(class_mask(labels, name), np.isin(labels, sorted(label_set)))
    assert (class_mask(labels, "tumor") <= class_mask(labels, "masses")).all()
    assert (class_mask(labels, "masses") <= class_mask(labels, "kidney_and_masses")).all()


# --------------------------------------------------------------------------
# 2. LASSO correctness
# --------------------------------------------------------------------------


def test_criterion_2_lasso_kkt_soft_threshold_and_support_recovery():
    rng = np.random.default_rng(7)

    # all-zero solution at and above lambda_max
    X = rng.normal(size=(60, 10))
    y = rng.normal(size=60)
    lm = lambda_max(X, y)
    for lam in (lm, 1.0001 * lm, 2.0 * lm):
        intercept, beta = lasso_coordinate_descent(X, y, lam)
        assert np.allclose(beta, 0.0, atol=1e-12)
        assert intercept == pytest.approx(y.mean(), abs=1e-12)

    # orthonormal design: coordinate descent equals the soft-threshold closed form
    n, p = 80, 6
    raw = rng.normal(size=(n, p))
    Q, _ = np.linalg.qr(raw - raw.mean(axis=0))
    Xo = Q * np.sqrt(n)  # centered columns, orthonormal under the 1/n inner product
    beta = np.array([1.5, 0.0, -0.9, 0.4, 0.0, 2.0])
    yo = Xo @ beta + rng.normal(scale=0.05, size=n)
    ols = Xo.T @ (yo - yo.mean()) / n
    for lam in (0.05, 0.2, 0.8):
        closed = np.sign(ols) * np.maximum(np.abs(ols) - lam, 0.0)
        _, fit_beta = lasso_coordinate_descent(Xo, yo, lam)
        assert np.allclose(fit_beta, closed, atol=1e-6)

    # support recovery: n=60, p=10, 3 true predictors, sigma=0.1,
    # exact support at lambda_1se in >= 80% of 50 seeds
    n, p = 60, 10
    true_support = [0, 3, 7]
    true_beta = np.zeros(p)
    true_beta[true_support] = [1.0, -0.8, 0.6]
    hits = 0
    for seed in range(50):
        gen = np.random.default_rng(seed)
        raw = gen.normal(size=(n, p))
        Q, _ = np.linalg.qr(raw - raw.mean(axis=0))
        Xs = Q * np.sqrt(n)
        ys = Xs @ true_beta + gen.normal(scale=0.1, size=n)
        lm = lambda_max(Xs, ys)
        grid = np.geomspace(lm, 0.05 * lm, 100)
        path = cv_select(Xs, ys, lambda_grid=grid)
        coefs = path.coefficients_std[path.index_of(path.lambda_1se)]
        hits += set(np.flatnonzero(coefs != 0.0)) == set(true_support)
    assert hits >= 40, f"exact support recovered in only {hits}/50 seeds"


# --------------------------------------------------------------------------
# 3. sampling-rule fidelity
# --------------------------------------------------------------------------


def test_criterion_3_inverse_frequency_weights_and_sampler():
    # one positive-coefficient binary characteristic at frequency 0.5:
    # non-carriers must weigh exactly twice the carriers
    from cogseg.cohort import ClinicalRecord

    records = [
        ClinicalRecord(f"case_{i:05d}", {"never_smoked": i % 2 == 0}) for i in range(8)
    ]
    selected = SelectedCharacteristic(
        name="never_smoked", source="never_smoked", kind="binary", coefficient=0.42, sign="+"
    )
    result = SelectionResult(
        intercept=0.6, selected=[selected], frequencies={"never_smoked": 0.5}
    )
    weights = compute_sampling_weights(result, records)
    values = weights.weights
    carriers = {values[r.case_id] for r in records if r.entries["never_smoked"]}
    lackers = {values[r.case_id] for r in records if not r.entries["never_smoked"]}
    assert len(carriers) == 1 and len(lackers) == 1
    assert lackers.pop() / carriers.pop() == 2.0
    assert np.mean(list(values.values())) == pytest.approx(1.0, abs=1e-12)

    # sampler frequencies track normalized weights within 1% over 1e5 draws
    ids = [f"case_{i:05d}" for i in range(4)]
    w = {ids[0]: 2.0, ids[1]: 1.0, ids[2]: 0.5, ids[3]: 0.5}
    sampler = CaseSampler(ids, SamplingWeights(dict(w)), seed=99)
    draws = np.array(sampler.draw(100_000))
    total = sum(w.values())
    for cid in ids:
        empirical = float(np.mean(draws == cid))
        assert abs(empirical - w[cid] / total) <= 0.01


# --------------------------------------------------------------------------
# 4. network contract
# --------------------------------------------------------------------------


def test_criterion_4_network_shapes_probabilities_and_gradient():
    model = build(NetworkConfig(), seed=0)
    assert model.config.encoder_widths == (24, 48, 96, 192, 384)
    with torch.no_grad():
        scores = model(torch.randn(1, 1, 96, 160, 160))
    assert tuple(scores.shape) == (1, 4, 96, 160, 160)
    probs = torch.softmax(scores, dim=1)
    sums = probs.sum(dim=1)
    assert float((sums - 1.0).abs().max()) <= 1e-5
    del scores, probs, sums

    # loss gradient vs central finite differences on a tiny problem
    torch.manual_seed(0)
    config = LossConfig(ce_class_weights=(0.5, 1.0, 1.5, 2.0))
    scores = torch.randn(2, 4, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    target = torch.randint(0, 4, (2, 3, 4, 4))
    loss = combined_loss(scores, torch.softmax(scores, dim=1), target, config)
    loss.backward()
    grad = scores.grad

    h = 1e-6
    rng = np.random.default_rng(4)
    flat_index = rng.choice(scores.numel(), size=25, replace=False)
    for k in flat_index:
        idx = np.unravel_index(k, scores.shape)
        with torch.no_grad():
            plus = scores.detach().clone()
            plus[idx] += h
            minus = scores.detach().clone()
            minus[idx] -= h
            f_plus = combined_loss(plus, torch.softmax(plus, dim=1), target, config)
            f_minus = combined_loss(minus, torch.softmax(minus, dim=1), target, config)
        fd = float(f_plus - f_minus) / (2 * h)
        analytic = float(grad[idx])
        denom = max(abs(fd), abs(analytic), 1e-8)
        assert abs(fd - analytic) / denom < 1e-3, (idx, fd, analytic)


# --------------------------------------------------------------------------
# 5. scheduler contract
# --------------------------------------------------------------------------


def test_criterion_5_plateau_schedule_reduces_after_ten_stagnant_epochs():
    scheduler = PlateauScheduler(lr0=0.005, factor=0.3, patience=10)
    losses = [1.0] + [1.0] * 10  # epoch 0 sets the best; ten stagnant epochs follow
    lrs = [scheduler.step(loss) for loss in losses]
    assert all(lr == pytest.approx(0.005) for lr in lrs[:10])
    assert lrs[10] == pytest.approx(0.0015)


# --------------------------------------------------------------------------
# 6. statistics
# --------------------------------------------------------------------------


def test_criterion_6_wilcoxon_shapiro_and_test_selection_gate():
    # exact Wilcoxon, n=5 all positive: p = 2 / 2^5
    _, p_auto = wilcoxon_signed_rank([0.1, 0.2, 0.3, 0.4, 0.5])
    _, p_exact = wilcoxon_signed_rank([0.1, 0.2, 0.3, 0.4, 0.5], mode="exact")
    assert p_auto == pytest.approx(0.0625, abs=1e-12)
    assert p_exact == p_auto

    # fixed reference sample
    sample = [148, 154, 158, 160, 161, 162, 166, 170, 182, 195, 236]
    W, p = shapiro_wilk(sample)
    assert W == pytest.approx(0.79, abs=0.01)
    from scipy import stats as sps

    ref = sps.shapiro(sample)
    assert W == pytest.approx(float(ref.statistic), abs=1e-6)

    # gate on seeded inputs: near-normal differences go to the paired t test,
    # a heavy outlier pushes the same pipeline to Wilcoxon
    base, cog = _paired_reports(lambda r: float(r.normal(0.05, 0.01)), n=20, seed=3)
    for comp in compare_arms(base, cog, alpha=0.05):
        assert comp.normality_p > 0.05
        assert comp.test_used == "paired_t"
        diffs = np.array(comp.cognizant_values) - np.array(comp.baseline_values)
        assert comp.p_value == pytest.approx(paired_t(diffs)[1], abs=1e-12)

    base, cog = _paired_reports(lambda r: float(r.normal(0.02, 0.005)), n=20, seed=4)
    for row in cog.rows:
        if row.case_id == "case_00000":
            row.dice += 3.0
            row.surface_dice += 3.0
    for comp in compare_arms(base, cog, alpha=0.05):
        assert comp.normality_p <= 0.05
        assert comp.test_used == "wilcoxon"
        diffs = np.array(comp.cognizant_values) - np.array(comp.baseline_values)
        assert comp.p_value == pytest.approx(wilcoxon_signed_rank(diffs)[1], abs=1e-12)


# --------------------------------------------------------------------------
# 7 + 8. end-to-end smoke experiment and its determinism
# --------------------------------------------------------------------------


def smoke_config_data(workdir):
    return {
        "paths": {"workdir": str(workdir)},
        "phantom": {"n_cases": 46, "hard_fraction": 0.5, "seed": 70},
        "split": {"fractions": [0.6522, 0.2174, 0.1304], "seed": 1},
        "preprocess": {"patch_size": [32, 64, 64], "augment": {"enabled": False}},
        "network": {"base_channels": 4, "seed": 2},
        "train": {"epochs": 5, "samples_per_epoch": 160, "batch_size": 2, "seed": 3},
    }


def _hard_ids(config):
    ph = config.phantom
    cohort = generate_synthetic_cohort(
        ph.n_cases,
        ph.volume_shape,
        ph.n_annotation_groups,
        ph.hard_fraction,
        ph.seed,
        spacing=ph.spacing,
    )
    return set(cohort.hard_case_ids)


def _sampled_ids_per_epoch(log_path):
    with open(log_path) as fh:
        return [json.loads(line)["sampled_case_ids"] for line in fh]


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    torch.set_num_threads(1)
    workdir = tmp_path_factory.mktemp("smoke") / "run"
    config = load_config(data=smoke_config_data(workdir))
    t0 = time.time()
    results = pipeline.run_all(config)
    elapsed = time.time() - t0
    return config, workdir, results, elapsed


def test_criterion_7_smoke_experiment(smoke_run):
    config, workdir, results, elapsed = smoke_run
    assert elapsed < 1800, f"smoke run took {elapsed:.0f}s"

    split = json.loads((workdir / "split.json").read_text())
    assert (len(split["train"]), len(split["val"]), len(split["test"])) == (30, 10, 6)

    # the cognizant arm must over-represent the generator's hard subgroup by
    # the weight-implied ratio, within 5% relative
    hard = _hard_ids(config)
    weights = json.loads((workdir / "selection" / "weights.json").read_text())
    train_ids = split["train"]
    w = np.array([weights[cid] for cid in train_ids])
    hard_mask = np.array([cid in hard for cid in train_ids])
    expected_freq = w[hard_mask].sum() / w.sum()
    assert expected_freq > hard_mask.mean(), "selection did not up-weight the hard subgroup"

    epochs = _sampled_ids_per_epoch(workdir / "arms" / "cognizant" / "train_log.jsonl")
    draws = [cid for epoch in epochs for cid in epoch]
    assert len(epochs) == config.train.epochs
    assert len(draws) == config.train.epochs * config.train.samples_per_epoch
    observed_freq = np.mean([cid in hard for cid in draws])
    assert abs(observed_freq - expected_freq) / expected_freq <= 0.05

    # six-row comparison report
    comparison = json.loads((workdir / "comparison.json").read_text())
    assert len(comparison) == 6
    expected_rows = {f"{c}.{m}" for c in CLASS_NAMES for m in ("dice", "surface_dice")}
    assert set(comparison) == expected_rows
    for row in comparison.values():
        assert 0.0 <= row["p_value"] <= 1.0
        assert row["test_used"] in ("paired_t", "wilcoxon", "none")

    # directional movement is reported, not asserted
    tumor = comparison["tumor.dice"]
    print(
        f"\n[smoke] tumor dice baseline {tumor['baseline']['mean']:.4f} "
        f"-> cognizant {tumor['cognizant']['mean']:.4f} "
        f"({tumor['test_used']}, p={tumor['p_value']:.4f}); run took {elapsed:.0f}s"
    )


def test_criterion_8_smoke_run_is_deterministic(smoke_run, tmp_path_factory):
    config_a, workdir_a, _, _ = smoke_run
    workdir_b = tmp_path_factory.mktemp("smoke_repeat") / "run"
    config_b = load_config(data=smoke_config_data(workdir_b))

    # replay with identical seeds through both trainings
    pipeline.stage_synth(config_b)
    pipeline.stage_split(config_b)
    pipeline.stage_preprocess(config_b)
    pipeline.stage_train(config_b, sampling="uniform")
    pipeline.stage_predict(config_b, "baseline", "val")
    pipeline.stage_evaluate(config_b, "baseline", "val")
    pipeline.stage_select_features(config_b)
    pipeline.stage_retrain(config_b)

    weights_a = (workdir_a / "selection" / "weights.json").read_text()
    weights_b = (workdir_b / "selection" / "weights.json").read_text()
    assert weights_a == weights_b

    for arm in ("baseline", "cognizant"):
        ids_a = _sampled_ids_per_epoch(workdir_a / "arms" / arm / "train_log.jsonl")
        ids_b = _sampled_ids_per_epoch(workdir_b / "arms" / arm / "train_log.jsonl")
        assert ids_a == ids_b, f"{arm} arm sampled different cases"
