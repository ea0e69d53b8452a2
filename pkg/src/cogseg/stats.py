"""Paired comparison of the two arms: normality gate, test choice, reporting.

Per metric, differences over the shared test cases are checked with
Shapiro-Wilk; normal-looking differences get a paired t-test, anything
else the Wilcoxon signed-rank test, both two-sided.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .evalkit import CLASS_NAMES, EvalReport


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Shapiro-Wilk (Royston's AS R94 approximation)
# ---------------------------------------------------------------------------

_C1 = (0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.042981, -0.293762, -1.752461, 5.682633, -3.582633)


def _poly(coeffs, x):
    return sum(c * x**i for i, c in enumerate(coeffs))


def shapiro_wilk(sample) -> tuple[float, float]:
    """W statistic and p-value for the null of normality, 3 <= n <= 5000.

    Weights use Blom scores with Royston's polynomial corrections for the
    extreme order statistics; p comes from his normalizing transforms of W
    (exact arcsine form at n = 3).
    """
    x = np.sort(np.asarray(sample, dtype=float))
    n = len(x)
    if n < 3 or n > 5000:
        raise ValueError(f"sample size {n} outside [3, 5000]")
    if x[0] == x[-1]:
        raise ValueError("sample is constant; W is undefined")

    m = special.ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    mm = float(m @ m)
    c = m / math.sqrt(mm)
    u = 1.0 / math.sqrt(n)

    a = np.empty(n)
    if n == 3:
        a[0], a[1], a[2] = -math.sqrt(0.5), 0.0, math.sqrt(0.5)
    elif n <= 5:
        a_n = c[-1] + _poly((0.0,) + _C1, u)
        phi = (mm - 2.0 * m[-1] ** 2) / (1.0 - 2.0 * a_n**2)
        a[1:-1] = m[1:-1] / math.sqrt(phi)
        a[-1], a[0] = a_n, -a_n
    else:
        a_n = c[-1] + _poly((0.0,) + _C1, u)
        a_n1 = c[-2] + _poly((0.0,) + _C2, u)
        phi = (mm - 2.0 * m[-1] ** 2 - 2.0 * m[-2] ** 2) / (1.0 - 2.0 * a_n**2 - 2.0 * a_n1**2)
        a[2:-2] = m[2:-2] / math.sqrt(phi)
        a[-1], a[0] = a_n, -a_n
        a[-2], a[1] = a_n1, -a_n1

    w_num = float(a @ x) ** 2
    w_den = float(((x - x.mean()) ** 2).sum())
    w = min(w_num / w_den, 1.0)

    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(max(p, 0.0), 1.0))
    if w >= 1.0:
        return w, 1.0
    if n <= 11:
        gamma = -2.273 + 0.459 * n
        y = -math.log(gamma - math.log1p(-w))
        mu = _poly((0.5440, -0.39978, 0.025054, -6.714e-4), n)
        sigma = math.exp(_poly((1.3822, -0.77857, 0.062767, -2.0322e-3), n))
    else:
        y = math.log1p(-w)
        ln_n = math.log(n)
        mu = _poly((-1.5861, -0.31082, -0.083751, 3.8915e-3), ln_n)
        sigma = math.exp(_poly((-0.4803, -0.082676, 3.0302e-3), ln_n))
    return w, float(_norm_sf((y - mu) / sigma))


# ---------------------------------------------------------------------------
# Paired tests
# ---------------------------------------------------------------------------


def paired_t(diffs) -> tuple[float, float]:
    """Two-sided one-sample t-test of the differences against zero mean."""
    d = np.asarray(diffs, dtype=float)
    n = len(d)
    if n < 2:
        raise ValueError("need at least 2 differences")
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise ValueError("differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = 2.0 * float(special.stdtr(n - 1, -abs(t)))
    return t, p


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _wilcoxon_exact_p(doubled_ranks: np.ndarray, w_plus_doubled: int) -> float:
    """Enumerate all sign patterns via a subset-sum count over doubled ranks.

    Doubling makes midranks integral. The null distribution is symmetric
    about half the total, so the two-sided p sums the probability of
    deviations at least as extreme as observed.
    """
    total = int(doubled_ranks.sum())
    ways = np.zeros(total + 1)
    ways[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        ways[r:] = ways[r:] + ways[: total + 1 - r]
    center = total / 2.0
    extreme = abs(w_plus_doubled - center)
    sums = np.arange(total + 1)
    mass = ways[np.abs(sums - center) >= extreme - 1e-9].sum()
    return float(min(mass / 2.0 ** len(doubled_ranks), 1.0))


def wilcoxon_signed_rank(diffs, mode: str = "auto") -> tuple[float, float]:
    """Signed-rank W+ and two-sided p; zeros dropped, ties get midranks.

    `mode`: exact enumeration, normal approximation (with tie and
    continuity corrections), or auto (exact up to n = 25).
    """
    if mode not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown mode {mode!r}")
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if mode == "exact" or (mode == "auto" and n <= 25):
        doubled = np.rint(2.0 * ranks).astype(int)
        return w_plus, _wilcoxon_exact_p(doubled, int(round(2.0 * w_plus)))

    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float((tie_counts**3 - tie_counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        return w_plus, 1.0
    dev = w_plus - mu
    if dev == 0.0:
        return w_plus, 1.0
    z = (dev - 0.5 * math.copysign(1.0, dev)) / math.sqrt(var)
    return w_plus, min(2.0 * _norm_sf(abs(z)), 1.0)


# ---------------------------------------------------------------------------
# Arm comparison
# ---------------------------------------------------------------------------

METRIC_NAMES = tuple(f"{c}.{m}" for c in CLASS_NAMES for m in ("dice", "surface_dice"))


@dataclass
class PairedComparison:
    metric: str
    case_ids: list[str]
    baseline_values: list[float]
    cognizant_values: list[float]
    normality_p: float | None
    test_used: str
    statistic: float
    p_value: float
    significant: bool

    @property
    def differences(self) -> list[float]:
        return [c - b for b, c in zip(self.baseline_values, self.cognizant_values)]


def _arm_summary(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {
        "mean": float(v.mean()),
        "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
        "median": float(np.median(v)),
        "p25": float(np.percentile(v, 25)),
        "p75": float(np.percentile(v, 75)),
    }


def compare_arms(
    baseline: EvalReport, cognizant: EvalReport, alpha: float = 0.05
) -> list[PairedComparison]:
    """Run the six paired metric comparisons between the two arms.

    Differences are cognizant minus baseline. All-zero differences are
    reported as "no difference" with p = 1 rather than an error, and
    constant nonzero differences (untestable for normality) fall through
    to the Wilcoxon branch.
    """
    base_ids = set(baseline.case_ids())
    cog_ids = set(cognizant.case_ids())
    if base_ids != cog_ids:
        raise ValueError(
            f"case sets differ: only-baseline={sorted(base_ids - cog_ids)}, "
            f"only-cognizant={sorted(cog_ids - base_ids)}"
        )
    case_ids = sorted(base_ids)
    if len(case_ids) < 3:
        raise ValueError(f"need at least 3 paired cases, got {len(case_ids)}")

    comparisons = []
    for class_name in CLASS_NAMES:
        for metric in ("dice", "surface_dice"):
            name = f"{class_name}.{metric}"
            b = [baseline.metric(cid, class_name, metric) for cid in case_ids]
            c = [cognizant.metric(cid, class_name, metric) for cid in case_ids]
            diffs = np.array(c) - np.array(b)

            if not diffs.any():
                comparisons.append(
                    PairedComparison(
                        metric=name,
                        case_ids=case_ids,
                        baseline_values=b,
                        cognizant_values=c,
                        normality_p=None,
                        test_used="none",
                        statistic=0.0,
                        p_value=1.0,
                        significant=False,
                    )
                )
                continue

            if diffs.min() == diffs.max():
                normality_p = None  # constant differences, normality untestable
            else:
                _, normality_p = shapiro_wilk(diffs)

            if normality_p is not None and normality_p > alpha:
                statistic, p = paired_t(diffs)
                test_used = "paired_t"
            else:
                statistic, p = wilcoxon_signed_rank(diffs)
                test_used = "wilcoxon"
            comparisons.append(
                PairedComparison(
                    metric=name,
                    case_ids=case_ids,
                    baseline_values=b,
                    cognizant_values=c,
                    normality_p=normality_p,
                    test_used=test_used,
                    statistic=float(statistic),
                    p_value=float(p),
                    significant=bool(p < alpha),
                )
            )
    return comparisons


def comparison_to_dict(comparisons: list[PairedComparison]) -> dict:
    out = {}
    for comp in comparisons:
        out[comp.metric] = {
            "n": len(comp.case_ids),
            "baseline": _arm_summary(comp.baseline_values),
            "cognizant": _arm_summary(comp.cognizant_values),
            "normality_p": comp.normality_p,
            "test_used": comp.test_used,
            "statistic": comp.statistic,
            "p_value": comp.p_value,
            "significant": comp.significant,
        }
    return out


def write_comparison_json(comparisons: list[PairedComparison], path: str | Path) -> None:
    Path(path).write_text(json.dumps(comparison_to_dict(comparisons), indent=2))


def read_comparison_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
