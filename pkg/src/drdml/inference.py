"""Point estimation and confidence sets by inverting the score test.

The standardized statistic is evaluated on a theta grid with common random
seeds (one fold plan, one set of learner seeds), making it a deterministic
function of theta. The point estimate is the statistic's zero, refined by
bisection; the interval bounds are the outermost crossings of the normal
quantiles. Non-monotone statistics are reported as the interval hull of
the non-rejection region with a multiplicity flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from ._rand import child_seed
from .dataset import Dataset, FoldPlan
from .errors import InversionError, NonInvertibleError, ParameterError
from .kernel import KernelSpec
from .learners import predict
from .score import NuisancePair, _fit_with_context, score_test

__all__ = [
    "SearchConfig",
    "ConfidenceSet",
    "dml_point_estimate",
    "naive_estimate",
    "invert_test",
]

_DENOM_FLOOR = 1e-10


@dataclass(frozen=True)
class SearchConfig:
    """Grid-search settings for test inversion. Unset center/half_width are
    derived from the closed-form estimator and its sandwich standard error."""

    center: float | None = None
    half_width: float | None = None
    grid_size: int = 81
    tol: float = 1e-4

    def __post_init__(self):
        if self.grid_size < 3:
            raise ParameterError(f"grid_size must be >= 3, got {self.grid_size}")
        if self.tol <= 0:
            raise ParameterError(f"tol must be positive, got {self.tol}")


@dataclass(frozen=True)
class ConfidenceSet:
    point: float
    lower: float
    upper: float
    level: float
    grid: tuple[tuple[float, float], ...]
    bracketing_ok: bool
    multiple_crossings: bool = False


def _ratio(numer_terms: np.ndarray, a: np.ndarray, ghat: np.ndarray) -> float:
    n = a.shape[0]
    denom = float(np.sum((a - ghat) * a))
    if abs(denom) < _DENOM_FLOOR * n:
        raise NonInvertibleError(
            f"exposure residual sum {denom} too close to zero (n={n})"
        )
    return float(np.sum(numer_terms)) / denom


def dml_point_estimate(data: Dataset, ghat, mhat) -> float:
    """Closed-form orthogonalised estimator:
    sum (a - ghat)(y - mhat) / sum (a - ghat) a."""
    ghat = np.asarray(ghat, dtype=float).ravel()
    mhat = np.asarray(mhat, dtype=float).ravel()
    return _ratio((data.a - ghat) * (data.y - mhat), data.a, ghat)


def naive_estimate(data: Dataset, ghat) -> float:
    """Plug-in estimator without outcome regression:
    sum (a - ghat) y / sum (a - ghat) a."""
    ghat = np.asarray(ghat, dtype=float).ravel()
    return _ratio((data.a - ghat) * data.y, data.a, ghat)


def _crossfit_center(data, plan, learner_cfg, seed, nested_split):
    """Cross-fitted closed-form estimate and sandwich SE used to seed the grid."""
    ghat = np.empty(data.n)
    mhat_y = np.empty(data.n)
    for k in range(plan.k):
        idx = plan.folds[k]
        outer = plan.inner_split[k][0] if nested_split else plan.complement(k)
        g_fit = _fit_with_context(
            learner_cfg.g, data.l[outer], data.a[outer], child_seed(seed, 21, k), k
        )
        m_fit = _fit_with_context(
            learner_cfg.m, data.l[outer], data.y[outer], child_seed(seed, 22, k), k
        )
        ghat[idx] = predict(g_fit, data.l[idx])
        mhat_y[idx] = predict(m_fit, data.l[idx])
    theta = dml_point_estimate(data, ghat, mhat_y)
    resid_a = data.a - ghat
    eps = data.y - mhat_y - theta * resid_a
    denom = abs(float(np.sum(resid_a * data.a)))
    se = math.sqrt(float(np.sum(resid_a**2 * eps**2))) / denom
    return theta, se


def _bisect(stat_fn, lo, hi, f_lo, f_hi, tol, max_iter=200):
    """Root of a sign change of stat_fn between lo and hi; returns (theta, value)."""
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        mid = 0.5 * (lo + hi)
        f_mid = stat_fn(mid)
        if f_mid == 0.0:
            return mid, f_mid
        if (f_lo < 0) != (f_mid < 0):
            hi, f_hi = mid, f_mid
        else:
            lo, f_lo = mid, f_mid
    mid = 0.5 * (lo + hi)
    return mid, stat_fn(mid)


def _invert_statistic(stat_fn, center, half_width, grid_size, tol, level):
    """Grid + bisection inversion of a scalar statistic in theta.

    Returns a dict consumed by invert_test; separated out so synthetic
    statistic shapes (non-monotone, partly non-finite) can be unit tested.
    """
    z = float(norm.ppf(1.0 - (1.0 - level) / 2.0))
    grid = np.linspace(center - half_width, center + half_width, grid_size)
    values = np.array([stat_fn(theta) for theta in grid], dtype=float)
    finite = np.isfinite(values)
    if finite.sum() <= 0.5 * grid_size:
        raise InversionError(
            f"statistic non-finite at {grid_size - int(finite.sum())} of {grid_size} grid points"
        )

    # point estimate: sign change nearest the center, refined by bisection
    sign_changes = []
    for i in range(grid_size - 1):
        if not (finite[i] and finite[i + 1]):
            continue
        if values[i] == 0.0:
            sign_changes.append((grid[i], grid[i], values[i], values[i]))
        elif (values[i] < 0) != (values[i + 1] < 0):
            sign_changes.append((grid[i], grid[i + 1], values[i], values[i + 1]))
    root_found = bool(sign_changes)
    if root_found:
        lo, hi, f_lo, f_hi = min(
            sign_changes, key=lambda br: abs(0.5 * (br[0] + br[1]) - center)
        )
        point, point_value = (lo, f_lo) if lo == hi else _bisect(stat_fn, lo, hi, f_lo, f_hi, tol)
    else:
        best = int(np.argmin(np.where(finite, np.abs(values), np.inf)))
        point, point_value = float(grid[best]), float(values[best])

    # keep whichever candidate has the smallest |statistic|
    best_grid = int(np.argmin(np.where(finite, np.abs(values), np.inf)))
    if abs(values[best_grid]) < abs(point_value):
        point, point_value = float(grid[best_grid]), float(values[best_grid])

    accepted = finite & (np.abs(values) <= z)
    n_sign_changes = sum(
        1
        for i in range(grid_size - 1)
        if finite[i] and finite[i + 1] and (values[i] < 0) != (values[i + 1] < 0)
    )
    multiple = n_sign_changes > 1

    if not accepted.any():
        return {
            "point": point,
            "lower": float(grid[0]),
            "upper": float(grid[-1]),
            "bracketing_ok": False,
            "multiple_crossings": multiple,
            "grid": tuple(zip(grid.tolist(), values.tolist())),
            "z": z,
        }

    acc_idx = np.nonzero(accepted)[0]
    j_lo, j_hi = int(acc_idx[0]), int(acc_idx[-1])
    if not np.all(accepted[j_lo : j_hi + 1]):
        multiple = True

    bracketing_ok = root_found
    if j_lo > 0 and finite[j_lo - 1]:
        side = 1.0 if values[j_lo - 1] > 0 else -1.0
        lower, _ = _bisect(
            lambda th: stat_fn(th) - side * z,
            grid[j_lo - 1],
            grid[j_lo],
            values[j_lo - 1] - side * z,
            values[j_lo] - side * z,
            tol,
        )
    else:
        lower = float(grid[0])
        bracketing_ok = False
    if j_hi < grid_size - 1 and finite[j_hi + 1]:
        side = 1.0 if values[j_hi + 1] > 0 else -1.0
        upper, _ = _bisect(
            lambda th: stat_fn(th) - side * z,
            grid[j_hi],
            grid[j_hi + 1],
            values[j_hi] - side * z,
            values[j_hi + 1] - side * z,
            tol,
        )
    else:
        upper = float(grid[-1])
        bracketing_ok = False

    return {
        "point": float(point),
        "lower": float(lower),
        "upper": float(upper),
        "bracketing_ok": bracketing_ok,
        "multiple_crossings": multiple,
        "grid": tuple(zip(grid.tolist(), values.tolist())),
        "z": z,
    }


def invert_test(
    data: Dataset,
    plan: FoldPlan,
    kind: str,
    level: float = 0.95,
    search_cfg: SearchConfig | None = None,
    learner_cfg: NuisancePair | None = None,
    kernel_cfg: KernelSpec | None = None,
    seed: int = 0,
    *,
    m_strategy: str = "profile",
    nested_split: bool = True,
) -> ConfidenceSet:
    """Point estimate and (1-alpha) confidence set by grid search plus
    bisection over theta0, with common random seeds across the grid."""
    if not (0.0 < level < 1.0):
        raise ParameterError(f"level must be in (0, 1), got {level}")
    if learner_cfg is None:
        raise ParameterError("learner_cfg is required")
    search_cfg = search_cfg or SearchConfig()

    center, half_width = search_cfg.center, search_cfg.half_width
    if center is None or half_width is None:
        theta_star, se = _crossfit_center(data, plan, learner_cfg, seed, nested_split)
        if center is None:
            center = theta_star
        if half_width is None:
            half_width = 10.0 * se

    fit_cache: dict = {}
    memo: dict[float, float] = {}

    def stat_fn(theta: float) -> float:
        theta = float(theta)
        if theta not in memo:
            memo[theta] = score_test(
                data,
                plan,
                theta,
                kind,
                learner_cfg,
                kernel_cfg,
                seed,
                m_strategy=m_strategy,
                nested_split=nested_split,
                fit_cache=fit_cache,
            ).standardized
        return memo[theta]

    result = _invert_statistic(
        stat_fn, center, half_width, search_cfg.grid_size, search_cfg.tol, level
    )
    return ConfidenceSet(
        point=result["point"],
        lower=result["lower"],
        upper=result["upper"],
        level=level,
        grid=result["grid"],
        bracketing_ok=result["bracketing_ok"],
        multiple_crossings=result["multiple_crossings"],
    )
