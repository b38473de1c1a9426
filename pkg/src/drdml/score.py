"""Cross-fitted score statistics for the partially linear model.

Four test statistics of H0: theta = theta0 share one aggregation:

  ps     (a - ghat) * (y - theta0*a)
  or     a * (y - theta0*a - mhat)
  dml    (a - ghat) * (y - theta0*a - mhat)
  drdml  the doubly robust score psi_star below

For drdml, two univariate kernel regressions supply the corrections:
Mhat smooths a - ghat against the fitted mhat(L), Ghat smooths
y - theta0*a - mhat against ghat(L); the scalars alpha, beta solve the
fold-level estimating equations that zero the empirical bias terms. The
statistic is the K-fold average of per-fold score means, standardised by
sqrt(n) * u_bar / sigma_hat and referred to a standard normal.

ghat and mhat are fitted on the outer part of each fold complement and the
kernel corrections on the inner part, so the corrections never reuse the
rows that trained the regressions they smooth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from ._rand import child_seed
from .dataset import Dataset, FoldPlan
from .errors import DegenerateVarianceError, DrdmlError, ParameterError, ShapeError
from .kernel import KernelSpec, nw_fit, nw_predict
from .learners import LearnerSpec, OracleSpec, fit, predict

__all__ = [
    "TEST_KINDS",
    "NuisancePair",
    "FoldNuisances",
    "FoldSummary",
    "ScoreResult",
    "CorrectionSolution",
    "solve_alpha",
    "solve_beta",
    "psi_star",
    "score_test",
    "cross_fit_scores",
]

TEST_KINDS = ("ps", "or", "dml", "drdml")
_DEGENERATE_FLOOR = 1e-12


@dataclass(frozen=True)
class NuisancePair:
    """Learner bindings for the two primary nuisances g(L)=E(A|L) and
    m(L)=E(Y - theta0*A | L)."""

    g: LearnerSpec | OracleSpec
    m: LearnerSpec | OracleSpec


class CorrectionSolution(NamedTuple):
    value: float
    degenerate: bool


@dataclass(frozen=True)
class FoldNuisances:
    """Out-of-fold nuisance values on one evaluation fold."""

    indices: np.ndarray
    ghat: np.ndarray
    mhat: np.ndarray
    Ghat: np.ndarray
    Mhat: np.ndarray
    alpha: float
    beta: float
    alpha_degenerate: bool = False
    beta_degenerate: bool = False


@dataclass(frozen=True)
class FoldSummary:
    fold: int
    n_fold: int
    u_k: float
    psi_sq_mean: float
    alpha: float | None = None
    beta: float | None = None
    m_bandwidth: float | None = None
    g_bandwidth: float | None = None
    n_out_of_support: int = 0


@dataclass(frozen=True)
class ScoreResult:
    """Unscaled mean score, variance, standardised statistic and p-value."""

    statistic_kind: str
    theta0: float
    u_bar: float
    sigma2_hat: float
    standardized: float
    p_value: float
    per_fold: tuple[FoldSummary, ...]
    fold_nuisances: tuple[FoldNuisances, ...] | None = None


def _correction_scalar(weights: np.ndarray, residuals: np.ndarray) -> CorrectionSolution:
    weights = np.asarray(weights, dtype=float).ravel()
    residuals = np.asarray(residuals, dtype=float).ravel()
    if weights.shape != residuals.shape:
        raise ShapeError(f"length mismatch: {weights.shape[0]} vs {residuals.shape[0]}")
    quad = float(weights @ weights)
    if quad < _DEGENERATE_FLOOR * weights.shape[0]:
        return CorrectionSolution(0.0, True)
    return CorrectionSolution(float(weights @ residuals) / quad, False)


def solve_alpha(Ghat, a, ghat) -> CorrectionSolution:
    """Solve 0 = sum_i Ghat_i * (a_i - ghat_i - alpha * Ghat_i) in closed form."""
    Ghat = np.asarray(Ghat, dtype=float).ravel()
    a = np.asarray(a, dtype=float).ravel()
    ghat = np.asarray(ghat, dtype=float).ravel()
    if not (Ghat.shape == a.shape == ghat.shape):
        raise ShapeError(
            f"length mismatch: Ghat {Ghat.shape[0]}, a {a.shape[0]}, ghat {ghat.shape[0]}"
        )
    return _correction_scalar(Ghat, a - ghat)


def solve_beta(Mhat, y, a, theta0, mhat) -> CorrectionSolution:
    """Solve 0 = sum_i Mhat_i * (y_i - theta0*a_i - mhat_i - beta * Mhat_i)."""
    Mhat = np.asarray(Mhat, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    a = np.asarray(a, dtype=float).ravel()
    mhat = np.asarray(mhat, dtype=float).ravel()
    if not (Mhat.shape == y.shape == a.shape == mhat.shape):
        raise ShapeError("length mismatch between Mhat, y, a and mhat")
    return _correction_scalar(Mhat, y - theta0 * a - mhat)


def psi_star(y, a, theta0, ghat, mhat, Ghat=0.0, Mhat=0.0, alpha=0.0, beta=0.0):
    """Per-observation doubly robust score.

    With Ghat = Mhat = alpha = beta = 0 this reduces exactly to the plain
    orthogonal score (a - ghat) * (y - theta0*a - mhat).
    """
    resid_a = a - ghat - alpha * Ghat
    resid_y = y - theta0 * a - mhat - beta * Mhat
    return resid_a * resid_y - Ghat * resid_a - Mhat * resid_y


def _fit_with_context(spec, x, t, seed, fold):
    try:
        return fit(spec, x, t, seed=seed)
    except DrdmlError as exc:
        raise type(exc)(f"fold {fold}: {exc}") from exc


def _aggregate(kind, theta0, fold_scores, summaries_extra, n, keep_nuisances, nuisances):
    u_ks = [float(np.mean(s)) for s in fold_scores]
    sq_ks = [float(np.mean(s * s)) for s in fold_scores]
    u_bar = float(np.mean(u_ks))
    sigma2 = float(np.mean(sq_ks)) - u_bar * u_bar
    if sigma2 <= 0.0:
        raise DegenerateVarianceError(
            f"{kind}: estimated score variance {sigma2} is not positive"
        )
    standardized = math.sqrt(n) * u_bar / math.sqrt(sigma2)
    p_value = math.erfc(abs(standardized) / math.sqrt(2.0))
    per_fold = tuple(
        FoldSummary(fold=k, n_fold=s.shape[0], u_k=u_ks[k], psi_sq_mean=sq_ks[k], **extra)
        for k, (s, extra) in enumerate(zip(fold_scores, summaries_extra))
    )
    return ScoreResult(
        statistic_kind=kind,
        theta0=float(theta0),
        u_bar=u_bar,
        sigma2_hat=sigma2,
        standardized=standardized,
        p_value=p_value,
        per_fold=per_fold,
        fold_nuisances=tuple(nuisances) if keep_nuisances else None,
    )


def cross_fit_scores(
    data: Dataset,
    plan: FoldPlan,
    theta0: float,
    kinds,
    learner_cfg: NuisancePair,
    kernel_cfg: KernelSpec | None = None,
    seed: int = 0,
    *,
    m_strategy: str = "profile",
    nested_split: bool = True,
    keep_nuisances: bool = False,
    fit_cache: dict | None = None,
) -> dict[str, ScoreResult]:
    """Evaluate several score statistics from one cross-fitting pass.

    All learner seeds depend only on (seed, fold), never on theta0 or the
    statistic kind, so results agree bit-for-bit with separate score_test
    calls and the statistic is a deterministic function of theta0.

    m_strategy "profile" regresses y - theta0*a on L; "decompose" fits
    E(y|L) once and uses mhat = E(y|L) - theta0*ghat (ghat doubling as
    E(a|L)), which lets `fit_cache` reuse fits across theta0 values.
    """
    kinds = tuple(kinds)
    for kind in kinds:
        if kind not in TEST_KINDS:
            raise ParameterError(f"unknown statistic kind {kind!r}; choose from {TEST_KINDS}")
    if m_strategy not in ("profile", "decompose"):
        raise ParameterError(f"m_strategy must be 'profile' or 'decompose', got {m_strategy!r}")
    if plan.n != data.n:
        raise ShapeError(f"fold plan built for n={plan.n}, data has n={data.n}")
    kernel_cfg = kernel_cfg or KernelSpec()

    need_m = any(k in ("or", "dml", "drdml") for k in kinds)
    need_g = any(k in ("ps", "dml", "drdml") for k in kinds) or (
        need_m and m_strategy == "decompose"
    )
    want_drdml = "drdml" in kinds
    y, a, l = data.y, data.a, data.l
    theta0 = float(theta0)
    cache = fit_cache if fit_cache is not None else {}

    fold_scores: dict[str, list[np.ndarray]] = {k: [] for k in kinds}
    extras: dict[str, list[dict]] = {k: [] for k in kinds}
    nuisances: list[FoldNuisances] = []

    for k in range(plan.k):
        idx = plan.folds[k]
        if nested_split:
            outer, inner = plan.inner_split[k]
        else:
            outer = inner = plan.complement(k)

        g_fit = None
        if need_g:
            key = ("g", k)
            g_fit = cache.get(key)
            if g_fit is None:
                g_fit = _fit_with_context(learner_cfg.g, l[outer], a[outer], child_seed(seed, 11, k), k)
                cache[key] = g_fit

        mhat_eval = mhat_inner = None
        if need_m:
            if m_strategy == "profile":
                m_fit = _fit_with_context(
                    learner_cfg.m, l[outer], y[outer] - theta0 * a[outer], child_seed(seed, 12, k), k
                )
                mhat_eval = predict(m_fit, l[idx])
                if want_drdml:
                    mhat_inner = predict(m_fit, l[inner])
            else:
                key = ("ym", k)
                ym_fit = cache.get(key)
                if ym_fit is None:
                    ym_fit = _fit_with_context(
                        learner_cfg.m, l[outer], y[outer], child_seed(seed, 12, k), k
                    )
                    cache[key] = ym_fit
                mhat_eval = predict(ym_fit, l[idx]) - theta0 * predict(g_fit, l[idx])
                if want_drdml:
                    mhat_inner = predict(ym_fit, l[inner]) - theta0 * predict(g_fit, l[inner])

        ghat_eval = predict(g_fit, l[idx]) if need_g else None
        ghat_inner = predict(g_fit, l[inner]) if (need_g and want_drdml) else None

        drdml_extra: dict = {}
        if want_drdml:
            m_kernel = nw_fit(
                mhat_inner, a[inner] - ghat_inner, kernel_cfg, seed=child_seed(seed, 13, k)
            )
            g_kernel = nw_fit(
                ghat_inner,
                y[inner] - theta0 * a[inner] - mhat_inner,
                kernel_cfg,
                seed=child_seed(seed, 14, k),
            )
            Mhat_eval, m_flags = nw_predict(m_kernel, mhat_eval)
            Ghat_eval, g_flags = nw_predict(g_kernel, ghat_eval)
            alpha = solve_alpha(Ghat_eval, a[idx], ghat_eval)
            beta = solve_beta(Mhat_eval, y[idx], a[idx], theta0, mhat_eval)
            nuisances.append(
                FoldNuisances(
                    indices=idx,
                    ghat=ghat_eval,
                    mhat=mhat_eval,
                    Ghat=Ghat_eval,
                    Mhat=Mhat_eval,
                    alpha=alpha.value,
                    beta=beta.value,
                    alpha_degenerate=alpha.degenerate,
                    beta_degenerate=beta.degenerate,
                )
            )
            drdml_extra = {
                "alpha": alpha.value,
                "beta": beta.value,
                "m_bandwidth": m_kernel.chosen_bandwidth,
                "g_bandwidth": g_kernel.chosen_bandwidth,
                "n_out_of_support": int(m_flags.sum() + g_flags.sum()),
            }

        for kind in kinds:
            if kind == "ps":
                scores = (a[idx] - ghat_eval) * (y[idx] - theta0 * a[idx])
                extra: dict = {}
            elif kind == "or":
                scores = a[idx] * (y[idx] - theta0 * a[idx] - mhat_eval)
                extra = {}
            elif kind == "dml":
                scores = psi_star(y[idx], a[idx], theta0, ghat_eval, mhat_eval)
                extra = {}
            else:
                scores = psi_star(
                    y[idx],
                    a[idx],
                    theta0,
                    ghat_eval,
                    mhat_eval,
                    Ghat_eval,
                    Mhat_eval,
                    alpha.value,
                    beta.value,
                )
                extra = drdml_extra
            fold_scores[kind].append(scores)
            extras[kind].append(extra)

    return {
        kind: _aggregate(
            kind,
            theta0,
            fold_scores[kind],
            extras[kind],
            data.n,
            keep_nuisances and kind == "drdml",
            nuisances,
        )
        for kind in kinds
    }


def score_test(
    data: Dataset,
    plan: FoldPlan,
    theta0: float,
    kind: str,
    learner_cfg: NuisancePair,
    kernel_cfg: KernelSpec | None = None,
    seed: int = 0,
    *,
    m_strategy: str = "profile",
    nested_split: bool = True,
    keep_nuisances: bool = False,
    fit_cache: dict | None = None,
) -> ScoreResult:
    """Cross-fitted score test of H0: theta = theta0 for one statistic kind."""
    return cross_fit_scores(
        data,
        plan,
        theta0,
        (kind,),
        learner_cfg,
        kernel_cfg,
        seed,
        m_strategy=m_strategy,
        nested_split=nested_split,
        keep_nuisances=keep_nuisances,
        fit_cache=fit_cache,
    )[kind]
