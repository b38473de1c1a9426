"""Univariate Nadaraya-Watson regression with cross-validated bandwidth.

This is the estimator behind the auxiliary corrections: the residual
A - ghat is smoothed against the fitted outcome regression mhat(L), and
Y - theta0*A - mhat against ghat(L). Both the regressor and the response
are themselves first-stage estimates, so the fit must tolerate queries
that land outside the effective support of the training regressor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._rand import rng_from
from .errors import InputError, ParameterError

__all__ = ["KernelSpec", "KernelFit", "NwPrediction", "nw_fit", "nw_predict"]

_DENOMINATOR_FLOOR = 1e-12
_DEFAULT_BANDWIDTH_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)


def _epanechnikov(u):
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def _triangular(u):
    return np.where(np.abs(u) <= 1.0, 1.0 - np.abs(u), 0.0)


def _box(u):
    # Discontinuous at +-1: kept for tests only, violates the smoothness
    # condition the rate theory needs.
    return np.where(np.abs(u) <= 1.0, 0.5, 0.0)


_KERNELS = {"epanechnikov": _epanechnikov, "triangular": _triangular, "box": _box}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and bandwidth policy ("cv" or a fixed positive value)."""

    kernel: str = "epanechnikov"
    bandwidth: float | str = "cv"
    bandwidth_grid: tuple[float, ...] = ()
    cv_folds: int = 5

    def __post_init__(self):
        if self.kernel not in _KERNELS:
            raise ParameterError(
                f"unknown kernel {self.kernel!r}; choose from {sorted(_KERNELS)}"
            )
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "cv":
                raise ParameterError(f"bandwidth must be positive or 'cv', got {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ParameterError(f"bandwidth must be positive, got {self.bandwidth}")
        if any(h <= 0 for h in self.bandwidth_grid):
            raise ParameterError("bandwidth_grid entries must be positive")
        if self.cv_folds < 2:
            raise ParameterError(f"cv_folds must be >= 2, got {self.cv_folds}")


@dataclass(frozen=True)
class KernelFit:
    """Frozen training pairs plus the selected bandwidth."""

    regressor_values: np.ndarray
    response_values: np.ndarray
    chosen_bandwidth: float
    spec: KernelSpec
    degenerate: bool = False
    cv_table: tuple[tuple[float, float], ...] = ()

    @property
    def response_mean(self) -> float:
        return float(np.mean(self.response_values))


class NwPrediction(NamedTuple):
    values: np.ndarray
    out_of_support: np.ndarray


def _weights(kernel: str, queries: np.ndarray, regressor: np.ndarray, h: float) -> np.ndarray:
    u = (queries[:, None] - regressor[None, :]) / h
    return _KERNELS[kernel](u)


def _nw_values(
    kernel: str,
    regressor: np.ndarray,
    response: np.ndarray,
    h: float,
    queries: np.ndarray,
    fallback: float,
):
    w = _weights(kernel, queries, regressor, h)
    den = w.sum(axis=1)
    num = w @ response
    flagged = den < _DENOMINATOR_FLOOR
    values = np.where(flagged, fallback, num / np.where(flagged, 1.0, den))
    return values, flagged


def _default_grid(regressor: np.ndarray) -> tuple[float, ...]:
    n = regressor.shape[0]
    scale = float(np.std(regressor)) * n ** (-1.0 / 5.0)
    return tuple(c * scale for c in _DEFAULT_BANDWIDTH_FACTORS)


def nw_fit(regressor, response, spec: KernelSpec | None = None, seed: int = 0) -> KernelFit:
    """Fit a Nadaraya-Watson smoother of `response` on the scalar `regressor`.

    With bandwidth "cv" the bandwidth minimising out-of-fold squared error
    over the grid is chosen (default grid: c * sd * n^(-1/5) for
    c in 1/4..4). A zero-variance regressor yields a degenerate fit that
    predicts the response mean everywhere.
    """
    spec = spec or KernelSpec()
    r = np.asarray(regressor, dtype=float).ravel()
    s = np.asarray(response, dtype=float).ravel()
    if r.shape[0] != s.shape[0]:
        raise InputError(f"length mismatch: regressor {r.shape[0]}, response {s.shape[0]}")
    if r.shape[0] < 2:
        raise InputError(f"need at least 2 training pairs, got {r.shape[0]}")
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(s))):
        raise InputError("non-finite training values")
    r = r.copy()
    s = s.copy()
    r.setflags(write=False)
    s.setflags(write=False)

    if float(np.std(r)) == 0.0:
        return KernelFit(r, s, chosen_bandwidth=1.0, spec=spec, degenerate=True)

    if not isinstance(spec.bandwidth, str):
        return KernelFit(r, s, chosen_bandwidth=float(spec.bandwidth), spec=spec)

    grid = spec.bandwidth_grid or _default_grid(r)
    n = r.shape[0]
    folds = min(spec.cv_folds, n)
    order = rng_from(seed, 31).permutation(n)
    blocks = np.array_split(order, folds)

    table = []
    for h in grid:
        sq_err = 0.0
        for block in blocks:
            mask = np.ones(n, dtype=bool)
            mask[block] = False
            train_r, train_s = r[mask], s[mask]
            if train_r.size == 0:
                continue
            pred, _ = _nw_values(spec.kernel, train_r, train_s, h, r[block], float(train_s.mean()))
            sq_err += float(np.sum((pred - s[block]) ** 2))
        table.append((float(h), sq_err / n))
    losses = [loss for _, loss in table]
    chosen = table[int(np.argmin(losses))][0]
    return KernelFit(r, s, chosen_bandwidth=chosen, spec=spec, cv_table=tuple(table))


def nw_predict(fit: KernelFit, query_points) -> NwPrediction:
    """Evaluate the smoother; queries with an (almost) empty kernel window
    fall back to the global response mean and are flagged."""
    q = np.asarray(query_points, dtype=float).ravel()
    if not np.all(np.isfinite(q)):
        raise InputError("non-finite query points")
    if fit.degenerate:
        values = np.full(q.shape, fit.response_mean)
        return NwPrediction(values, np.zeros(q.shape, dtype=bool))
    values, flagged = _nw_values(
        fit.spec.kernel,
        fit.regressor_values,
        fit.response_values,
        fit.chosen_bandwidth,
        q,
        fit.response_mean,
    )
    return NwPrediction(values, flagged)
