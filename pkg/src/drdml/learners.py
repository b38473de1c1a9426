"""Pluggable regression learners for the nuisance functions.

The menu mirrors a small Super-Learner-style library: sample mean, linear
model, l1-penalised (generalised) linear model, k nearest neighbours, a
Gaussian product-kernel smoother, a shallow random forest, and a stacking
ensemble with convex cross-validated weights. The l1 learner doubles as
the deliberate-misspecification knob: feature transforms are declarative,
so "omit the interaction term" is configuration rather than code.

Binary targets (values in {0,1}) switch penalized_l1 and tree_ensemble to
a logistic link; any learner fitted to a binary target has its predictions
clamped to [0.001, 0.999].
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy.optimize import nnls
from scipy.special import expit

from ._rand import child_seed, rng_from
from .errors import DrdmlError, ParameterError, ShapeError, SizeError, StackFitError

__all__ = [
    "LearnerSpec",
    "OracleSpec",
    "FittedLearner",
    "fit",
    "predict",
    "fit_stack",
    "default_stack_spec",
]

VALID_KINDS = ("mean", "linear", "penalized_l1", "knn", "kernel_smoother", "tree_ensemble", "stack")
_CLAMP_LO, _CLAMP_HI = 1e-3, 1.0 - 1e-3
_CD_TOL = 1e-8
_KKT_TOL = 1e-7


@dataclass(frozen=True)
class LearnerSpec:
    """Declarative learner choice: kind, kind-specific hyperparameters,
    CV fold count for grid search, and an optional feature transform."""

    kind: str
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)
    cv_folds: int = 5
    feature_transform: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ParameterError(f"unknown learner kind {self.kind!r}; choose from {VALID_KINDS}")
        if self.cv_folds < 2:
            raise ParameterError(f"cv_folds must be >= 2, got {self.cv_folds}")
        object.__setattr__(self, "hyperparameters", dict(self.hyperparameters))
        object.__setattr__(self, "feature_transform", tuple(self.feature_transform))
        for token in self.feature_transform:
            if token not in ("interactions", "drop_interactions", "additive_poly"):
                raise ParameterError(f"unknown feature transform {token!r}")
        for grid_key in ("penalty_grid", "k_grid", "bandwidth_factors"):
            if grid_key in self.hyperparameters and len(self.hyperparameters[grid_key]) == 0:
                raise ParameterError(f"{grid_key} must be nonempty")
        if self.kind == "stack":
            members = tuple(self.hyperparameters.get("members", ()))
            if not members:
                raise ParameterError("stack requires a nonempty member list")
            if any(m.kind == "stack" for m in members):
                raise ParameterError("stack members may not themselves be stacks")


@dataclass(frozen=True)
class OracleSpec:
    """Fixed-function nuisance: predicts fn(L), skipping estimation.

    Benchmark affordance for plugging in true data-generating formulas.
    """

    fn: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class FittedLearner:
    """Immutable fitted state; prediction is deterministic given the state."""

    kind: str
    state: Any
    binary_target: bool
    n_features_raw: int
    feature_transform: tuple[str, ...]
    chosen: Mapping[str, Any] = field(default_factory=dict)
    cv_losses: tuple[tuple[Any, float], ...] = ()
    warnings: tuple[str, ...] = ()
    training_indices: np.ndarray | None = None

    def predict(self, x_new) -> np.ndarray:
        return predict(self, x_new)


def _apply_transform(x: np.ndarray, transform: tuple[str, ...]) -> np.ndarray:
    out = x
    if "interactions" in transform:
        n, p = x.shape
        cols = [x]
        for i in range(p):
            for j in range(i + 1, p):
                cols.append((x[:, i] * x[:, j])[:, None])
        out = np.hstack(cols)
    if "additive_poly" in transform:
        # coordinatewise cubic basis, no cross terms: an additive-model basis
        cols = [out]
        for d in (2, 3):
            cols.append(out**d)
        out = np.hstack(cols)
    return out


def _as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-d, got ndim={arr.ndim}")
    return arr


def _cv_blocks(n: int, folds: int, seed: int) -> list[np.ndarray]:
    order = rng_from(seed, 57).permutation(n)
    return np.array_split(order, min(folds, n))


def _is_binary(targets: np.ndarray) -> bool:
    return bool(np.all((targets == 0.0) | (targets == 1.0)))


# ---------------------------------------------------------------------------
# individual learners


def _fit_linear(xt, t):
    design = np.hstack([np.ones((xt.shape[0], 1)), xt])
    coef, _, rank, _ = np.linalg.lstsq(design, t, rcond=None)
    warn = ()
    if rank < design.shape[1]:
        msg = f"singular design (rank {rank} < {design.shape[1]}): minimum-norm solution used"
        _warnings.warn(msg, RuntimeWarning, stacklevel=3)
        warn = (msg,)
    return coef, warn


def _predict_linear(coef, xt):
    return coef[0] + xt @ coef[1:]


def _knn_values(train_x, train_t, query_x, k):
    d2 = (
        np.sum(query_x**2, axis=1)[:, None]
        + np.sum(train_x**2, axis=1)[None, :]
        - 2.0 * query_x @ train_x.T
    )
    n_train = train_x.shape[0]
    if k >= n_train:
        return np.full(query_x.shape[0], float(train_t.mean()))
    idx = np.argpartition(d2, k - 1, axis=1)[:, :k]
    return train_t[idx].mean(axis=1)


def _fit_knn(xt, t, spec, seed):
    raw_grid = tuple(spec.hyperparameters.get("k_grid", (5, 10, 20, 50)))
    if any(int(k) < 1 for k in raw_grid):
        raise ParameterError(f"k_grid entries must be >= 1, got {raw_grid}")
    n = xt.shape[0]
    grid, seen = [], set()
    for k in raw_grid:
        k = min(int(k), n)
        if k not in seen:
            seen.add(k)
            grid.append(k)
    if len(grid) == 1:
        return (xt, t, grid[0]), ((grid[0], float(np.mean((t - t.mean()) ** 2))),)
    blocks = _cv_blocks(n, spec.cv_folds, seed)
    table = []
    for k in grid:
        sq = 0.0
        for block in blocks:
            mask = np.ones(n, dtype=bool)
            mask[block] = False
            k_eff = min(k, int(mask.sum()))
            pred = _knn_values(xt[mask], t[mask], xt[block], k_eff)
            sq += float(np.sum((pred - t[block]) ** 2))
        table.append((k, sq / n))
    chosen = grid[int(np.argmin([loss for _, loss in table]))]
    return (xt, t, chosen), tuple(table)


def _smoother_bandwidths(xt, factor):
    n, p = xt.shape
    sd = xt.std(axis=0)
    active = sd > 0
    h = np.ones(p)
    d_active = max(int(active.sum()), 1)
    h[active] = factor * sd[active] * n ** (-1.0 / (4.0 + d_active))
    return h, active


def _smoother_values(train_x, train_t, query_x, h, active):
    if not active.any():
        return np.full(query_x.shape[0], float(train_t.mean()))
    diff = (query_x[:, None, :][..., active] - train_x[None, :, :][..., active]) / h[active]
    w = np.exp(-0.5 * np.sum(diff * diff, axis=2))
    den = w.sum(axis=1)
    num = w @ train_t
    bad = den < 1e-300
    return np.where(bad, float(train_t.mean()), num / np.where(bad, 1.0, den))


def _fit_kernel_smoother(xt, t, spec, seed):
    factors = tuple(spec.hyperparameters.get("bandwidth_factors", (0.25, 0.5, 1.0, 2.0, 4.0)))
    if any(f <= 0 for f in factors):
        raise ParameterError(f"bandwidth_factors must be positive, got {factors}")
    n = xt.shape[0]
    if len(factors) == 1:
        h, active = _smoother_bandwidths(xt, factors[0])
        return (xt, t, h, active), ((factors[0], np.nan),)
    blocks = _cv_blocks(n, spec.cv_folds, seed)
    table = []
    for c in factors:
        sq = 0.0
        for block in blocks:
            mask = np.ones(n, dtype=bool)
            mask[block] = False
            h, active = _smoother_bandwidths(xt[mask], c)
            pred = _smoother_values(xt[mask], t[mask], xt[block], h, active)
            sq += float(np.sum((pred - t[block]) ** 2))
        table.append((c, sq / n))
    chosen = factors[int(np.argmin([loss for _, loss in table]))]
    h, active = _smoother_bandwidths(xt, chosen)
    return (xt, t, h, active), tuple(table)


def _soft_threshold(value, threshold):
    return np.sign(value) * max(abs(value) - threshold, 0.0)


def _lasso_cd(x, t, lam, weights=None, beta0=None, tol=_CD_TOL, max_iter=20000):
    """Cyclic coordinate descent for (1/2n) sum w_i (t_i - b0 - x_i'b)^2 + lam*||b||_1.

    Intercept unpenalised. Returns (b0, beta).
    """
    n, p = x.shape
    w = np.ones(n) if weights is None else weights
    w_sum = w.sum()
    beta = np.zeros(p) if beta0 is None else beta0.copy()
    eta = x @ beta
    b0 = float(np.sum(w * (t - eta)) / w_sum)
    z = (w[:, None] * x * x).sum(axis=0) / n
    for _ in range(max_iter):
        max_delta = 0.0
        r = t - b0 - eta
        for j in range(p):
            if z[j] <= 0.0:
                continue
            rho = float(np.sum(w * x[:, j] * r) / n) + z[j] * beta[j]
            new = _soft_threshold(rho, lam) / z[j]
            delta = new - beta[j]
            if delta != 0.0:
                eta += delta * x[:, j]
                r -= delta * x[:, j]
                beta[j] = new
                max_delta = max(max_delta, abs(delta))
        new_b0 = float(np.sum(w * (t - eta)) / w_sum)
        max_delta = max(max_delta, abs(new_b0 - b0))
        b0 = new_b0
        if max_delta < tol:
            break
    return b0, beta


def _logistic_lasso(x, t, lam, tol=_CD_TOL, max_outer=200):
    """Proximal-Newton (IRLS + weighted lasso) for the l1-penalised logistic
    likelihood (1/n) sum[log(1 + e^eta) - t*eta] + lam*||b||_1."""
    n, p = x.shape
    beta = np.zeros(p)
    b0 = float(np.log(np.clip(t.mean(), 1e-6, 1 - 1e-6) / (1 - np.clip(t.mean(), 1e-6, 1 - 1e-6))))
    for _ in range(max_outer):
        eta = b0 + x @ beta
        prob = expit(eta)
        w = np.clip(prob * (1.0 - prob), 1e-5, None)
        zresp = eta + (t - prob) / w
        new_b0, new_beta = _lasso_cd(x, zresp, lam, weights=w, beta0=beta, tol=tol)
        delta = max(abs(new_b0 - b0), float(np.max(np.abs(new_beta - beta))) if p else 0.0)
        b0, beta = new_b0, new_beta
        if delta < tol:
            grad = x.T @ (expit(b0 + x @ beta) - t) / n
            kkt = np.where(
                beta != 0.0, np.abs(grad + lam * np.sign(beta)), np.maximum(np.abs(grad) - lam, 0.0)
            )
            if (kkt <= _KKT_TOL).all():
                break
    return b0, beta


def _default_penalty_grid(xt, t):
    t_c = t - t.mean()
    lam_max = float(np.max(np.abs(xt.T @ t_c))) / xt.shape[0] if xt.shape[1] else 1.0
    lam_max = max(lam_max, 1e-12)
    return tuple(lam_max * r for r in np.geomspace(1.0, 1e-3, 8))


def _fit_penalized_l1(xt, t, spec, seed, binary):
    grid = tuple(spec.hyperparameters.get("penalty_grid", ()) or _default_penalty_grid(xt, t))
    if any(lam < 0 for lam in grid):
        raise ParameterError(f"penalty_grid entries must be >= 0, got {grid}")
    n = xt.shape[0]
    solver = _logistic_lasso if binary else _lasso_cd

    def _predict(b0, beta, xq):
        eta = b0 + xq @ beta
        return expit(eta) if binary else eta

    if len(grid) == 1:
        lam = grid[0]
        b0, beta = solver(xt, t, lam)
        return (b0, beta, lam, binary), ((lam, float(np.mean((_predict(b0, beta, xt) - t) ** 2))),)

    blocks = _cv_blocks(n, spec.cv_folds, seed)
    table = []
    for lam in grid:
        sq = 0.0
        for block in blocks:
            mask = np.ones(n, dtype=bool)
            mask[block] = False
            b0, beta = solver(xt[mask], t[mask], lam)
            pred = _predict(b0, beta, xt[block])
            sq += float(np.sum((pred - t[block]) ** 2))
        table.append((float(lam), sq / n))
    chosen = grid[int(np.argmin([loss for _, loss in table]))]
    b0, beta = solver(xt, t, chosen)
    return (b0, beta, float(chosen), binary), tuple(table)


def _fit_tree_ensemble(xt, t, spec, seed, binary):
    from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor

    hp = spec.hyperparameters
    kwargs = dict(
        n_estimators=int(hp.get("n_trees", 60)),
        max_depth=hp.get("max_depth", 5),
        min_samples_leaf=int(hp.get("min_samples_leaf", 5)),
        random_state=int(seed % (2**32)),
        n_jobs=1,
    )
    if binary and np.unique(t).size > 1:
        model = RandomForestClassifier(**kwargs).fit(xt, t.astype(int))
        return ("classifier", model)
    model = RandomForestRegressor(**kwargs).fit(xt, t)
    return ("regressor", model)


def _predict_tree(state, xq):
    mode, model = state
    if mode == "classifier":
        proba = model.predict_proba(xq)
        positive = list(model.classes_).index(1) if 1 in model.classes_ else None
        return proba[:, positive] if positive is not None else np.zeros(xq.shape[0])
    return model.predict(xq)


# ---------------------------------------------------------------------------
# public operations


def fit(spec, x, targets, seed: int = 0, training_indices=None) -> FittedLearner:
    """Fit a learner; hyperparameter grids are searched by `spec.cv_folds`-fold
    cross-validation minimising mean squared prediction error."""
    x = _as_matrix(x)
    t = np.asarray(targets, dtype=float).ravel()
    if x.shape[0] != t.shape[0]:
        raise ShapeError(f"rows(x)={x.shape[0]} != len(targets)={t.shape[0]}")
    if t.shape[0] < 2:
        raise SizeError(f"need at least 2 training rows, got {t.shape[0]}")
    binary = _is_binary(t)
    if training_indices is None:
        training_indices = np.arange(x.shape[0])

    if isinstance(spec, OracleSpec):
        return FittedLearner(
            kind="oracle",
            state=spec.fn,
            binary_target=binary,
            n_features_raw=x.shape[1],
            feature_transform=(),
            training_indices=np.asarray(training_indices),
        )

    xt = _apply_transform(x, spec.feature_transform)
    chosen: dict[str, Any] = {}
    warn: tuple[str, ...] = ()
    cv_losses: tuple = ()

    if spec.kind == "mean":
        state = float(t.mean())
    elif spec.kind == "linear":
        state, warn = _fit_linear(xt, t)
    elif spec.kind == "knn":
        state, cv_losses = _fit_knn(xt, t, spec, seed)
        chosen["k"] = state[2]
    elif spec.kind == "kernel_smoother":
        state, cv_losses = _fit_kernel_smoother(xt, t, spec, seed)
        chosen["bandwidths"] = tuple(state[2])
    elif spec.kind == "penalized_l1":
        state, cv_losses = _fit_penalized_l1(xt, t, spec, seed, binary)
        chosen["penalty"] = state[2]
    elif spec.kind == "tree_ensemble":
        state = _fit_tree_ensemble(xt, t, spec, seed, binary)
    elif spec.kind == "stack":
        members = tuple(spec.hyperparameters["members"])
        inner = fit_stack(members, x, t, spec.cv_folds, seed)
        return FittedLearner(
            kind="stack",
            state=inner.state,
            binary_target=binary,
            n_features_raw=x.shape[1],
            feature_transform=spec.feature_transform,
            chosen=inner.chosen,
            cv_losses=inner.cv_losses,
            warnings=inner.warnings,
            training_indices=np.asarray(training_indices),
        )
    else:  # pragma: no cover - guarded by LearnerSpec validation
        raise ParameterError(f"unknown learner kind {spec.kind!r}")

    return FittedLearner(
        kind=spec.kind,
        state=state,
        binary_target=binary,
        n_features_raw=x.shape[1],
        feature_transform=spec.feature_transform,
        chosen=chosen,
        cv_losses=cv_losses,
        warnings=warn,
        training_indices=np.asarray(training_indices),
    )


def predict(model: FittedLearner, x_new) -> np.ndarray:
    """Evaluate a fitted learner; binary-target fits are clamped to [0.001, 0.999]."""
    xq = _as_matrix(x_new)
    if xq.shape[1] != model.n_features_raw:
        raise ShapeError(
            f"x_new has {xq.shape[1]} columns, model was trained with {model.n_features_raw}"
        )
    if model.kind == "oracle":
        values = np.asarray(model.state(xq), dtype=float).ravel()
    else:
        xt = _apply_transform(xq, model.feature_transform)
        if model.kind == "mean":
            values = np.full(xt.shape[0], model.state)
        elif model.kind == "linear":
            values = _predict_linear(model.state, xt)
        elif model.kind == "knn":
            train_x, train_t, k = model.state
            values = _knn_values(train_x, train_t, xt, k)
        elif model.kind == "kernel_smoother":
            train_x, train_t, h, active = model.state
            values = _smoother_values(train_x, train_t, xt, h, active)
        elif model.kind == "penalized_l1":
            b0, beta, _, logistic = model.state
            eta = b0 + xt @ beta
            values = expit(eta) if logistic else eta
        elif model.kind == "tree_ensemble":
            values = _predict_tree(model.state, xt)
        elif model.kind == "stack":
            fits, weights = model.state
            values = np.zeros(xq.shape[0])
            for w, member in zip(weights, fits):
                values = values + w * predict(member, xq)
        else:  # pragma: no cover
            raise ParameterError(f"unknown learner kind {model.kind!r}")
    if model.binary_target:
        values = np.clip(values, _CLAMP_LO, _CLAMP_HI)
    if not np.all(np.isfinite(values)):
        raise DrdmlError(f"{model.kind} produced non-finite predictions")
    return values


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, v.size + 1) > (css - 1.0))[0][-1]
    tau = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def _simplex_weights(oof: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Convex weights for member out-of-fold predictions.

    Primary solution: active-set NNLS followed by simplex normalization
    (the classic stacking construction). If normalization leaves it worse
    than the best single member, fall back to a projected-gradient solve of
    the simplex-constrained problem, so the stack's CV loss never exceeds
    the best member's.
    """
    n, m = oof.shape
    if m == 1:
        return np.ones(1)

    def loss(w):
        resid = t - oof @ w
        return float(resid @ resid) / n

    w_nnls, _ = nnls(oof, t)
    total = w_nnls.sum()
    w0 = w_nnls / total if total > 0 else np.full(m, 1.0 / m)

    vertex_losses = [loss(np.eye(m)[j]) for j in range(m)]
    best_vertex_loss = min(vertex_losses)
    if loss(w0) <= best_vertex_loss:
        return w0

    # refinement path: projected gradient from the better starting point
    w = min([w0, np.eye(m)[int(np.argmin(vertex_losses))]], key=loss)
    gram = oof.T @ oof / n
    lead = float(np.linalg.eigvalsh(gram)[-1])
    step = 1.0 / lead if lead > 0 else 1.0
    xty = oof.T @ t / n
    best_w, best_loss = w.copy(), loss(w)
    for _ in range(300):
        grad = gram @ w - xty
        w = _project_simplex(w - step * grad)
        current = loss(w)
        if current < best_loss - 1e-15:
            best_loss, best_w = current, w.copy()
    return best_w


def fit_stack(members, x, targets, cv_folds: int = 5, seed: int = 0) -> FittedLearner:
    """Stacking ensemble: convex weights minimising cross-validated squared
    error of member out-of-fold predictions, then members refit on all data."""
    members = tuple(members)
    if not members:
        raise ParameterError("stack requires at least one member")
    x = _as_matrix(x)
    t = np.asarray(targets, dtype=float).ravel()
    n = x.shape[0]
    binary = _is_binary(t)
    blocks = _cv_blocks(n, cv_folds, child_seed(seed, 101))

    oof_cols = []
    kept: list[int] = []
    failures: list[tuple[int, str]] = []
    stack_warnings: list[str] = []
    for j, member in enumerate(members):
        col = np.empty(n)
        try:
            for f, block in enumerate(blocks):
                mask = np.ones(n, dtype=bool)
                mask[block] = False
                fitted = fit(member, x[mask], t[mask], seed=child_seed(seed, 7, j, f))
                col[block] = predict(fitted, x[block])
        except DrdmlError as exc:
            failures.append((j, str(exc)))
            stack_warnings.append(f"member {j} ({member.kind}) dropped: {exc}")
            continue
        kept.append(j)
        oof_cols.append(col)
    if not kept:
        raise StackFitError(failures)

    oof = np.column_stack(oof_cols)
    member_losses = tuple(
        (members[j].kind, float(np.mean((oof[:, i] - t) ** 2))) for i, j in enumerate(kept)
    )
    weights = _simplex_weights(oof, t)
    stack_loss = float(np.mean((oof @ weights - t) ** 2))

    final_fits = tuple(
        fit(members[j], x, t, seed=child_seed(seed, 8, j)) for j in kept
    )
    return FittedLearner(
        kind="stack",
        state=(final_fits, tuple(float(w) for w in weights)),
        binary_target=binary,
        n_features_raw=x.shape[1],
        feature_transform=(),
        chosen={"weights": tuple(float(w) for w in weights), "members": tuple(kept)},
        cv_losses=member_losses + (("stack", stack_loss),),
        warnings=tuple(stack_warnings),
    )


def default_stack_spec(cv_folds: int = 5) -> LearnerSpec:
    """Super-Learner stand-in: sample mean, linear model with pairwise
    interactions, knn, several additive penalised smooths at fixed penalty
    levels (the meta-learner, not the member, picks the amount of
    smoothing), and a shallow random forest."""
    members = (
        LearnerSpec("mean"),
        LearnerSpec("linear", feature_transform=("interactions",)),
        LearnerSpec("knn", {"k_grid": (10, 30, 75)}),
        LearnerSpec("penalized_l1", {"penalty_grid": (1e-4,)}, feature_transform=("additive_poly",)),
        LearnerSpec("penalized_l1", {"penalty_grid": (0.01,)}, feature_transform=("additive_poly",)),
        LearnerSpec("penalized_l1", {"penalty_grid": (0.1,)}, feature_transform=("additive_poly",)),
        LearnerSpec("tree_ensemble", {"n_trees": 60, "max_depth": 3}),
    )
    return LearnerSpec("stack", {"members": members}, cv_folds=cv_folds)
