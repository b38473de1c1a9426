"""Monte Carlo harness: data-generating processes, misspecification
scenarios, and the experiment driver with its four reported metrics.

Experiment 1: L1 ~ U(-2,2), L2 ~ Bernoulli(0.5),
  A ~ Bernoulli(expit(-L1 + 2 L1 L2)), Y ~ N(theta*A - 1 + 2 L1 L2, 1).
Experiment 2: L1, L2 ~ U(0,1),
  s(u) = 1/(1 + exp(-20(u - 0.5))),
  A ~ Bernoulli(expit(-1.5 + 3 s(L1) + L2)), Y ~ N(theta*A + 3 s(L1) + L2, 1).

Scenarios bind learners per nuisance: the consistent side uses the stacking
ensemble, the inconsistent side an l1-penalised (generalised) linear model
with the interaction term omitted (experiment 1) / main effects only
(experiment 2).

Replication r of a run uses a seed stream derived from (seed, n, r), so
parallel and serial execution produce identical tables.
"""

from __future__ import annotations

import ast
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from ._rand import child_seed, rng_from
from .dataset import Dataset, make_fold_plan
from .errors import DrdmlError, ExperimentError, ParameterError
from .kernel import KernelSpec
from .learners import LearnerSpec, OracleSpec, default_stack_spec
from .score import NuisancePair, cross_fit_scores

__all__ = [
    "DgpSpec",
    "ScenarioSpec",
    "MetricRow",
    "MetricTable",
    "draw",
    "run_experiment",
    "standard_scenario",
    "oracle_scenario",
    "misspecified_l1_spec",
]

EXPERIMENTS = ("exp1", "exp2", "custom")
SCENARIOS = ("both", "ps_only", "or_only")
METRIC_COLUMNS = (
    "kind",
    "n",
    "scenario",
    "bias",
    "root_n_bias",
    "size",
    "mc_var_ratio",
    "reps",
    "failures",
    "seed",
)


# ---------------------------------------------------------------------------
# data-generating processes


def exp1_propensity(l: np.ndarray) -> np.ndarray:
    return expit(-l[:, 0] + 2.0 * l[:, 0] * l[:, 1])


def exp1_outcome_mean(l: np.ndarray) -> np.ndarray:
    return -1.0 + 2.0 * l[:, 0] * l[:, 1]


def _steep_sigmoid(u: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-20.0 * (u - 0.5)))


def exp2_propensity(l: np.ndarray) -> np.ndarray:
    return expit(-1.5 + 3.0 * _steep_sigmoid(l[:, 0]) + l[:, 1])


def exp2_outcome_mean(l: np.ndarray) -> np.ndarray:
    return 3.0 * _steep_sigmoid(l[:, 0]) + l[:, 1]


_ALLOWED_FUNCS = {
    "expit": expit,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "abs": np.abs,
}
_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


def _eval_node(node: ast.AST, columns: dict[str, np.ndarray]):
    if isinstance(node, ast.Expression):
        return _eval_node(node.body, columns)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name):
        if node.id in columns:
            return columns[node.id]
        raise ParameterError(f"unknown name {node.id!r} in expression")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        value = _eval_node(node.operand, columns)
        return -value if isinstance(node.op, ast.USub) else value
    if isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
        left = _eval_node(node.left, columns)
        right = _eval_node(node.right, columns)
        ops = {
            ast.Add: np.add,
            ast.Sub: np.subtract,
            ast.Mult: np.multiply,
            ast.Div: np.divide,
            ast.Pow: np.power,
        }
        return ops[type(node.op)](left, right)
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        if node.func.id not in _ALLOWED_FUNCS or node.keywords or len(node.args) != 1:
            raise ParameterError(f"unsupported call {ast.dump(node)}")
        return _ALLOWED_FUNCS[node.func.id](_eval_node(node.args[0], columns))
    raise ParameterError(f"unsupported expression node {type(node).__name__}")


def eval_expression(src: str, l: np.ndarray) -> np.ndarray:
    """Evaluate a declared formula over covariate columns l1..lp."""
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ParameterError(f"cannot parse expression {src!r}: {exc}") from exc
    columns = {f"l{i + 1}": l[:, i] for i in range(l.shape[1])}
    value = _eval_node(tree, columns)
    return np.broadcast_to(np.asarray(value, dtype=float), (l.shape[0],)).copy()


@dataclass(frozen=True)
class DgpSpec:
    """Data-generating process: a named experiment or declared formulas."""

    experiment: str = "exp1"
    theta_true: float = 0.0
    n: int = 1000
    covariate_laws: tuple[tuple, ...] = ()
    propensity: str = ""
    outcome_mean: str = ""

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ParameterError(
                f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}"
            )
        if self.n < 2:
            raise ParameterError(f"n must be >= 2, got {self.n}")
        if self.experiment == "custom":
            if not self.covariate_laws or not self.propensity or not self.outcome_mean:
                raise ParameterError(
                    "custom experiment needs covariate_laws, propensity and outcome_mean"
                )
            object.__setattr__(
                self, "covariate_laws", tuple(tuple(law) for law in self.covariate_laws)
            )

    def propensity_fn(self):
        if self.experiment == "exp1":
            return exp1_propensity
        if self.experiment == "exp2":
            return exp2_propensity
        return partial(_expression_fn, src=self.propensity)

    def outcome_mean_fn(self):
        if self.experiment == "exp1":
            return exp1_outcome_mean
        if self.experiment == "exp2":
            return exp2_outcome_mean
        return partial(_expression_fn, src=self.outcome_mean)


def _expression_fn(l: np.ndarray, src: str) -> np.ndarray:
    return eval_expression(src, l)


def _oracle_y_mean(l: np.ndarray, mean_fn, prop_fn, theta: float) -> np.ndarray:
    return mean_fn(l) + theta * prop_fn(l)


def _draw_covariates(dgp: DgpSpec, rng: np.random.Generator) -> np.ndarray:
    n = dgp.n
    if dgp.experiment == "exp1":
        l1 = rng.uniform(-2.0, 2.0, n)
        l2 = (rng.random(n) < 0.5).astype(float)
        return np.column_stack([l1, l2])
    if dgp.experiment == "exp2":
        l1 = rng.random(n)
        l2 = rng.random(n)
        return np.column_stack([l1, l2])
    cols = []
    for law in dgp.covariate_laws:
        name = law[0]
        if name == "uniform":
            cols.append(rng.uniform(float(law[1]), float(law[2]), n))
        elif name == "bernoulli":
            cols.append((rng.random(n) < float(law[1])).astype(float))
        elif name == "normal":
            cols.append(rng.normal(float(law[1]), float(law[2]), n))
        else:
            raise ParameterError(f"unknown covariate law {law!r}")
    return np.column_stack(cols)


def draw(dgp: DgpSpec, seed: int = 0) -> Dataset:
    """Simulate one dataset; deterministic given `seed`.

    Draw order is fixed: covariates (column by column), then the exposure
    uniforms, then the unit-variance outcome noise.
    """
    rng = rng_from(seed)
    l = _draw_covariates(dgp, rng)
    prob = dgp.propensity_fn()(l)
    if np.any((prob < 0) | (prob > 1)):
        raise ParameterError("propensity formula produced values outside [0, 1]")
    a = (rng.random(dgp.n) < prob).astype(float)
    y = dgp.theta_true * a + dgp.outcome_mean_fn()(l) + rng.standard_normal(dgp.n)
    return Dataset(y=y, a=a, l=l)


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    """Which nuisance estimators are (intended to be) consistent, plus the
    concrete learner bindings realising that intent."""

    which_consistent: str
    g_learner: LearnerSpec | OracleSpec
    m_learner: LearnerSpec | OracleSpec
    label: str = ""

    def __post_init__(self):
        if self.which_consistent not in SCENARIOS:
            raise ParameterError(
                f"unknown scenario {self.which_consistent!r}; choose from {SCENARIOS}"
            )

    def bindings(self) -> NuisancePair:
        return NuisancePair(g=self.g_learner, m=self.m_learner)


def misspecified_l1_spec(cv_folds: int = 5) -> LearnerSpec:
    """The deliberately inconsistent learner: l1-penalised (G)LM on main
    effects only, interaction terms omitted."""
    return LearnerSpec("penalized_l1", cv_folds=cv_folds, feature_transform=("drop_interactions",))


def standard_scenario(which_consistent: str, cv_folds: int = 5) -> ScenarioSpec:
    """Default bindings: consistent nuisance -> stacking ensemble,
    inconsistent nuisance -> the misspecified l1 learner."""
    stack = default_stack_spec(cv_folds=cv_folds)
    lasso = misspecified_l1_spec(cv_folds=cv_folds)
    if which_consistent == "both":
        g, m = stack, stack
    elif which_consistent == "ps_only":
        g, m = stack, lasso
    else:
        g, m = lasso, stack
    return ScenarioSpec(which_consistent, g, m, label=which_consistent)


def oracle_scenario(dgp: DgpSpec) -> ScenarioSpec:
    """True data-generating formulas plugged in as fixed-function nuisances
    (valid at theta0 = dgp.theta_true under the profile strategy)."""
    return ScenarioSpec(
        "both",
        OracleSpec(dgp.propensity_fn()),
        OracleSpec(dgp.outcome_mean_fn()),
        label="oracle",
    )


def oracle_decompose_bindings(dgp: DgpSpec) -> NuisancePair:
    """Oracle bindings for the decompose m-strategy: E(y|L) and E(a|L)."""
    return NuisancePair(
        g=OracleSpec(dgp.propensity_fn()),
        m=OracleSpec(
            partial(
                _oracle_y_mean,
                mean_fn=dgp.outcome_mean_fn(),
                prop_fn=dgp.propensity_fn(),
                theta=dgp.theta_true,
            )
        ),
    )


# ---------------------------------------------------------------------------
# experiment driver


@dataclass(frozen=True)
class MetricRow:
    kind: str
    n: int
    scenario: str
    bias: float
    root_n_bias: float
    size: float
    mc_var_ratio: float
    reps: int
    failures: int
    seed: int

    def __post_init__(self):
        if self.reps > 0 and not (0.0 <= self.size <= 1.0):
            raise ParameterError(f"size must be in [0, 1], got {self.size}")
        if self.reps <= 0:
            raise ParameterError("rep count must be positive")


@dataclass(frozen=True)
class MetricTable:
    rows: tuple[MetricRow, ...]
    config: dict[str, Any] = field(default_factory=dict)

    def row(self, kind: str, n: int) -> MetricRow:
        for r in self.rows:
            if r.kind == kind and r.n == n:
                return r
        raise KeyError((kind, n))

    def to_records(self) -> list[dict[str, Any]]:
        return [{col: getattr(r, col) for col in METRIC_COLUMNS} for r in self.rows]

    def to_csv_text(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(repr(getattr(r, col)) if isinstance(getattr(r, col), float)
                                  else str(getattr(r, col)) for col in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"


def _replication_worker(task: tuple) -> tuple[int, int, dict[str, Any]]:
    (dgp, scenario, kinds, n, rep, seed, k_folds, inner_fraction, kernel_cfg,
     m_strategy, nested_split, level) = task
    with threadpool_limits(limits=1):
        try:
            data = draw(replace(dgp, n=n), seed=child_seed(seed, n, rep, 1))
            plan = make_fold_plan(n, k_folds, inner_fraction, seed=child_seed(seed, n, rep, 2))
            results = cross_fit_scores(
                data,
                plan,
                dgp.theta_true,
                kinds,
                scenario.bindings(),
                kernel_cfg,
                seed=child_seed(seed, n, rep, 3),
                m_strategy=m_strategy,
                nested_split=nested_split,
            )
        except DrdmlError as exc:
            return n, rep, {"error": f"{type(exc).__name__}: {exc}"}
    records = {}
    for kind, res in results.items():
        records[kind] = {
            "u_bar": res.u_bar,
            "sigma2_hat": res.sigma2_hat,
            "standardized": res.standardized,
            "reject": bool(res.p_value < level),
        }
    return n, rep, records


def run_experiment(
    dgp: DgpSpec,
    scenario: ScenarioSpec,
    test_kinds,
    n_list,
    reps: int,
    k_folds: int = 5,
    seed: int = 0,
    *,
    inner_fraction: float = 0.5,
    level: float = 0.05,
    kernel_cfg: KernelSpec | None = None,
    m_strategy: str = "profile",
    nested_split: bool = True,
    threads: int = 1,
) -> MetricTable:
    """Monte Carlo study of the requested score tests at theta0 = theta_true.

    Per (kind, n) the table reports bias of the unscaled statistic,
    sqrt(n) * bias, empirical size at `level`, and the Monte Carlo variance
    of the scaled statistic over its mean estimated variance. Replications
    that raise are excluded and counted; more than 5% failures in a row is
    an error.
    """
    kinds = tuple(test_kinds)
    n_list = tuple(int(n) for n in n_list)
    if reps < 1:
        raise ParameterError(f"reps must be >= 1, got {reps}")
    kernel_cfg = kernel_cfg or KernelSpec()
    tasks = [
        (dgp, scenario, kinds, n, rep, seed, k_folds, inner_fraction, kernel_cfg,
         m_strategy, nested_split, level)
        for n in n_list
        for rep in range(reps)
    ]

    outcomes: dict[tuple[int, int], dict[str, Any]] = {}
    if threads > 1:
        chunk = max(1, len(tasks) // (threads * 8))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for n, rep, rec in pool.map(_replication_worker, tasks, chunksize=chunk):
                outcomes[(n, rep)] = rec
    else:
        for task in tasks:
            n, rep, rec = _replication_worker(task)
            outcomes[(n, rep)] = rec

    rows = []
    for n in n_list:
        failures = [
            outcomes[(n, rep)]["error"] for rep in range(reps) if "error" in outcomes[(n, rep)]
        ]
        if len(failures) > 0.05 * reps:
            raise ExperimentError(
                f"{len(failures)}/{reps} replications failed at n={n}; first: {failures[0]}"
            )
        for kind in kinds:
            recs = [
                outcomes[(n, rep)][kind] for rep in range(reps) if "error" not in outcomes[(n, rep)]
            ]
            u_bars = np.array([r["u_bar"] for r in recs])
            sigma2s = np.array([r["sigma2_hat"] for r in recs])
            rejects = np.array([r["reject"] for r in recs])
            stats = np.sqrt(n) * u_bars
            bias = float(u_bars.mean())
            mc_var_ratio = (
                float(stats.var(ddof=1) / sigma2s.mean()) if len(recs) > 1 else float("nan")
            )
            rows.append(
                MetricRow(
                    kind=kind,
                    n=n,
                    scenario=scenario.label or scenario.which_consistent,
                    bias=bias,
                    root_n_bias=float(np.sqrt(n) * bias),
                    size=float(rejects.mean()),
                    mc_var_ratio=mc_var_ratio,
                    reps=len(recs),
                    failures=len(failures),
                    seed=int(seed),
                )
            )
    config = {
        "experiment": dgp.experiment,
        "theta_true": dgp.theta_true,
        "scenario": scenario.which_consistent,
        "kinds": list(kinds),
        "n_list": list(n_list),
        "reps": reps,
        "k_folds": k_folds,
        "inner_fraction": inner_fraction,
        "level": level,
        "m_strategy": m_strategy,
        "nested_split": nested_split,
        "seed": int(seed),
    }
    return MetricTable(rows=tuple(rows), config=config)
