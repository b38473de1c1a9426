"""Command-line front end.

Two modes driven by a JSON config file (flags override file values):

  drdml --mode analyze  --config cfg.json   # test/CI on a CSV dataset
  drdml --mode simulate --config cfg.json   # Monte Carlo experiment

Outputs are written atomically (temp file + rename): nothing is left
behind on failure. Exit codes: 0 success, 2 validation error, 3 numerical
failure. All randomness flows from the single config seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Any

from .dataset import load_csv, make_fold_plan
from .errors import NUMERICAL_ERRORS, VALIDATION_ERRORS, ParameterError, SchemaError
from .inference import SearchConfig, invert_test
from .kernel import KernelSpec
from .learners import LearnerSpec, default_stack_spec
from .score import TEST_KINDS, NuisancePair, cross_fit_scores
from .simulate import SCENARIOS, DgpSpec, run_experiment, standard_scenario

__all__ = ["main", "cmd_analyze", "cmd_simulate", "RunConfig"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


@dataclass
class RunConfig:
    """Fully resolved run configuration; serialised next to the outputs so a
    run can be reproduced from its own records."""

    mode: str
    seed: int
    out: str
    threads: int = 1
    analyze: dict[str, Any] = field(default_factory=dict)
    simulate: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "mode": self.mode,
            "seed": self.seed,
            "out": self.out,
            "threads": self.threads,
        }
        if self.mode == "analyze":
            payload["analyze"] = self.analyze
        else:
            payload["simulate"] = self.simulate
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".drdml-tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _learner_from_dict(raw: Any) -> LearnerSpec:
    if raw is None:
        return default_stack_spec()
    if isinstance(raw, str):
        if raw == "stack":
            return default_stack_spec()
        return LearnerSpec(raw)
    if not isinstance(raw, dict):
        raise SchemaError(f"learner spec must be a string or object, got {type(raw).__name__}")
    hp = dict(raw.get("hyperparameters", {}))
    if raw.get("kind") == "stack" and "members" in hp:
        hp["members"] = tuple(_learner_from_dict(m) for m in hp["members"])
    for key in ("penalty_grid", "k_grid", "bandwidth_factors"):
        if key in hp:
            hp[key] = tuple(hp[key])
    return LearnerSpec(
        kind=raw.get("kind", "stack"),
        hyperparameters=hp,
        cv_folds=int(raw.get("cv_folds", 5)),
        feature_transform=tuple(raw.get("feature_transform", ())),
    )


def _kernel_from_dict(raw: Any) -> KernelSpec:
    if raw is None:
        return KernelSpec()
    bandwidth = raw.get("bandwidth", "cv")
    if not isinstance(bandwidth, str):
        bandwidth = float(bandwidth)
    return KernelSpec(
        kernel=raw.get("kernel", "epanechnikov"),
        bandwidth=bandwidth,
        bandwidth_grid=tuple(raw.get("bandwidth_grid", ())),
        cv_folds=int(raw.get("cv_folds", 5)),
    )


def _dgp_from_dict(raw: dict) -> DgpSpec:
    return DgpSpec(
        experiment=raw.get("experiment", "exp1"),
        theta_true=float(raw.get("theta_true", 0.0)),
        n=int(raw.get("n", 1000)),
        covariate_laws=tuple(tuple(law) for law in raw.get("covariates", ())),
        propensity=raw.get("propensity", ""),
        outcome_mean=raw.get("outcome_mean", ""),
    )


def _check_kinds(kinds) -> tuple[str, ...]:
    kinds = tuple(kinds)
    if not kinds:
        raise SchemaError("at least one test kind is required")
    for kind in kinds:
        if kind not in TEST_KINDS:
            raise SchemaError(f"invalid test kind {kind!r}; allowed kinds: {', '.join(TEST_KINDS)}")
    return kinds


def _json_default(value):
    return repr(value)


def _records_to_ndjson(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, default=_json_default) + "\n" for r in records)


def cmd_analyze(config: RunConfig) -> int:
    cfg = config.analyze
    schema = cfg.get("schema")
    if not isinstance(schema, dict):
        raise SchemaError("analyze.schema must map 'y', 'a' and 'covariates' to column names")
    data = load_csv(cfg["data"], schema)
    k_folds = int(cfg.get("k_folds", 5))
    inner_fraction = float(cfg.get("inner_fraction", 0.5))
    nested_split = bool(cfg.get("nested_split", True))
    m_strategy = cfg.get("m_strategy", "profile")
    kinds = _check_kinds(cfg.get("kinds", ("drdml",)))
    learners_cfg = cfg.get("learners", {})
    pair = NuisancePair(
        g=_learner_from_dict(learners_cfg.get("g")),
        m=_learner_from_dict(learners_cfg.get("m")),
    )
    kernel_cfg = _kernel_from_dict(cfg.get("kernel"))
    plan = make_fold_plan(data.n, k_folds, inner_fraction, seed=config.seed)

    records: list[dict] = []
    if cfg.get("invert", False):
        level = float(cfg.get("level", 0.95))
        search_raw = cfg.get("search", {})
        search = SearchConfig(
            center=search_raw.get("center"),
            half_width=search_raw.get("half_width"),
            grid_size=int(search_raw.get("grid_size", 81)),
            tol=float(search_raw.get("tol", 1e-4)),
        )
        for kind in kinds:
            cs = invert_test(
                data,
                plan,
                kind,
                level,
                search,
                pair,
                kernel_cfg,
                seed=config.seed,
                m_strategy=m_strategy,
                nested_split=nested_split,
            )
            records.append(
                {
                    "record": "confidence_set",
                    "kind": kind,
                    "point": cs.point,
                    "lower": cs.lower,
                    "upper": cs.upper,
                    "level": cs.level,
                    "bracketing_ok": cs.bracketing_ok,
                    "multiple_crossings": cs.multiple_crossings,
                }
            )
            records.extend(
                {"record": "grid", "kind": kind, "theta": theta, "standardized": value}
                for theta, value in cs.grid
            )
    else:
        if "theta0" not in cfg:
            raise SchemaError("analyze needs either theta0 or invert=true")
        theta0 = float(cfg["theta0"])
        results = cross_fit_scores(
            data,
            plan,
            theta0,
            kinds,
            pair,
            kernel_cfg,
            seed=config.seed,
            m_strategy=m_strategy,
            nested_split=nested_split,
        )
        for kind in kinds:
            res = results[kind]
            records.append(
                {
                    "record": "score_test",
                    "kind": kind,
                    "theta0": res.theta0,
                    "u_bar": res.u_bar,
                    "sigma2_hat": res.sigma2_hat,
                    "standardized": res.standardized,
                    "p_value": res.p_value,
                }
            )

    _atomic_write(config.out, _records_to_ndjson(records))
    _atomic_write(config.out + ".config.json", config.to_json())
    return EXIT_OK


def cmd_simulate(config: RunConfig) -> int:
    cfg = config.simulate
    dgp = _dgp_from_dict(cfg.get("dgp", {"experiment": cfg.get("experiment", "exp1")}))
    scenario_name = cfg.get("scenario", "both")
    if scenario_name not in SCENARIOS:
        raise SchemaError(
            f"invalid scenario {scenario_name!r}; allowed scenarios: {', '.join(SCENARIOS)}"
        )
    kinds = _check_kinds(cfg.get("kinds", TEST_KINDS))
    table = run_experiment(
        dgp,
        standard_scenario(scenario_name),
        kinds,
        n_list=tuple(int(n) for n in cfg.get("n_list", (250, 1000))),
        reps=int(cfg.get("reps", 200)),
        k_folds=int(cfg.get("k_folds", 5)),
        seed=config.seed,
        inner_fraction=float(cfg.get("inner_fraction", 0.5)),
        level=float(cfg.get("level", 0.05)),
        kernel_cfg=_kernel_from_dict(cfg.get("kernel")),
        m_strategy=cfg.get("m_strategy", "profile"),
        nested_split=bool(cfg.get("nested_split", True)),
        threads=config.threads,
    )

    base = config.out
    _atomic_write(base + ".csv", table.to_csv_text())
    _atomic_write(base + ".ndjson", _records_to_ndjson(table.to_records()))
    metrics = ("bias", "root_n_bias", "size", "mc_var_ratio")
    figure_lines = ["n,kind,metric,value"]
    for row in table.rows:
        for metric in metrics:
            figure_lines.append(f"{row.n},{row.kind},{metric},{getattr(row, metric)!r}")
    _atomic_write(base + "_figure.csv", "\n".join(figure_lines) + "\n")
    _atomic_write(base + ".config.json", config.to_json())
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drdml",
        description="Doubly robust score tests for the partially linear model.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--mode", choices=("analyze", "simulate"))
    parser.add_argument("--seed", type=int, help="master seed (required; no wall-clock default)")
    parser.add_argument("--threads", type=int, help="worker pool size (env DRDML_THREADS fallback)")
    parser.add_argument("--out", help="output path (analyze) or prefix (simulate)")
    parser.add_argument("--theta0", type=float, help="null value to test (analyze)")
    parser.add_argument("--invert", action="store_true", help="invert the test for a CI (analyze)")
    parser.add_argument("--level", type=float, help="confidence/nominal level")
    parser.add_argument("--folds", type=int, help="number of cross-fitting folds")
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    file_cfg: dict[str, Any] = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as handle:
                file_cfg = json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{args.config}: invalid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise SchemaError(f"{args.config}: top-level config must be an object")

    mode = args.mode or file_cfg.get("mode")
    if mode not in ("analyze", "simulate"):
        raise SchemaError("mode must be 'analyze' or 'simulate' (flag --mode or config key)")
    seed = args.seed if args.seed is not None else file_cfg.get("seed")
    if seed is None:
        raise SchemaError("a seed is mandatory (flag --seed or config key 'seed')")
    out = args.out or file_cfg.get("out")
    if not out:
        raise SchemaError("an output path is required (flag --out or config key 'out')")

    threads = args.threads
    if threads is None:
        threads = file_cfg.get("threads")
    if threads is None:
        threads = int(os.environ.get("DRDML_THREADS", os.cpu_count() or 1))
    if threads < 1:
        raise ParameterError(f"threads must be >= 1, got {threads}")

    analyze = dict(file_cfg.get("analyze", {}))
    simulate = dict(file_cfg.get("simulate", {}))
    section = analyze if mode == "analyze" else simulate
    if args.theta0 is not None:
        section["theta0"] = args.theta0
    if args.invert:
        section["invert"] = True
    if args.level is not None:
        section["level"] = args.level
    if args.folds is not None:
        section["k_folds"] = args.folds

    return RunConfig(
        mode=mode,
        seed=int(seed),
        out=str(out),
        threads=int(threads),
        analyze=analyze,
        simulate=simulate,
    )


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        if config.mode == "analyze":
            return cmd_analyze(config)
        return cmd_simulate(config)
    except VALIDATION_ERRORS as exc:
        print(f"drdml: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, KeyError, TypeError, ValueError) as exc:
        print(f"drdml: validation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NUMERICAL_ERRORS as exc:
        print(f"drdml: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
