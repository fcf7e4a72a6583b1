import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from common_functions import (ConfigError, config_echo, config_line, load_config, load_schema, parse_matrix,
                              parse_vector, resolve_threads, schema_columns, setup_logging, validate_config_keys,
                              validate_record, write_csv)
from lyapunov import IossParams, default_params, min_horizon, bound_constants, check_lyapunov_decrease, sample_pairs, validate
from model import MODEL_REGISTRY, get_model
from sim import SimConfig, SimResult, alpha_sweep, compare_fixed_vs_varying, constraint_ablation, resolve_params, run
from solver import SolverConfig

BASE_PATH = os.path.dirname(os.path.abspath(__file__))

MODEL_OPTIONS = {
    "k1": float, "k2": float, "tau": float,
    "measurement_noise": float, "process_noise": float, "gravity": bool,
}
SIMULATION_KEYS = ("steps", "seed", "alpha", "scheme", "m", "noise", "noise_cutoff", "x0", "x_prior",
                   "inputs", "extra_constraint", "audit_prop1", "rmse")
ALLOWED_KEYS = {
    "model": ("name",) + tuple(MODEL_OPTIONS),
    "simulation": SIMULATION_KEYS,
    "params": ("p1", "p2", "q", "r", "eta"),
    "solver": tuple(f.name for f in fields(SolverConfig)),
    "sweep": ("alphas", "seeds"),
    "check": ("samples", "sample_seed", "box_lower", "box_upper", "simulate"),
    "output": ("out_dir", "csv", "svg", "messages"),
}


@dataclass(eq=False)
class RunSpec:
    """Resolved configuration of one CLI invocation."""

    sim: SimConfig
    out_dir: str = "output"
    csv: bool = True
    svg: bool = False
    messages: bool = False
    alphas: List[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 14.0])
    seeds: int = 10
    samples: int = 1000
    sample_seed: int = 0
    box_lower: Optional[np.ndarray] = None
    box_upper: Optional[np.ndarray] = None
    check_simulate: bool = False
    echo: Dict[str, Dict[str, object]] = field(default_factory=dict)
    source: Optional[str] = None

    def header(self) -> List[str]:
        return config_echo(self.echo)


def _get(config, section: str, key: str, path: Optional[str], convert, fallback=None):
    if not config.has_option(section, key):
        return fallback
    try:
        if convert is bool:
            return config.getboolean(section, key)
        if convert is int:
            return config.getint(section, key)
        if convert is float:
            return config.getfloat(section, key)
        return convert(config.get(section, key), f"{section}.{key}")
    except ConfigError as e:
        raise ConfigError(e.field, str(e).split(": ", 1)[-1], config_line(path, section, key)) from None
    except ValueError as e:
        raise ConfigError(f"{section}.{key}", str(e), config_line(path, section, key)) from None


def _as_tuple(arr) -> Optional[tuple]:
    return None if arr is None else tuple(float(v) for v in np.ravel(arr))


def _fmt(value) -> str:
    if isinstance(value, np.ndarray):
        return json.dumps(value.tolist())
    if isinstance(value, tuple):
        return json.dumps(list(value))
    return str(value)


def resolve_params_section(logger: logging.Logger, config, path: Optional[str], model_name: str, model) -> IossParams:
    """Bundled parameters of the model, overridden field by field from ``[params]``."""
    try:
        base = default_params(model_name, M=1)
    except ValueError:
        base = None
    values = {}
    for key, attr in (("p1", "P1"), ("p2", "P2"), ("q", "Q"), ("r", "R")):
        values[attr] = _get(config, "params", key, path, parse_matrix, getattr(base, attr, None))
        if values[attr] is None:
            raise ConfigError(f"params.{key}", f"required for model '{model_name}'", config_line(path, "params"))
    values["eta"] = _get(config, "params", "eta", path, float, getattr(base, "eta", None))
    if values["eta"] is None:
        raise ConfigError("params.eta", f"required for model '{model_name}'", config_line(path, "params"))
    try:
        params = IossParams(**values, alpha=0.0, M=1)
        report = validate(params, model)
    except ValueError as e:
        logger.error(f"Invalid parameters: {str(e)}")
        raise ConfigError("params", str(e), config_line(path, "params")) from None
    if not report.ok:
        logger.error(f"Invalid parameters: {'; '.join(report.failures)}")
        raise ConfigError("params", "; ".join(report.failures), config_line(path, "params"))
    return params


def resolve_spec(logger: logging.Logger, config, args, path: Optional[str] = None) -> RunSpec:
    """
    Turn a parsed INI file plus command-line overrides into a ``RunSpec``.

    Args:
        logger (logging.Logger): Logger instance.
        config (ConfigParser): Parsed configuration.
        args (argparse.Namespace): Command-line overrides.
        path (str): Source file, used for line numbers in diagnostics.

    Returns:
        RunSpec: The resolved configuration.

    Raises:
        ConfigError: On unknown keys, missing or invalid values.
    """
    validate_config_keys(logger, config, ALLOWED_KEYS, path)
    name = config.get("model", "name", fallback=None)
    if not name:
        raise ConfigError("model.name", "missing model name", config_line(path, "model"))
    if name not in MODEL_REGISTRY:
        raise ConfigError("model.name", f"unknown model '{name}'", config_line(path, "model", "name"))
    options = {}
    for key, convert in MODEL_OPTIONS.items():
        value = _get(config, "model", key, path, convert)
        if value is not None:
            options[key] = value
    try:
        model = get_model(name, **options)
    except TypeError as e:
        raise ConfigError("model", str(e), config_line(path, "model")) from None

    params = resolve_params_section(logger, config, path, name, model)

    solver_values = {}
    for f in fields(SolverConfig):
        convert = int if f.type in (int, "int") else float
        value = _get(config, "solver", f.name, path, convert)
        if value is not None:
            solver_values[f.name] = value
    try:
        solver = SolverConfig(**solver_values)
    except ValueError as e:
        raise ConfigError("solver", str(e), config_line(path, "solver")) from None

    s = "simulation"
    sim_values = dict(
        model=name,
        T=_get(config, s, "steps", path, int, 60),
        seed=_get(config, s, "seed", path, int, 0),
        alpha=_get(config, s, "alpha", path, float, 5.0),
        scheme=config.get(s, "scheme", fallback="fixed"),
        M=_get(config, s, "m", path, int),
        noise=_as_tuple(_get(config, s, "noise", path, parse_vector)),
        noise_cutoff=_get(config, s, "noise_cutoff", path, int),
        x0=_as_tuple(_get(config, s, "x0", path, parse_vector)),
        x_prior=_as_tuple(_get(config, s, "x_prior", path, parse_vector)),
        inputs=_as_tuple(_get(config, s, "inputs", path, parse_vector)),
        extra_constraint=_get(config, s, "extra_constraint", path, bool, True),
        audit_prop1=_get(config, s, "audit_prop1", path, int, 0),
        rmse=config.get(s, "rmse", fallback="norm"),
    )
    for key, attr in (("alpha", "alpha"), ("seed", "seed"), ("scheme", "scheme"), ("audit_prop1", "audit_prop1")):
        override = getattr(args, key, None)
        if override is not None:
            sim_values[attr] = override
    for key in ("x0", "x_prior"):
        if sim_values[key] is not None and len(sim_values[key]) != model.n_x:
            raise ConfigError(f"simulation.{key}", f"expected {model.n_x} values", config_line(path, s, key))
    if sim_values["inputs"] is not None and len(sim_values["inputs"]) != model.n_u:
        raise ConfigError("simulation.inputs", f"expected {model.n_u} values", config_line(path, s, "inputs"))
    if sim_values["noise"] is not None and len(sim_values["noise"]) != model.n_w:
        raise ConfigError("simulation.noise", f"expected {model.n_w} values", config_line(path, s, "noise"))
    try:
        sim = SimConfig(params=params, model_options=options, solver=solver, **sim_values)
        # fills M and warns early when it is below the minimum horizon
        resolved = resolve_params(sim)
    except ValueError as e:
        raise ConfigError(s, str(e), config_line(path, s)) from None

    run_spec = RunSpec(sim=sim, source=path)
    run_spec.out_dir = args.out or config.get("output", "out_dir", fallback="output")
    run_spec.csv = _get(config, "output", "csv", path, bool, True)
    run_spec.svg = bool(args.svg) or _get(config, "output", "svg", path, bool, False)
    run_spec.messages = _get(config, "output", "messages", path, bool, False)
    alphas = _get(config, "sweep", "alphas", path, parse_vector)
    if getattr(args, "alphas", None):
        try:
            alphas = [float(a) for a in args.alphas.split(",")]
        except ValueError:
            raise ConfigError("--alphas", f"not a comma-separated list: {args.alphas!r}") from None
    if alphas is not None:
        run_spec.alphas = [float(a) for a in alphas]
    run_spec.seeds = getattr(args, "seeds", None) or _get(config, "sweep", "seeds", path, int, run_spec.seeds)
    if run_spec.seeds < 1:
        raise ConfigError("sweep.seeds", "must be at least 1", config_line(path, "sweep", "seeds"))
    run_spec.samples = _get(config, "check", "samples", path, int, run_spec.samples)
    run_spec.sample_seed = _get(config, "check", "sample_seed", path, int, 0)
    run_spec.box_lower = _get(config, "check", "box_lower", path, parse_vector)
    run_spec.box_upper = _get(config, "check", "box_upper", path, parse_vector)
    run_spec.check_simulate = _get(config, "check", "simulate", path, bool, False)

    run_spec.echo = {
        "model": {"name": name, **options},
        "simulation": {k: v for k, v in sim_values.items() if k != "model" and v is not None},
        "params": {"p1": params.P1, "p2": params.P2, "q": params.Q, "r": params.R, "eta": params.eta,
                   "m": resolved.M},
        "solver": {f.name: getattr(solver, f.name) for f in fields(SolverConfig)},
    }
    run_spec.echo = {sec: {k: _fmt(v) for k, v in vals.items()} for sec, vals in run_spec.echo.items()}
    return run_spec


def _echo(run_spec: RunSpec) -> None:
    for line in run_spec.header():
        print(line)


def write_run_artifacts(logger: logging.Logger, run_spec: RunSpec, result: SimResult) -> List[str]:
    """Trajectory and event CSVs, optional message log and figures."""
    written = []
    n_x = result.truth.states.shape[1]
    header = run_spec.header()
    if run_spec.csv:
        schema = load_schema(logger, BASE_PATH, "run")
        bound = result.bound_check.bound if result.bound_check is not None else np.full(result.errors.size, np.nan)
        m_t = [0] + [r.M_t for r in result.records]
        flagged = [False] + [r.flagged for r in result.records]
        rows = []
        for t in range(result.errors.size):
            rows.append([t, *result.truth.states[t], *result.estimates[t], int(result.gamma[t]), m_t[t],
                         result.errors[t], bound[t], flagged[t]])
        written.append(write_csv(logger, os.path.join(run_spec.out_dir, "run.csv"),
                                 schema_columns(schema, {"x": n_x, "x_hat": n_x}), rows, header))
        schema = load_schema(logger, BASE_PATH, "gamma")
        rows = [[r.t, r.gamma, r.etm_lhs, r.etm_rhs, r.d_tilde, r.cost] for r in result.records]
        written.append(write_csv(logger, os.path.join(run_spec.out_dir, "gamma.csv"), schema_columns(schema),
                                 rows, header))
    if run_spec.messages:
        written.append(write_messages(logger, os.path.join(run_spec.out_dir, "messages.jsonl"), result.channel_log))
    if run_spec.svg:
        from plotting import plot_gamma, plot_states
        written.append(plot_states(logger, result, os.path.join(run_spec.out_dir, "states.svg")))
        written.append(plot_gamma(logger, result.gamma, os.path.join(run_spec.out_dir, "gamma.svg"),
                                  label=f"alpha={result.params.alpha:g}"))
    return written


def write_messages(logger: logging.Logger, path: str, log: Sequence[dict]) -> str:
    """One JSON object per channel message, each validated against its schema."""
    schemas = {"measurement": load_schema(logger, BASE_PATH, "measurement_msg"),
               "feedback": load_schema(logger, BASE_PATH, "feedback_msg")}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            record = {k: v for k, v in entry.items() if k != "kind"}
            validate_record(schemas[entry["kind"]], record)
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    logger.info(f"Wrote {len(log)} messages to {path}")
    return path


def cmd_simulate(logger: logging.Logger, run_spec: RunSpec) -> int:
    sim = replace(run_spec.sim, keep_messages=run_spec.messages)
    result = run(sim)
    write_run_artifacts(logger, run_spec, result)
    print(f"events={result.events} rmse={result.rmse:.6g} flagged={len(result.flagged_times)}")
    if result.audit_diffs:
        print(f"prop1_audit_max_diff={max(result.audit_diffs.values()):.3g}")
    if result.bound_check is not None:
        print(f"bound_violations={len(result.bound_check.violation_times)} "
              f"unexplained={len(result.bound_check.unexplained)}")
    return 0


def cmd_sweep(logger: logging.Logger, run_spec: RunSpec) -> int:
    threads = resolve_threads(logger)
    sweep = alpha_sweep(logger, run_spec.sim, run_spec.alphas, list(range(run_spec.seeds)), threads)
    if run_spec.csv:
        schema = load_schema(logger, BASE_PATH, "sweep_summary")
        write_csv(logger, os.path.join(run_spec.out_dir, "sweep_summary.csv"), schema_columns(schema),
                  sweep.summary, run_spec.header())
        schema = load_schema(logger, BASE_PATH, "sweep_runs")
        write_csv(logger, os.path.join(run_spec.out_dir, "sweep_runs.csv"), schema_columns(schema),
                  sweep.runs, run_spec.header())
    for alpha, mean_events, std_events, mean_rmse in sweep.summary:
        print(f"alpha={alpha:g} mean_events={mean_events:.2f} std_events={std_events:.2f} mean_rmse={mean_rmse:.6g}")
    return 0


def cmd_check(logger: logging.Logger, run_spec: RunSpec) -> int:
    params = resolve_params(run_spec.sim)
    model = get_model(run_spec.sim.model, **run_spec.sim.model_options)
    for scheme in ("fixed", "varying"):
        M_min, rho = min_horizon(params, scheme)
        marker = " *" if scheme == run_spec.sim.scheme else ""
        print(f"scheme={scheme} M_min={M_min} rho={rho:.6g}{marker}")
    M_min, _ = min_horizon(params, run_spec.sim.scheme)
    if params.M >= M_min:
        c = bound_constants(params, run_spec.sim.scheme)
        print(f"M={params.M} rho={c.rho:.6g} c_init={c.c_init:.6g} c_dist={c.c_dist:.6g}")
    else:
        print(f"M={params.M} below M_min={M_min}: no stability guarantee")

    if run_spec.box_lower is not None and run_spec.box_upper is not None:
        samples = sample_pairs(model, run_spec.samples, run_spec.box_lower, run_spec.box_upper,
                               seed=run_spec.sample_seed, inputs=run_spec.sim.inputs)
        report = check_lyapunov_decrease(model, params, samples)
        print(f"lyapunov_samples={report.n_samples} violations={report.violations} "
              f"worst_margin={report.worst_margin:.6g}")

    if run_spec.check_simulate and params.M >= M_min:
        result = run(run_spec.sim)
        check = result.bound_check
        print(f"bound_violations={len(check.violation_times)} unexplained={len(check.unexplained)} "
              f"max_ratio={check.max_ratio:.6g}")
    return 0


def cmd_compare(logger: logging.Logger, run_spec: RunSpec) -> int:
    threads = resolve_threads(logger)
    result = compare_fixed_vs_varying(logger, run_spec.sim, list(range(run_spec.seeds)), threads)
    if run_spec.csv:
        schema = load_schema(logger, BASE_PATH, "compare")
        write_csv(logger, os.path.join(run_spec.out_dir, "compare.csv"), schema_columns(schema),
                  result.rows, run_spec.header())
    print(f"varying_wins={result.win_fraction:.3f} mean_improvement={result.mean_improvement:.4f}")
    return 0


def cmd_ablation(logger: logging.Logger, run_spec: RunSpec) -> int:
    threads = resolve_threads(logger)
    result = constraint_ablation(logger, run_spec.sim, list(range(run_spec.seeds)), threads)
    if run_spec.csv:
        schema = load_schema(logger, BASE_PATH, "ablation")
        write_csv(logger, os.path.join(run_spec.out_dir, "ablation.csv"), schema_columns(schema),
                  result.rows, run_spec.header())
    print(f"changed={result.fraction_changed:.3f} reduced={result.fraction_reduced:.3f} "
          f"mean_relative_change={result.mean_relative_change:.4f}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "check": cmd_check,
    "compare": cmd_compare,
    "ablation": cmd_ablation,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etmhe", description="Event-triggered moving horizon estimation experiments")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=os.path.join(BASE_PATH, "config.ini"), help="INI experiment file")
    parser.add_argument("--alpha", type=float, help="trigger threshold scaling")
    parser.add_argument("--seed", type=int, help="noise seed")
    parser.add_argument("--scheme", choices=("fixed", "varying"), help="horizon scheme")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--svg", action="store_true", help="also write SVG figures")
    parser.add_argument("--audit-prop1", dest="audit_prop1", type=int,
                        help="re-solve every N-th no-event step explicitly and compare")
    parser.add_argument("--alphas", help="comma-separated alpha list for sweep")
    parser.add_argument("--seeds", type=int, help="number of seeds for sweep, compare and ablation")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        logger = setup_logging()
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    try:
        config = load_config(logger, args.config)
        run_spec = resolve_spec(logger, config, args, args.config)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        logger.error(f"Invalid configuration: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return 2

    _echo(run_spec)
    try:
        return COMMANDS[args.command](logger, run_spec)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError) as e:
        logger.error(f"Solver failure in {args.command}: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
