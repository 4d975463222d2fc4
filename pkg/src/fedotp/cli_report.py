"""Config loading, the experiment command line, and result exporters."""

import argparse
import configparser
import dataclasses
import json
import os
import pathlib
import sys

import numpy as np

from .alignment import MatchingMode, Variant, forward_batch, grad_prompts
from .encoders import FeatureMap, init_prompts, make_text_encoder
from .fed_runtime import MODES, ConfigInvalid, aggregate_global, run_experiment
from .ot_core import (
    SolverConfig,
    TransportProblem,
    brute_force_ot_oracle,
    solve_dykstra_unbalanced,
    solve_sinkhorn,
    wasserstein_distance,
)

CURVE_HEADER = "round,mean_acc,std_acc,mean_loss,solver_mean_iters"
GAMMA_GRID = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)
SHOT_GRID = (1, 2, 4, 8, 16)
SUPPORT_THRESHOLD = 1e-4
OUTPUT_DIR_ENV = "FEDOTP_OUTPUT_DIR"


class ParseError(ValueError):
    pass


class UnknownKey(ValueError):
    pass


class InvalidValue(ValueError):
    pass


class IoError(OSError):
    pass


class GridMismatch(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Flat bag of every knob an experiment run reads.

    Field names double as the config-file keys.  Defaults are the desk-scale
    setup the regression fixtures were recorded against.
    """

    seed: int = 0
    mode: str = "fedotp"
    rounds: int = 10
    local_epochs: int = 5
    lr: float = 0.001
    batch_size: int = 32
    eval_batch: int = 100
    fraction: float = 1.0
    gamma: float = 0.8
    lam: float = 0.1
    tau: float = 0.07
    max_iter: int = 100
    epsilon: float = 1e-3
    num_classes: int = 10
    patches_per_sample: int = 16
    raw_dim: int = 16
    core_fraction: float = 0.5
    noise_std: float = 0.1
    num_domains: int = 1
    shots_per_class: int = 8
    samples_per_class: int = 40
    scheme: str = "pathological"
    num_clients: int = 10
    classes_per_client: int = 2
    dirichlet_alpha: float = 0.3
    dirichlet_alpha_domain: float = 0.1
    prompt_len: int = 16
    prompt_dim: int = 32
    feature_dim: int = 24
    output_dir: str = "results"


@dataclasses.dataclass(frozen=True)
class CurvePoint:
    round: int
    mean_acc: float
    std_acc: float
    mean_loss: float
    solver_mean_iters: float


_SCHEMES = ("pathological", "dirichlet", "domain", "domain_dirichlet")

# key -> (converter, predicate, requirement text); conversion or predicate
# failure raises InvalidValue naming the key
_SCHEMA = {
    "seed": (int, lambda v: v >= 0, "a nonnegative integer"),
    "mode": (str, lambda v: v in MODES,
             "one of " + ", ".join(sorted(MODES))),
    "rounds": (int, lambda v: v >= 0, "an integer >= 0"),
    "local_epochs": (int, lambda v: v >= 0, "an integer >= 0"),
    "lr": (float, lambda v: v >= 0, "a float >= 0"),
    "batch_size": (int, lambda v: v >= 1, "an integer >= 1"),
    "eval_batch": (int, lambda v: v >= 1, "an integer >= 1"),
    "fraction": (float, lambda v: 0 < v <= 1, "a float in (0, 1]"),
    "gamma": (float, lambda v: 0 < v <= 1, "a float in (0, 1]"),
    "lam": (float, lambda v: v > 0, "a float > 0"),
    "tau": (float, lambda v: v > 0, "a float > 0"),
    "max_iter": (int, lambda v: v >= 1, "an integer >= 1"),
    "epsilon": (float, lambda v: v > 0, "a float > 0"),
    "num_classes": (int, lambda v: v >= 2, "an integer >= 2"),
    "patches_per_sample": (int, lambda v: v >= 1, "an integer >= 1"),
    "raw_dim": (int, lambda v: v >= 1, "an integer >= 1"),
    "core_fraction": (float, lambda v: 0 < v <= 1, "a float in (0, 1]"),
    "noise_std": (float, lambda v: v >= 0, "a float >= 0"),
    "num_domains": (int, lambda v: v >= 1, "an integer >= 1"),
    "shots_per_class": (int, lambda v: v >= 1, "an integer >= 1"),
    "samples_per_class": (int, lambda v: v >= 2, "an integer >= 2"),
    "scheme": (str, lambda v: v in _SCHEMES,
               "one of " + ", ".join(_SCHEMES)),
    "num_clients": (int, lambda v: v >= 1, "an integer >= 1"),
    "classes_per_client": (int, lambda v: v >= 1, "an integer >= 1"),
    "dirichlet_alpha": (float, lambda v: v > 0, "a float > 0"),
    "dirichlet_alpha_domain": (float, lambda v: v > 0, "a float > 0"),
    "prompt_len": (int, lambda v: v >= 1, "an integer >= 1"),
    "prompt_dim": (int, lambda v: v >= 1, "an integer >= 1"),
    "feature_dim": (int, lambda v: v >= 1, "an integer >= 1"),
    "output_dir": (str, lambda v: len(v) > 0, "a nonempty path"),
}

assert set(_SCHEMA) == {f.name for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key, raw):
    conv, ok, want = _SCHEMA[key]
    try:
        value = conv(raw)
    except (TypeError, ValueError):
        raise InvalidValue(
            f"invalid value for {key!r}: {raw!r} (expected {want})") from None
    if not ok(value):
        raise InvalidValue(
            f"invalid value for {key!r}: {raw!r} (expected {want})")
    return value


def load_config(path):
    """Parse a flat key=value file; missing keys fall back to the defaults.

    Keys may live in any [section] (sections carry no meaning); a bare
    key=value document is accepted too.  Unknown keys are a hard error, as
    are out-of-range or unparseable values.
    """
    try:
        text = pathlib.Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config file {path!r}: {exc}") from exc
    body = text
    if text.strip() and not text.lstrip().startswith("["):
        body = "[experiment]\n" + text
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(body)
    except configparser.Error as exc:
        raise ParseError(f"cannot parse config file {path!r}: {exc}") from exc
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in _SCHEMA:
                raise UnknownKey(f"unknown config key: {key!r}")
            values[key] = _coerce(key, raw)
    return ExperimentConfig(**values)


def serialize_config(config):
    """Render a config as the same flat text load_config reads.

    Floats use repr, so parse -> serialize -> parse is an identity.
    """
    lines = ["[experiment]"]
    for field in dataclasses.fields(ExperimentConfig):
        lines.append(f"{field.name} = {getattr(config, field.name)}")
    return "\n".join(lines) + "\n"


def _write_text(path, text):
    try:
        pathlib.Path(path).write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path!r}: {exc}") from exc


def export_curves(reports, path):
    """Write one CSV row per round; fixed 6-decimal formatting."""
    reports = list(reports)
    if not reports:
        raise ValueError("export_curves needs at least one round report")
    lines = [CURVE_HEADER]
    prev = None
    for rep in reports:
        if prev is not None and rep.round_index <= prev:
            raise ValueError("round indices must be strictly increasing")
        prev = rep.round_index
        lines.append("%d,%.6f,%.6f,%.6f,%.6f" % (
            rep.round_index, rep.mean_accuracy, rep.std_accuracy,
            rep.mean_loss, rep.solver_mean_iters))
    _write_text(path, "\n".join(lines) + "\n")


def read_curves(path):
    try:
        text = pathlib.Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path!r}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != CURVE_HEADER:
        raise ParseError(f"{path!r} is not a curve file (bad header)")
    points = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise ParseError(f"malformed curve row: {ln!r}")
        try:
            points.append(CurvePoint(int(parts[0]), *map(float, parts[1:])))
        except ValueError:
            raise ParseError(f"malformed curve row: {ln!r}") from None
    for a, b in zip(points, points[1:]):
        if b.round <= a.round:
            raise ParseError("round indices must be strictly increasing")
    return points


def plan_support_size(plan_matrix, threshold=SUPPORT_THRESHOLD):
    """Number of coupling cells carrying visible mass."""
    return int((np.asarray(plan_matrix) > threshold).sum())


def export_plan(plan, patch_grid, path, lam=None):
    """Dump a solved two-column coupling as heatmap-ready grids.

    The columns (global prompt, local prompt) are reshaped row-major to
    ``patch_grid``.  Transported mass is recovered from the plan itself;
    ``lam`` is recorded as given since the plan does not carry it.
    """
    rows, cols = int(patch_grid[0]), int(patch_grid[1])
    arr = np.asarray(plan.plan, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GridMismatch(
            f"expected a (V, 2) coupling, got shape {arr.shape}")
    if rows < 1 or cols < 1 or rows * cols != arr.shape[0]:
        raise GridMismatch(
            f"grid {rows}x{cols} does not tile {arr.shape[0]} patches")
    doc = {
        "gamma": float(arr.sum()),
        "lam": None if lam is None else float(lam),
        "converged": bool(plan.converged),
        "iterations": int(plan.iterations),
        "grid": [rows, cols],
        "global_column": arr[:, 0].reshape(rows, cols).tolist(),
        "local_column": arr[:, 1].reshape(rows, cols).tolist(),
    }
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def export_summary(summary, path):
    doc = dataclasses.asdict(summary)
    doc["per_client_accuracy"] = list(doc["per_client_accuracy"])
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------- verify

def _verify_oracle(report):
    rng = np.random.default_rng(20260822)
    cfg = SolverConfig(max_iter=150000, epsilon=1e-9, denom_floor=1e-300)
    worst = 0.0
    for i in range(20):
        v = 2 + i % 4
        gamma = (0.5, 0.8, 1.0)[i % 3]
        cost = rng.uniform(0.0, 1.0, size=(v, 2))
        alpha = rng.uniform(0.5, 1.5, size=v)
        alpha = alpha / alpha.sum()
        beta = np.full(2, gamma / 2)
        prob = TransportProblem(cost, alpha, beta, lam=0.01, gamma=gamma)
        got = solve_dykstra_unbalanced(prob, cfg)
        want = brute_force_ot_oracle(prob)
        gap = abs(wasserstein_distance(got, cost) - want.objective)
        bound = 0.02 * gamma * cost.max()
        worst = max(worst, gap / bound)
        col_err = np.abs(got.plan.sum(axis=0) - beta).max()
        row_err = np.maximum(got.plan.sum(axis=1) - alpha, 0.0).max()
        if gap > bound or col_err > 1e-6 or row_err > 1e-6:
            report(f"oracle gap: FAIL (instance {i}, gap {gap:.3e})")
            return False
    report(f"oracle gap: ok (20 instances, worst {worst:.3f} of bound)")
    return True


def _verify_balanced(report):
    rng = np.random.default_rng(7)
    cfg = SolverConfig(max_iter=5000, epsilon=1e-10, denom_floor=1e-300)
    worst = 0.0
    for _ in range(20):
        v = 5
        cost = rng.uniform(0.0, 1.0, size=(v, 2))
        alpha = rng.uniform(0.5, 1.5, size=v)
        alpha = 0.9 * alpha / alpha.sum()
        gamma = float(alpha.sum())
        beta = rng.uniform(0.5, 1.5, size=2)
        beta = gamma * beta / beta.sum()
        prob = TransportProblem(cost, alpha, beta, lam=0.1, gamma=gamma)
        relaxed = solve_dykstra_unbalanced(prob, cfg)
        balanced = solve_sinkhorn(prob, cfg)
        worst = max(worst, np.abs(relaxed.plan - balanced.plan).max())
    ok = worst <= 1e-4
    report(f"balanced reduction: {'ok' if ok else 'FAIL'} "
           f"(20 instances, worst {worst:.2e})")
    return ok


def _fd_loss(batch, prompts, mode, tenc, cfg, block, idx, h):
    probe = prompts.copy()
    getattr(probe, block).flat[idx] += h
    return forward_batch(batch, probe, mode, tenc, cfg).loss


def _verify_gradients(report):
    tenc = make_text_encoder(1, num_classes=3, s=4, d_l=8, d_f=12)
    # batch seed picked so every cost gap clears lam by a wide factor; a
    # generic draw often has near-ties where the fixed-plan gradient is not
    # expected to match finite differences
    rng = np.random.default_rng([17, 7])
    batch = []
    for i in range(6):
        raw = rng.normal(size=(5, 12))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        batch.append((FeatureMap(patches=raw, class_token=raw[0]), i % 3))
    prompts = init_prompts(1, s=4, d_l=8)
    cfg = SolverConfig(max_iter=2000, epsilon=1e-12, denom_floor=1e-300)
    cases = [
        (Variant.SIMILARITY_AVG, 1e-5),
        (Variant.UNBALANCED_OT, 1e-2),
        (Variant.CLASSICAL_OT, 1e-2),
    ]
    all_ok = True
    for variant, tol in cases:
        mode = MatchingMode(variant=variant, gamma=0.8, lam=0.005, tau=0.07)
        g_g, g_l = grad_prompts(batch, prompts, mode, tenc, cfg)
        grads = {"global_prompt": g_g, "local_prompt": g_l}
        floor = 1e-3 * max(np.abs(g_g).max(), np.abs(g_l).max())
        coord_rng = np.random.default_rng(23)
        worst = 0.0
        for block, grad in grads.items():
            for idx in coord_rng.choice(grad.size, size=5, replace=False):
                step = 1e-4
                f = [_fd_loss(batch, prompts, mode, tenc, cfg, block, idx, m)
                     for m in (step, -step, 2 * step, -2 * step)]
                fd = (8 * (f[0] - f[1]) - (f[2] - f[3])) / (12 * step)
                an = grad.flat[idx]
                rel = abs(fd - an) / max(abs(fd), abs(an), floor)
                worst = max(worst, rel)
        ok = worst <= tol
        all_ok = all_ok and ok
        report(f"gradient {variant.name.lower()}: {'ok' if ok else 'FAIL'} "
               f"(worst rel {worst:.2e}, tol {tol:.0e})")
    return all_ok


def _verify_aggregation(report):
    p = np.arange(6.0).reshape(2, 3)
    ok = (np.array_equal(aggregate_global([(0, p, 3)]), p)
          and np.array_equal(aggregate_global([(0, p, 2), (1, -p, 2)]),
                             np.zeros_like(p))
          and np.array_equal(
              aggregate_global([(0, p, 1), (1, 3 * p, 3)]), 2.5 * p))
    report(f"aggregation law: {'ok' if ok else 'FAIL'}")
    return ok


def run_verify(report=print):
    """Self-check against the exact LP oracle plus finite differences."""
    results = [
        _verify_oracle(report),
        _verify_balanced(report),
        _verify_gradients(report),
        _verify_aggregation(report),
    ]
    return all(results)


# ------------------------------------------------------------------------ CLI

def _resolve_outdir(args, config):
    if getattr(args, "output_dir", None):
        return pathlib.Path(args.output_dir)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return pathlib.Path(env)
    return pathlib.Path(config.output_dir)


def _load_for(args, parser):
    if args.config is None:
        parser.print_usage(sys.stderr)
        print("error: a --config path is required", file=sys.stderr)
        return None
    return load_config(args.config)


def _run_one(config, outdir, stem):
    result = run_experiment(config)
    outdir.mkdir(parents=True, exist_ok=True)
    if result.reports:
        export_curves(result.reports, outdir / f"{stem}.csv")
    export_summary(result.summary, outdir / f"{stem}_summary.json")
    return result


def _cmd_run(args, parser):
    config = _load_for(args, parser)
    if config is None:
        return 1
    outdir = _resolve_outdir(args, config)
    result = _run_one(config, outdir, "curves")
    s = result.summary
    print(f"mode={s.mode} rounds={s.rounds_completed} "
          f"mean_acc={s.mean_accuracy:.4f} mean_loss={s.mean_loss:.4f}")
    return 0


def _cmd_sweep_gamma(args, parser):
    config = _load_for(args, parser)
    if config is None:
        return 1
    outdir = _resolve_outdir(args, config)
    for gamma in GAMMA_GRID:
        cfg = dataclasses.replace(config, gamma=gamma)
        result = _run_one(cfg, outdir, f"curves_gamma_{gamma:.1f}")
        print(f"gamma={gamma:.1f} "
              f"mean_acc={result.summary.mean_accuracy:.4f}")
    return 0


def _cmd_sweep_shots(args, parser):
    config = _load_for(args, parser)
    if config is None:
        return 1
    outdir = _resolve_outdir(args, config)
    for shots in SHOT_GRID:
        if shots >= config.samples_per_class:
            raise InvalidValue(
                f"invalid value for 'shots_per_class': {shots} needs "
                f"samples_per_class > {shots}")
        cfg = dataclasses.replace(config, shots_per_class=shots)
        result = _run_one(cfg, outdir, f"curves_shots_{shots}")
        print(f"shots={shots} mean_acc={result.summary.mean_accuracy:.4f}")
    return 0


def _cmd_solve(args, parser):
    try:
        text = pathlib.Path(args.input).read_text()
    except OSError as exc:
        raise IoError(f"cannot read instance file {args.input!r}: {exc}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"cannot parse instance file {args.input!r}: {exc}")
    for key in ("cost", "alpha", "beta", "lam"):
        if key not in doc:
            raise InvalidValue(f"instance file is missing key {key!r}")
    problem = TransportProblem(
        np.asarray(doc["cost"], dtype=np.float64),
        np.asarray(doc["alpha"], dtype=np.float64),
        np.asarray(doc["beta"], dtype=np.float64),
        lam=float(doc["lam"]),
    )
    cfg = SolverConfig(max_iter=int(doc.get("max_iter", 100)),
                       epsilon=float(doc.get("epsilon", 1e-3)))
    if doc.get("balanced", False):
        plan = solve_sinkhorn(problem, cfg)
    else:
        plan = solve_dykstra_unbalanced(problem, cfg)
    print(f"objective={plan.objective:.6f} iterations={plan.iterations} "
          f"converged={plan.converged}")
    if args.plan_out:
        grid = args.grid or (problem.cost.shape[0], 1)
        export_plan(plan, grid, args.plan_out, lam=problem.lam)
    return 0


def _cmd_verify(args, parser):
    return 0 if run_verify() else 2


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fedotp",
        description="Federated prompt-learning simulator with transport-based "
                    "feature alignment")
    sub = parser.add_subparsers(dest="command")

    def add_experiment_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to a flat key=value config file")
        p.add_argument("--output-dir", dest="output_dir",
                       help="where to write result files")
        return p

    add_experiment_command("run", "run one experiment and export its curves")
    add_experiment_command("sweep-gamma",
                           "rerun the experiment across the gamma grid")
    add_experiment_command("sweep-shots",
                           "rerun the experiment across the shot grid")
    solve_p = sub.add_parser("solve", help="solve one transport instance")
    solve_p.add_argument("--input", required=True,
                         help="JSON file with cost, alpha, beta, lam")
    solve_p.add_argument("--plan-out", dest="plan_out",
                         help="optional path for the solved plan export")
    solve_p.add_argument("--grid", nargs=2, type=int, metavar=("R", "C"),
                         help="patch grid for the plan export")
    sub.add_parser("verify", help="run the solver and gradient self-checks")
    return parser


_HANDLERS = {
    "run": _cmd_run,
    "sweep-gamma": _cmd_sweep_gamma,
    "sweep-shots": _cmd_sweep_shots,
    "solve": _cmd_solve,
    "verify": _cmd_verify,
}


def main_cli(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; fold its exits into our code space
        return 0 if exc.code == 0 else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args, parser)
    except (ParseError, UnknownKey, InvalidValue, IoError, GridMismatch,
            ConfigInvalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything past validation is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(main_cli())
