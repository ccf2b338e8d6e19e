"""Command-line entry point: ``cpdem pretrain|infer|finetune|validate|sweep|oracle``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 training or
runtime failure, 4 checkpoint mismatch or corruption.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import DomainError
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, reference_toml
from .errors import CheckpointError, ConfigError, LineSearchError, NonConvergenceError
from .loss import PointObjective
from .network import init_network, predict
from .optim import TrainingAborted, finetune, train
from .oracle import (ReferenceField, bar_analytic, fem2d_plane_strain, newton_bar_neohookean,
                     rel_l2_error)

log = logging.getLogger("cpdem")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECKPOINT = 0, 2, 3, 4

ORACLE_PROBLEMS = ("bar1d_linear", "bar1d_neohookean", "beam2d_linear")


def _fmt(v) -> str:
    return repr(float(v))


def write_field_csv(path, points, values):
    """Coordinates then displacements, one row per point, header first."""
    points = np.atleast_2d(points)
    values = np.asarray(values, dtype=float).reshape(len(points), -1)
    d = points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(d)] + [f"u{i + 1}" for i in range(values.shape[1])])
        for x, u in zip(points, values):
            w.writerow([_fmt(v) for v in x] + [_fmt(v) for v in u])


def read_field_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    d = data.shape[1] // 2
    return data[:, :d], data[:, d:]


def parse_eta(text: str, p: int) -> np.ndarray:
    try:
        eta = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"--eta: cannot parse {text!r} as comma-separated numbers") from None
    if eta.shape != (p,):
        raise ConfigError(f"--eta: expected {p} values, got {len(eta)} in {text!r}")
    if not np.all(np.isfinite(eta)):
        raise ConfigError(f"--eta: values must be finite, got {text!r}")
    return eta


def eta_tag(eta) -> str:
    return "_".join(f"{v:.6g}" for v in eta)


def sweep_etas(box, n: int) -> np.ndarray:
    """``n`` values spread over the box: a line for one parameter, the diagonal otherwise."""
    lo = np.array([a for a, _ in box])
    hi = np.array([b for _, b in box])
    t = np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.5])
    return lo + t[:, None] * (hi - lo)


# ---------------------------------------------------------------------------
# oracle dispatch
# ---------------------------------------------------------------------------

def oracle_field(cfg: RunConfig, eta) -> ReferenceField:
    """Reference displacement field for one material sample of ``cfg``'s problem."""
    name = cfg.problem_name
    if name not in ORACLE_PROBLEMS:
        raise ConfigError(f"problem {name} has no oracle; available: {', '.join(ORACLE_PROBLEMS)}")
    g = cfg.record["geometry"]
    material = cfg.energy_model().material(np.asarray(eta, dtype=float))
    v = cfg.record["validate"]
    if name == "bar1d_linear":
        X = np.linspace(0.0, g["L"], v["points"])
        return ReferenceField(X[:, None], bar_analytic(X, material["E"], g["A"], g["L"])[:, None],
                              "analytic")
    if name == "bar1d_neohookean":
        return newton_bar_neohookean(v["oracle_elements"], material["E"], material["nu"], g["A"],
                                     g["L"])
    nx, ny = cfg.record["grid"]["counts"]
    return fem2d_plane_strain(nx, ny, g["L"], g["H"], material["E"], material["nu"],
                              cfg.record["loading"]["traction"])


def prediction_error(ckpt: Checkpoint, problem, eta, ref: ReferenceField, params=None) -> float:
    params = ckpt.params if params is None else params
    u = problem.displacement(params, eta, ref.points)
    return rel_l2_error(ReferenceField(ref.points, u, "analytic"), ref)


# ---------------------------------------------------------------------------
# checkpoint/config plumbing
# ---------------------------------------------------------------------------

def _load_config(path) -> RunConfig:
    return RunConfig.load(path)


def _resolve(args) -> tuple[RunConfig, Checkpoint]:
    """Config (explicit or embedded) and checkpoint, cross-checked."""
    cfg = _load_config(args.config) if args.config else None
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    ckpt = load_checkpoint(args.checkpoint, cfg.architecture() if cfg else None)
    if cfg is None:
        try:
            cfg = RunConfig(ckpt.config)
            cfg.validate()
        except (ConfigError, KeyError, TypeError) as exc:
            raise CheckpointError(f"embedded config is invalid: {exc}") from None
        if cfg.architecture() != ckpt.arch:
            raise CheckpointError("embedded config does not describe the stored architecture")
    elif cfg.problem_name != ckpt.problem:
        raise CheckpointError(f"checkpoint is for {ckpt.problem}, config is for {cfg.problem_name}")
    return cfg, ckpt


def _out_dir(args, cfg: RunConfig | None) -> Path:
    out = Path(args.out or (cfg.record["out"] if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _etas(args, cfg: RunConfig, ckpt: Checkpoint, required=True):
    p = len(ckpt.param_names)
    if not args.eta:
        if required:
            raise ConfigError("--eta is required")
        return []
    etas = [parse_eta(t, p) for t in args.eta]
    for eta in etas:
        cfg.energy_model().validate_eta(eta)
    return etas


def _warn_ood(ckpt: Checkpoint, eta):
    if not ckpt.in_box(eta):
        print(f"warning: eta={tuple(float(v) for v in eta)} lies outside the trained parameter "
              f"box {list(ckpt.param_box)} (out-of-distribution)", file=sys.stderr)
        return True
    return False


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    if not args.config:
        raise ConfigError("--config is required for pretrain")
    cfg = _load_config(args.config)
    problem = cfg.build_problem()
    objective = cfg.objective(problem)
    schedule = cfg.schedule()
    out = _out_dir(args, cfg)
    params = init_network(problem.arch, cfg.seed)
    t0 = time.perf_counter()
    params, rows = train(params, schedule, objective, csv_path=out / "train_log.csv")
    wall = time.perf_counter() - t0
    last = rows[-1] if rows else {}
    ckpt = Checkpoint(cfg.problem_name, problem.arch, params, problem.model.param_names,
                      config=cfg.record,
                      provenance={"config_hash": cfg.hash(), "seed": cfg.seed,
                                  "final_loss": last.get("total_loss"),
                                  "final_internal": last.get("internal"),
                                  "final_external": last.get("external"),
                                  "epochs": len(rows), "pretrain_wall_s": wall})
    save_checkpoint(out / "checkpoint.json", ckpt)
    print(f"wrote {out / 'checkpoint.json'} (final loss {last.get('total_loss')!r}, {wall:.1f} s)")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, ckpt = _resolve(args)
    etas = _etas(args, cfg, ckpt)
    counts = None
    if args.grid:
        try:
            counts = [int(c) for c in args.grid.split(",")]
        except ValueError:
            raise ConfigError(f"--grid: cannot parse {args.grid!r}") from None
    domain = cfg.domain(counts)
    problem = cfg.build_problem(counts)
    out = _out_dir(args, cfg)
    for eta in etas:
        _warn_ood(ckpt, eta)
        u = problem.displacement(ckpt.params, eta)
        path = out / f"field_{eta_tag(eta)}.csv"
        write_field_csv(path, domain.points, u)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, ckpt = _resolve(args)
    etas = _etas(args, cfg, ckpt)
    if len(etas) != 1:
        raise ConfigError("finetune takes exactly one --eta")
    eta = etas[0]
    steps = cfg.record["finetune"]["steps"] if args.steps is None else args.steps
    if steps < 0:
        raise ConfigError(f"--steps must be >= 0, got {steps}")
    problem = cfg.build_problem()
    out = _out_dir(args, cfg)
    _warn_ood(ckpt, eta)
    t0 = time.perf_counter()
    tuned, history = finetune(ckpt.params, PointObjective(problem, eta), steps,
                              m_hist=cfg.record["schedule"]["m_hist"])
    wall = time.perf_counter() - t0
    new = Checkpoint(ckpt.problem, ckpt.arch, tuned, ckpt.param_names, ckpt.config,
                     {**ckpt.provenance, "finetune": {"eta": [float(v) for v in eta],
                                                      "steps": steps, "wall_s": wall,
                                                      "iterations": max(len(history) - 1, 0)}})
    save_checkpoint(out / "finetuned.json", new)
    with open(out / "finetune_report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ckpt.param_names) + ["zero_shot_error", "finetuned_error", "steps",
                                             "iterations", "finetune_wall_s", "pretrain_wall_s"])
        before = after = float("nan")
        if cfg.problem_name in ORACLE_PROBLEMS:
            ref = oracle_field(cfg, eta)
            before = prediction_error(ckpt, problem, eta, ref)
            after = prediction_error(ckpt, problem, eta, ref, tuned)
        w.writerow([_fmt(v) for v in eta] + [_fmt(before), _fmt(after), steps,
                                             max(len(history) - 1, 0), f"{wall:.6f}",
                                             _fmt(ckpt.provenance.get("pretrain_wall_s", math.nan))])
    print(f"wrote {out / 'finetuned.json'}; zero-shot error {before:.4g}, fine-tuned {after:.4g}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg, ckpt = _resolve(args)
    if cfg.problem_name not in ORACLE_PROBLEMS:
        raise ConfigError(f"problem {cfg.problem_name} has no oracle to validate against")
    etas = _etas(args, cfg, ckpt, required=False)
    if not etas:
        n = args.n_eta or cfg.record["validate"]["n_eta"]
        etas = list(sweep_etas(ckpt.param_box, n))
    problem = cfg.build_problem()
    out = _out_dir(args, cfg)
    path = out / "validation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ckpt.param_names) + ["rel_l2_error", "status"])
        for eta in etas:
            try:
                err, status = prediction_error(ckpt, problem, eta, oracle_field(cfg, eta)), "ok"
            except NonConvergenceError as exc:
                err, status = float("nan"), "oracle_nonconvergence"
                log.warning("oracle failed at eta=%s: %s", tuple(eta), exc)
            w.writerow([_fmt(v) for v in eta] + [_fmt(err), status])
    print(f"wrote {path} ({len(etas)} rows)")
    return EXIT_OK


def _r_squared(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2:
        return float("nan")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0


def cmd_sweep(args) -> int:
    cfg, ckpt = _resolve(args)
    try:
        counts = [int(v) for v in (args.n_queries or "10,100,1000").split(",")]
    except ValueError:
        raise ConfigError(f"--n-queries: cannot parse {args.n_queries!r}") from None
    if min(counts) < 1:
        raise ConfigError("--n-queries values must be >= 1")
    with_oracle = cfg.problem_name in ORACLE_PROBLEMS and not args.no_oracle
    problem = cfg.build_problem()
    X = problem.domain.points
    out = _out_dir(args, cfg)
    rng = np.random.default_rng([cfg.seed, 7])
    lo = np.array([a for a, _ in ckpt.param_box])
    hi = np.array([b for _, b in ckpt.param_box])
    predict(ckpt.params, ckpt.arch, X, lo)  # warm-up

    summary = []
    with open(out / "sweep_timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_queries", "query", "infer_ms", "oracle_ms"])
        for n in counts:
            etas = lo + (hi - lo) * rng.random((n, len(lo)))
            total_infer = total_oracle = 0.0
            for q, eta in enumerate(etas):
                t0 = time.perf_counter()
                problem.displacement(ckpt.params, eta)
                ti = time.perf_counter() - t0
                to = float("nan")
                if with_oracle:
                    t0 = time.perf_counter()
                    oracle_field(cfg, eta)
                    to = time.perf_counter() - t0
                    total_oracle += to
                total_infer += ti
                w.writerow([n, q, f"{ti * 1e3:.6f}", f"{to * 1e3:.6f}"])
            summary.append((n, total_infer, total_oracle))

    pre = float(ckpt.provenance.get("pretrain_wall_s", math.nan))
    ns = [s[0] for s in summary]
    totals = [s[1] for s in summary]
    r2 = _r_squared(ns, totals)
    slope = float(np.polyfit(ns, totals, 1)[0]) if len(ns) > 1 else totals[0] / ns[0]
    with open(out / "sweep_report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_queries", "total_infer_s", "per_query_infer_ms", "total_oracle_s",
                    "per_query_oracle_ms", "amortization_ratio"])
        for n, ti, to in summary:
            # (pretrain + n inferences) / (n oracle solves): below 1 means CPDEM is cheaper
            ratio = (pre + ti) / to if with_oracle and to > 0 else float("nan")
            w.writerow([n, f"{ti:.6f}", f"{ti / n * 1e3:.6f}",
                        f"{to:.6f}" if with_oracle else "nan",
                        f"{to / n * 1e3:.6f}" if with_oracle else "nan", f"{ratio:.6g}"])
    with open(out / "sweep_fit.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slope_s_per_query", "r_squared", "pretrain_wall_s"])
        w.writerow([f"{slope:.9g}", f"{r2:.9g}", f"{pre:.6g}"])
    print(f"wrote {out / 'sweep_report.csv'} (slope {slope * 1e3:.4g} ms/query, R^2 {r2:.6f})")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if not args.config:
        raise ConfigError("--config is required for oracle")
    cfg = _load_config(args.config)
    if cfg.problem_name not in ORACLE_PROBLEMS:
        raise ConfigError(f"problem {cfg.problem_name} has no oracle")
    p = len(cfg.param_names)
    if not args.eta:
        raise ConfigError("--eta is required")
    etas = [parse_eta(t, p) for t in args.eta]
    for eta in etas:
        cfg.energy_model().validate_eta(eta)
    out = _out_dir(args, cfg)
    for eta in etas:
        ref = oracle_field(cfg, eta)
        path = out / f"oracle_{eta_tag(eta)}.csv"
        write_field_csv(path, ref.points, ref.values)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_defaults(args) -> int:
    print(reference_toml())
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "infer": cmd_infer,
    "finetune": cmd_finetune,
    "validate": cmd_validate,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "defaults": cmd_defaults,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpdem", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--checkpoint", help="JSON checkpoint")
    parser.add_argument("--eta", action="append",
                        help="material parameters, comma separated; repeat for several")
    parser.add_argument("--steps", type=int, help="fine-tuning L-BFGS iterations")
    parser.add_argument("--out", help="output directory (default: the config's `out`)")
    parser.add_argument("--grid", help="inference grid counts override, comma separated")
    parser.add_argument("--n-eta", type=int, help="number of validation samples")
    parser.add_argument("--n-queries", help="sweep query counts, comma separated")
    parser.add_argument("--no-oracle", action="store_true", help="sweep: skip oracle timings")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CheckpointError as exc:
        print(f"cpdem: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ConfigError as exc:
        print(f"cpdem: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"cpdem: training aborted at epoch {exc.epoch}: {exc.cause}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DomainError, FloatingPointError, NonConvergenceError, LineSearchError) as exc:
        print(f"cpdem: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
