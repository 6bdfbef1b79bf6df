"""Command-line front end.

Three subcommands::

    admpc synth    --benchmark illustrative --out out/
    admpc simulate --benchmark illustrative --variants C_Ellip,D_Adaptive --horizon 2 --grid 21 --out out/
    admpc compare  --benchmark smd --masses 3 --trials 10 --seed 0 --horizon 8 --out out/

Every file written starts with a header recording the package version, the
seed and a hash of the run configuration (CSV files: a ``#`` comment line,
JSON files: a ``"header"`` key). Errors exit with status 2; infeasible
steps of a run are recorded as data and do not change the exit status.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, benchmarks, mpc
from .conic import ToleranceConfig
from .errors import AdmpcError
from .lmi import build_design_phase, synthesize_centralized
from .model import (
    CtsLtiSystem,
    decompose,
    euler_discretize,
    load_model,
    validate_system,
    zoh_discretize,
)
from .terminal_sets import max_ellipsoid

EXIT_OK = 0
EXIT_ERROR = 2


class CliError(Exception):
    """Bad configuration detected before any run starts."""


@dataclass
class RunConfig:
    command: str
    model: str | None = None
    benchmark: str | None = None
    masses: int = 3
    variants: list = field(default_factory=list)
    horizon: int = 2
    seed: int = 0
    trials: int = 1
    out: str = "."
    conv_tol: float = 1e-3
    max_steps: int = 300
    solver_tol: float = 1e-8
    x0: list | None = None
    grid: int | None = None
    x0_scale: float = 1.0
    matched: bool = False

    def validate(self) -> "RunConfig":
        if (self.model is None) == (self.benchmark is None):
            raise CliError("give exactly one of --model and --benchmark")
        if self.horizon < 1:
            raise CliError("--horizon must be at least 1")
        if self.trials < 1:
            raise CliError("--trials must be at least 1")
        if self.max_steps < 0:
            raise CliError("--max-steps must be nonnegative")
        if self.command != "synth":
            if not self.variants:
                raise CliError("--variants must name at least one variant")
            try:
                self.variants = [mpc.parse_variant(v).value for v in self.variants]
            except AdmpcError as exc:
                raise CliError(str(exc)) from None
        return self

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = asdict(self)
        d.pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def header(self) -> str:
        return f"admpc {__version__} seed={self.seed} config={self.digest()}"

    def tolerances(self) -> ToleranceConfig:
        return ToleranceConfig(feas_tol=self.solver_tol, gap_tol=self.solver_tol)


# -- inputs ---------------------------------------------------------------------


def _single_system(cfg: RunConfig):
    """(CoupledSystem, plant) for a model file or the two-state example."""
    if cfg.model is not None:
        path = Path(cfg.model)
        if not path.is_file():
            raise CliError(f"model file not found: {path}")
        try:
            mf = load_model(path)
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise CliError(f"cannot read model file {path}: {exc}") from None
        if isinstance(mf.system, CtsLtiSystem):
            if not mf.dt:
                raise CliError("a continuous-time model needs a positive dt")
            pred = validate_system(euler_discretize(mf.system, mf.dt))
            plant = zoh_discretize(mf.system, mf.dt)
        else:
            pred = plant = validate_system(mf.system)
        mf.partition.check(pred.n, pred.m)
        return decompose(pred, mf.partition), plant
    sys_, part = benchmarks.illustrative_system()
    return decompose(sys_, part), sys_


def trials_for(cfg: RunConfig) -> list:
    """Expand the configuration into benchmark trials."""
    if cfg.benchmark == "smd":
        spec = benchmarks.SmdChainSpec(M=cfg.masses)
        out = benchmarks.smd_trials(spec, cfg.trials, cfg.seed, matched=cfg.matched)
        if cfg.x0 is not None:
            raise CliError("--x0 is not available for the smd benchmark; use --x0-scale")
        return [benchmarks.Trial(t.index, t.seed, t.cs, t.sim, cfg.x0_scale * t.x0) for t in out]
    cs, plant = _single_system(cfg)
    if cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, float)
        if x0.shape != (cs.n,):
            raise CliError(f"--x0 needs {cs.n} entries, got {x0.size}")
        points = [x0]
    elif cfg.grid is not None:
        try:
            points = list(benchmarks.grid_x0(cs.system, cfg.grid))
        except AdmpcError as exc:
            raise CliError(str(exc)) from None
    else:
        points = [np.zeros(cs.n)]
    return [benchmarks.Trial(k, cfg.seed, cs, plant, cfg.x0_scale * p) for k, p in enumerate(points)]


# -- outputs --------------------------------------------------------------------


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path: Path, cfg: RunConfig, payload: dict) -> None:
    # json writes floats with repr, so matrices survive a round trip unchanged
    data = {"header": cfg.header(), **payload}
    path.write_text(json.dumps(data, indent=1, default=_json_default) + "\n")


def load_design(path) -> dict:
    """Read a design artifact back into numpy arrays (inverse of ``synth``)."""
    data = json.loads(Path(path).read_text())
    out = {"header": data["header"]}
    for k, v in data.items():
        if k == "header":
            continue
        if isinstance(v, list) and v and isinstance(v[0], list) and v[0] and isinstance(v[0][0], list):
            out[k] = [np.array(b, dtype=float) for b in v]
        elif isinstance(v, list):
            out[k] = np.array(v, dtype=float)
        else:
            out[k] = v
    return out


def _write_csv(path: Path, cfg: RunConfig, fill) -> None:
    buf = io.StringIO()
    buf.write("# " + cfg.header() + "\n")
    fill(buf)
    path.write_text(buf.getvalue())


def _trajectory_rows(report: benchmarks.ComparisonReport, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    runs = [r for r in sorted(report.results, key=lambda r: (r.trial, r.variant)) if r.trace is not None]
    if not runs:
        w.writerow(["trial", "variant", "t", "status"])
        return
    tr0 = runs[0].trace
    w.writerow(
        ["trial", "variant", "t"]
        + [f"x_{k + 1}" for k in range(tr0.n)]
        + [f"u_{k + 1}" for k in range(tr0.m)]
        + ["stage_cost", "J_star"]
        + [f"alpha_{k + 1}" for k in range(tr0.M)]
        + ["status"]
    )
    for r in runs:
        for rec in r.trace.records:
            alpha = [f"{a:.12g}" for a in rec.alpha] if rec.alpha is not None else [""] * tr0.M
            w.writerow(
                [r.trial, r.variant, rec.t]
                + [f"{v:.12g}" for v in rec.x]
                + [f"{v:.12g}" for v in rec.u]
                + [f"{rec.stage_cost:.12g}", f"{rec.J_star:.12g}"]
                + alpha
                + [rec.status]
            )


def _feasibility_rows(report, trials, stream) -> None:
    """One row per trial: x0 and a 0/1 feasibility flag at t = 0 per variant."""
    w = csv.writer(stream, lineterminator="\n")
    n = trials[0].cs.n
    w.writerow(["trial"] + [f"x0_{k + 1}" for k in range(n)] + list(report.variants))
    by = {(r.trial, r.variant): r for r in report.results}
    for t in trials:
        flags = []
        for v in report.variants:
            r = by[(t.index, v)]
            flags.append(int(not r.error and r.infeasible_at != 0))
        w.writerow([t.index] + [f"{v:.12g}" for v in t.x0] + flags)


def _timing_rows(report, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["trial", "variant", "steps", "mean_solve_ms"])
    for r in sorted(report.results, key=lambda r: (r.trial, r.variant)):
        w.writerow([r.trial, r.variant, r.steps, f"{r.mean_solve_ms:.3f}"])


# -- commands -------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tol = cfg.tolerances()
    if cfg.benchmark == "smd":
        systems = [(f"design_trial{t.index}.json", t.cs) for t in trials_for(cfg)]
    else:
        systems = [("design.json", _single_system(cfg)[0])]
    for name, cs in systems:
        central = synthesize_centralized(cs.system, tol)
        design = build_design_phase(cs, tol)
        payload = {
            "P_c": central.P,
            "K_c": central.K,
            "alpha_c": max_ellipsoid(central.P, central.K, cs.system),
            "P": list(design.P),
            "Z": list(design.Z),
            "K_ref": list(design.K_ref),
            "P_d": cs.block_diag_from_local(design.P),
            "K_d": cs.gain_from_local(design.K_ref),
        }
        write_json(out / name, cfg, payload)
        print(f"{name}: P_c eig {np.round(np.linalg.eigvalsh(central.P), 4).tolist()}")
    return EXIT_OK


def _run(cfg: RunConfig):
    trials = trials_for(cfg)
    report = benchmarks.run_comparison(
        trials, cfg.variants, cfg.horizon, cfg.conv_tol, cfg.max_steps, cfg.tolerances(), keep_traces=True
    )
    return trials, report


def _finish(report) -> int:
    failed = [r for r in report.results if r.error]
    for r in failed:
        print(f"trial {r.trial} {r.variant}: {r.error}", file=sys.stderr)
    return EXIT_ERROR if failed else EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    trials, report = _run(cfg)
    _write_csv(out / "trajectories.csv", cfg, lambda s: _trajectory_rows(report, s))
    _write_csv(out / "feasibility.csv", cfg, lambda s: _feasibility_rows(report, trials, s))
    _write_csv(out / "timing.csv", cfg, lambda s: _timing_rows(report, s))
    for r in sorted(report.results, key=lambda r: (r.trial, r.variant)):
        if len(trials) <= 10:
            state = "error" if r.error else ("infeasible@%d" % r.infeasible_at if r.infeasible_at is not None else "ok")
            print(f"trial {r.trial:>3} {r.variant:<11} steps {r.steps:>4} cost {r.cost:>12.6g} {state}")
    if len(trials) > 10:
        for v in report.variants:
            ok = sum(1 for r in report.runs(v) if not r.error and r.infeasible_at != 0)
            print(f"{v:<11} feasible at t=0 on {ok}/{len(trials)} points")
    return _finish(report)


def cmd_compare(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _, report = _run(cfg)
    _write_csv(out / "comparison.csv", cfg, lambda s: report.to_csv(s, timing=False))
    _write_csv(out / "trajectories.csv", cfg, lambda s: _trajectory_rows(report, s))
    _write_csv(out / "timing.csv", cfg, lambda s: _timing_rows(report, s))
    print(report.format_table(), end="")
    return _finish(report)


COMMANDS = {"synth": cmd_synth, "simulate": cmd_simulate, "compare": cmd_compare}


def _floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="admpc", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"admpc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--model", help="JSON model file (see README)")
        src.add_argument("--benchmark", choices=("illustrative", "smd"))
        p.add_argument("--masses", type=int, default=3, help="chain length for --benchmark smd")
        p.add_argument("--variants", type=_names, default=["D_Adaptive"],
                       help="comma-separated: C_Max,C_Ellip,D_Fixed,D_Adaptive,D_Ad0")
        p.add_argument("--horizon", type=int, default=2)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--trials", type=int, default=1)
        p.add_argument("--out", default=".")
        p.add_argument("--conv-tol", type=float, default=1e-3)
        p.add_argument("--max-steps", type=int, default=300)
        p.add_argument("--solver-tol", type=float, default=1e-8)
        p.add_argument("--x0", type=_floats, help="initial state, comma-separated")
        p.add_argument("--grid", type=int, help="k x k grid of initial states over a 2-state box")
        p.add_argument("--x0-scale", type=float, default=1.0, help="scale all initial states")
        p.add_argument("--matched", action="store_true",
                       help="smd: simulate with the prediction model instead of the exact one")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig(
        command=args.command, model=args.model, benchmark=args.benchmark, masses=args.masses,
        variants=args.variants, horizon=args.horizon, seed=args.seed, trials=args.trials,
        out=args.out, conv_tol=args.conv_tol, max_steps=args.max_steps, solver_tol=args.solver_tol,
        x0=args.x0, grid=args.grid, x0_scale=args.x0_scale, matched=args.matched,
    )
    if cfg.model is None and cfg.benchmark is None:
        cfg.benchmark = "illustrative"
    try:
        return COMMANDS[cfg.command](cfg.validate())
    except (CliError, AdmpcError, OSError) as exc:
        print(f"admpc: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
