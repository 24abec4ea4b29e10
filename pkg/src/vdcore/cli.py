"""Command-line front end: ``vdcore lower|simulate|compare``.

Exit status: 0 ok, 1 internal error, 2 input error, 3 deadlock.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .costmodel import HardwareProfile, ProfileError, load_profile
from .generator import (DeadlockError, GenerateOptions, LoweringError, generate, load_program,
                        save_program)
from .isa import IsaError
from .machine import BuildError, barrierize, load_report, run
from .metrics import MetricsError, compare, timelines_csv, utilization
from .workload import WorkloadError, init_inputs, parse_workload

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_DEADLOCK = 0, 1, 2, 3

log = logging.getLogger("vdcore")


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    workload: str | None
    profile: str
    fusion: bool = True
    fold: bool = True
    barrier: bool = False
    flows: bool = True
    theta: float = 1.2
    seed: int = 0
    out: str = "out"
    trace: bool = False
    program: str | None = None

    def options(self) -> GenerateOptions:
        return GenerateOptions(theta=self.theta, fusion=self.fusion, fold=self.fold,
                               flows=self.flows, barrier=self.barrier)


def _packaged(kind: str, name: str, suffix: str = ".yaml") -> Path | None:
    base = resources.files("vdcore") / kind
    for cand in (name, name + suffix):
        path = base / cand
        if path.is_file():
            return Path(str(path))
    return None


def resolve_profile(name: str) -> HardwareProfile:
    path = Path(name)
    if not path.exists():
        path = _packaged("profiles", name) or path
    try:
        return load_profile(path if path.exists() else name)
    except (ProfileError, OSError, TypeError) as exc:
        raise InputError(f"profile {name}: {exc}") from exc


def read_workload(name: str):
    path = Path(name)
    if not path.exists():
        packaged = _packaged("workloads", name)
        if packaged is None:
            raise InputError(f"workload file not found: {name}")
        path = packaged
    try:
        return parse_workload(path.read_text())
    except WorkloadError as exc:
        raise InputError(f"{path}: {exc}") from exc


def build(cfg: RunConfig):
    """(graph or None, program) for a config."""
    if cfg.program:
        if not Path(cfg.program).is_dir():
            raise InputError(f"program directory not found: {cfg.program}")
        p = load_program(cfg.program)
        return None, barrierize(p) if cfg.barrier else p
    if not cfg.workload:
        raise InputError("either --workload or --program is required")
    g = read_workload(cfg.workload)
    hw = resolve_profile(cfg.profile)
    try:
        return g, generate(g, hw, cfg.options())
    except (LoweringError, WorkloadError, IsaError) as exc:
        raise InputError(str(exc)) from exc


def cmd_lower(cfg: RunConfig) -> int:
    _, p = build(cfg)
    for path in save_program(p, cfg.out):
        log.debug("wrote %s", path)
    print(f"lowered {sum(len(s) for s in p.streams.values())} uops on {len(p.streams)} cores -> {cfg.out}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    g, p = build(cfg)
    inputs = init_inputs(g, cfg.seed) if g is not None else None
    try:
        rep = run(p, inputs, seed=cfg.seed)
    except BuildError as exc:
        raise InputError(str(exc)) from exc
    out = Path(cfg.out)
    rep.write(out, trace=cfg.trace)
    if rep.completed:
        (out / "utilization.csv").write_text(timelines_csv(utilization(rep)))
    sys.stdout.write(rep.summary())
    if rep.fault:
        print(f"fault: {rep.fault}", file=sys.stderr)
        return EXIT_INTERNAL
    if not rep.completed:
        print("deadlock: wait-for cycle " + " -> ".join(a for a, _, _ in rep.wait_for)
              + (f" -> {rep.wait_for[0][0]}" if rep.wait_for else ""))
        return EXIT_DEADLOCK
    return EXIT_OK


def cmd_compare(a: str, b: str) -> int:
    try:
        ra, rb = load_report(a), load_report(b)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read report: {exc}") from exc
    try:
        sys.stdout.write(compare(ra, rb).text())
    except MetricsError as exc:
        raise InputError(str(exc)) from exc
    return EXIT_OK


def _simulate_one(cfg: RunConfig) -> int:
    try:
        return cmd_simulate(cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vdcore", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--workload", action="append", help="workload YAML (path or packaged name)")
        sp.add_argument("--program", help="directory with a lowered program instead of a workload")
        sp.add_argument("--profile", default="H100", help="builtin profile name or profile YAML")
        sp.add_argument("--theta", type=float, default=1.2, help="critical-path dominance factor")
        sp.add_argument("--no-fusion", action="store_true")
        sp.add_argument("--no-fold", action="store_true")
        sp.add_argument("--no-flows", action="store_true")
        sp.add_argument("--barrier", action="store_true", help="kernel-per-operator ablation")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out")

    common(sub.add_parser("lower", help="write per-core µop assembly and the queue table"))
    sim = sub.add_parser("simulate", help="run a workload on the simulated machine")
    common(sim)
    sim.add_argument("--trace", action="store_true", help="also write a Chrome trace")
    sim.add_argument("--jobs", type=int, default=1, help="parallel simulations for several workloads")
    cmp_ = sub.add_parser("compare", help="compare two simulation reports")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    return ap


def _configs(args) -> list[RunConfig]:
    workloads = args.workload or [None]
    cfgs = []
    for w in workloads:
        out = args.out if len(workloads) == 1 else str(Path(args.out) / Path(w).stem)
        cfgs.append(RunConfig(
            workload=w, profile=args.profile, fusion=not args.no_fusion, fold=not args.no_fold,
            barrier=args.barrier, flows=not args.no_flows, theta=args.theta, seed=args.seed,
            out=out, trace=getattr(args, "trace", False), program=args.program))
    return cfgs


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            return cmd_compare(args.a, args.b)
        cfgs = _configs(args)
        if args.command == "lower":
            codes = [cmd_lower(c) for c in cfgs]
        elif args.jobs > 1 and len(cfgs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                codes = list(pool.map(_simulate_one, cfgs))
        else:
            codes = [cmd_simulate(c) for c in cfgs]
        return max(codes)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DeadlockError as exc:
        print(f"deadlock: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
