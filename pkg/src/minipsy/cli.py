"""``minipsy`` command line: compile, run, bench and mesh-info.

Exit codes: 0 success, 1 diagnostics (bad input or configuration),
2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
from dataclasses import dataclass, field, fields
import os
import sys

from .compiler import CompileError, TransformationError, compile_plan, compile_program, emit_listing
from .dsl import DSLError, parse_algorithm, parse_kernel_meta, validate
from .exchange import DeadlockError, ExchangeError
from .executor import ExecutionError
from .mesh import Colouring, MeshError, colour, extrude, parse_mesh_spec, partition

__all__ = ["RunConfig", "ConfigError", "parse_config", "main",
           "RUN_COLUMNS", "BENCH_COLUMNS"]

RUN_COLUMNS = ["demo", "step", "field", "checksum", "mass_drift", "iterations", "residual", "converged"]
BENCH_COLUMNS = ["config_id", "nranks", "threads", "demo", "wall_ms", "iterations", "residual", "checksum"]


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> list:
    text = text.strip()
    if not text:
        return []
    return [int(t) for t in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    """Flat run configuration.  Keys use dots for grouping (``solver.tol``)."""

    mesh: str = "C12"
    nlayers: int = 16
    nranks: int = 1
    threads: int = 1
    halo_depth: int = 1
    recipe: str = ""
    demo: str = "helmholtz"
    steps: int = 1
    dt: float = 0.1
    seed: int = 0
    debug: bool = False
    backend: str = "auto"
    harness: str = "threads"
    output: str = ""
    listing: str = ""
    solver_method: str = "cg"
    solver_tol: float = 1e-6
    solver_maxit: int = 1000
    solver_restart: int = 30
    solver_precond: str = "line"
    solver_levels: int = 3
    solver_inner_tol: float = 1e-6
    helmholtz_lam: float = 1.0
    helmholtz_gamma: float = 1e4
    mixed_tau: float = 1.0
    mixed_eps: float = 0.1
    bench_nranks: list = field(default_factory=lambda: [1])
    bench_threads: list = field(default_factory=lambda: [1])
    bench_repeats: int = 3

    @staticmethod
    def key_of(attr: str) -> str:
        for group in ("solver", "helmholtz", "mixed", "bench"):
            if attr.startswith(group + "_"):
                return group + "." + attr[len(group) + 1:]
        return attr

    @classmethod
    def keys(cls) -> list:
        return [cls.key_of(f.name) for f in fields(cls)]

    def set(self, key: str, value: str):
        attr = key.strip().replace(".", "_").replace("-", "_")
        names = {f.name: f for f in fields(self)}
        if attr not in names or self.key_of(attr) != key.strip().replace("-", "_"):
            raise ConfigError(f"unknown configuration key {key!r}")
        cur = getattr(self, attr)
        try:
            if isinstance(cur, bool):
                val = _bool(value)
            elif isinstance(cur, int):
                val = int(value)
            elif isinstance(cur, float):
                val = float(value)
            elif isinstance(cur, list):
                val = _int_list(value)
            else:
                val = value.strip()
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
        setattr(self, attr, val)

    def validate(self):
        from .demos import DEMOS, SOLVERS
        problems = []
        try:
            parse_mesh_spec(self.mesh)
        except MeshError as exc:
            problems.append(f"mesh: {exc}")
        for name in ("nlayers", "nranks", "threads", "steps", "solver_maxit", "solver_restart",
                     "solver_levels", "bench_repeats"):
            if getattr(self, name) < 1:
                problems.append(f"{self.key_of(name)} must be >= 1")
        if self.halo_depth < 1:
            problems.append("halo_depth must be >= 1")
        if self.demo not in DEMOS:
            problems.append(f"demo must be one of {', '.join(DEMOS)}")
        if self.solver_method not in SOLVERS:
            problems.append(f"solver.method must be one of {', '.join(SOLVERS)}")
        if self.solver_precond not in ("none", "line", "mg", "schur"):
            problems.append("solver.precond must be none, line, mg or schur")
        if not self.solver_tol > 0:
            problems.append("solver.tol must be positive")
        if not self.helmholtz_lam > 0:
            problems.append("helmholtz.lam must be positive")
        if self.backend not in ("auto", "cython", "python"):
            problems.append("backend must be auto, cython or python")
        if self.harness not in ("threads", "sequential"):
            problems.append("harness must be threads or sequential")
        if any(n < 1 for n in self.bench_nranks) or any(t < 1 for t in self.bench_threads):
            problems.append("bench sweeps take positive integers")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def parse_config(text: str, config: RunConfig | None = None) -> RunConfig:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    config = config or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        try:
            config.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return config


def load_config(path: str | None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path) as fh:
            parse_config(fh.read(), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    return cfg.validate()


# -- commands ----------------------------------------------------------------
def _print_diag(exc, path):
    if isinstance(exc, DSLError):
        for d in exc.diagnostics:
            print(f"{path}:{d}", file=sys.stderr)
    else:
        print(f"{path}: error: {exc}", file=sys.stderr)


def cmd_compile(args) -> int:
    from .demos import builtin_metas
    metas = {} if args.no_builtin else dict(builtin_metas())
    for p in args.kmeta:
        try:
            with open(p) as fh:
                meta = parse_kernel_meta(fh.read())
        except OSError as exc:
            print(f"{p}: error: {exc.strerror}", file=sys.stderr)
            return 1
        except DSLError as exc:
            _print_diag(exc, p)
            return 1
        metas[meta.name] = meta
    try:
        with open(args.alg) as fh:
            text = fh.read()
    except OSError as exc:
        print(f"{args.alg}: error: {exc.strerror}", file=sys.stderr)
        return 1
    try:
        resolved = validate(parse_algorithm(text, metas), metas)
    except DSLError as exc:
        _print_diag(exc, args.alg)
        return 1
    recipe = None
    if args.recipe:
        try:
            with open(args.recipe) as fh:
                recipe = fh.read()
        except OSError as exc:
            print(f"{args.recipe}: error: {exc.strerror}", file=sys.stderr)
            return 1
    try:
        sched = compile_program(resolved, args.max_depth, recipe, naive=args.naive)
        plan = compile_plan(sched, bind=False)
    except (TransformationError, CompileError, ValueError) as exc:
        print(f"{args.recipe or args.alg}: error: {exc}", file=sys.stderr)
        return 1
    listing = emit_listing(sched)
    out = args.output or os.path.splitext(args.alg)[0] + ".psy"
    with open(out, "w") as fh:
        fh.write(listing)
    nodes = list(sched.all_nodes())
    colours = sum(1 for n in nodes if getattr(n, "kind", None) == "colours")
    print(f"listing: {out}")
    print(f"invokes: {len(sched.invokes)}")
    print(f"exchange sites: {len(sched.exchange_sites())}")
    print(f"loops: {plan.loop_count()}")
    print(f"colour loops: {colours}")
    print(f"global sums: {plan.count('sum')}")
    return 0


def _demo_kwargs(cfg: RunConfig) -> dict:
    common = dict(nranks=cfg.nranks, threads=cfg.threads, seed=cfg.seed, mode=cfg.harness,
                  backend=None if cfg.backend == "auto" else cfg.backend, debug=cfg.debug,
                  max_depth=cfg.halo_depth)
    if cfg.demo == "listing1":
        common.update(steps=cfg.steps, recipe=cfg.recipe or None)
    elif cfg.demo == "advection":
        common.update(steps=cfg.steps, dt=cfg.dt, recipe=cfg.recipe or None)
    elif cfg.demo == "helmholtz":
        common.update(lam=cfg.helmholtz_lam, gamma=cfg.helmholtz_gamma, method=cfg.solver_method,
                      precond=cfg.solver_precond, tol=cfg.solver_tol, maxit=cfg.solver_maxit,
                      restart=cfg.solver_restart, levels=cfg.solver_levels)
    else:
        common.update(lam=cfg.helmholtz_lam, tau=cfg.mixed_tau, eps=cfg.mixed_eps,
                      method=cfg.solver_method,
                      precond="schur" if cfg.solver_precond in ("schur", "line", "mg") else "none",
                      tol=cfg.solver_tol, maxit=cfg.solver_maxit, restart=cfg.solver_restart,
                      inner_tol=cfg.solver_inner_tol)
    return common


def _open_out(path):
    if not path or path == "-":
        return sys.stdout, False
    return open(path, "w", newline=""), True


def cmd_run(args) -> int:
    from .demos import make_demo
    try:
        cfg = load_config(args.config, args.set)
        demo = make_demo(cfg.demo, parse_mesh_spec(cfg.mesh), cfg.nlayers, **_demo_kwargs(cfg))
    except (ConfigError, MeshError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        res = demo.run()
    except (ExecutionError, ExchangeError, DeadlockError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    finally:
        demo.close()
    fh, close = _open_out(args.output or cfg.output)
    try:
        w = csv.DictWriter(fh, RUN_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in res.rows:
            w.writerow({"demo": cfg.demo, **{k: _fmt(v) for k, v in row.items()}})
    finally:
        if close:
            fh.close()
    for name, cs in res.checksums.items():
        print(f"checksum {name} = {cs!r}", file=sys.stderr)
    if res.converged is False:
        print(f"solver did not converge: residual {res.residual:.3e}", file=sys.stderr)
        return 2
    return 0


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def bench_rows(cfg: RunConfig):
    """Yield one bench row per (nranks, threads) pair; timing is the minimum
    wall time of ``bench.repeats`` runs, setup excluded."""
    from .demos import make_demo
    cid = 0
    gm = parse_mesh_spec(cfg.mesh)
    for nr in cfg.bench_nranks:
        for th in cfg.bench_threads:
            run_cfg = RunConfig(**{f.name: getattr(cfg, f.name) for f in fields(cfg)})
            run_cfg.nranks, run_cfg.threads = nr, th
            best, res = None, None
            for _ in range(max(cfg.bench_repeats, 1)):
                demo = make_demo(cfg.demo, gm, cfg.nlayers, **_demo_kwargs(run_cfg))
                try:
                    res = demo.run()
                finally:
                    demo.close()
                best = res.wall_ms if best is None else min(best, res.wall_ms)
            cs = next(iter(res.checksums.values())) if res.checksums else ""
            yield {"config_id": cid, "nranks": nr, "threads": th, "demo": cfg.demo,
                   "wall_ms": f"{best:.3f}",
                   "iterations": "" if res.iterations is None else res.iterations,
                   "residual": "" if res.residual is None else repr(res.residual),
                   "checksum": repr(cs)}
            cid += 1


def cmd_bench(args) -> int:
    try:
        cfg = load_config(args.config, args.set)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    fh, close = _open_out(args.output or cfg.output)
    try:
        w = csv.DictWriter(fh, BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        try:
            for row in bench_rows(cfg):
                w.writerow(row)
                fh.flush()
        except (ConfigError, MeshError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except (ExecutionError, ExchangeError, DeadlockError, ArithmeticError, RuntimeError) as exc:
            print(f"runtime failure: {exc}", file=sys.stderr)
            return 2
    finally:
        if close:
            fh.close()
    return 0


def mesh_info(spec: str, nlayers: int = 1) -> dict:
    gm = parse_mesh_spec(spec)
    local = extrude(gm, partition(gm, 1, 1), 0, nlayers)
    col: Colouring = colour(local)
    return {"mesh": gm.name, "cells": gm.ncells, "edges": gm.nedges, "vertices": gm.nvertices,
            "euler": gm.euler_characteristic, "colours": col.ncolours}


def cmd_mesh_info(args) -> int:
    try:
        info = mesh_info(args.spec)
    except MeshError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"mesh: {info['mesh']}")
    print(f"columns (F): {info['cells']}")
    print(f"edges (E): {info['edges']}")
    print(f"vertices (V): {info['vertices']}")
    print(f"euler characteristic: {info['euler']}")
    print(f"colours: {info['colours']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minipsy", description="kernel/algorithm compiler and demo runner")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile an algorithm program to a listing")
    c.add_argument("alg")
    c.add_argument("kmeta", nargs="*", help="extra kernel metadata files")
    c.add_argument("--recipe", help="transformation recipe file")
    c.add_argument("-o", "--output", help="listing path (default: <alg>.psy)")
    c.add_argument("--max-depth", type=int, default=1)
    c.add_argument("--naive", action="store_true", help="exchange every read field before every loop")
    c.add_argument("--no-builtin", action="store_true", help="ignore the packaged kernel metadata")
    c.set_defaults(func=cmd_compile)

    for name, fn, helptext in (("run", cmd_run, "run a demo and write per-step CSV"),
                               ("bench", cmd_bench, "time a demo over nranks/threads sweeps")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("config", nargs="?", help="key = value configuration file")
        r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        r.add_argument("-o", "--output", help="CSV path (default: stdout)")
        r.set_defaults(func=fn)

    m = sub.add_parser("mesh-info", help="entity counts, Euler characteristic and colour count")
    m.add_argument("spec", help="Cn or NXxNY[:x|:y|:xy|:none]")
    m.set_defaults(func=cmd_mesh_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
