"""Command-line front end: run, simulate, export, check-gradients."""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .coarsen import CoarseSystem
from .config import ConfigError, ProblemConfig
from .fem import SingularSystemError, StiffnessCache, benchmark_compliance, error_metric
from .mesh import export_vtk
from .optimize import (Evaluator, OptimizationAborted, OptProblem, default_radius_bounds,
                       finite_difference_check, init_seeds, run)
from .sensitivity import FoamState, cosine, write_gradient_check
from .surface import export_surface
from .voronoi import SeedSet

log = logging.getLogger("foamopt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_NOT_CONVERGED = 4


def save_seeds(path, seeds: SeedSet):
    data = {"positions": seeds.positions.tolist(), "radii": seeds.radii.tolist(),
            "bbox_lo": seeds.bbox_lo.tolist(), "bbox_hi": seeds.bbox_hi.tolist()}
    Path(path).write_text(json.dumps(data, indent=1))


def load_seeds(path) -> SeedSet:
    try:
        data = json.loads(Path(path).read_text())
        return SeedSet(data["positions"], data["radii"], data["bbox_lo"], data["bbox_hi"])
    except FileNotFoundError as exc:
        raise ConfigError(f"seeds file not found: {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid seeds file {path}: {exc}") from exc


def set_threads(n):
    if n is None:
        env = os.environ.get("FOAMOPT_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise ConfigError("threads must be >= 1")
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


class Setup:
    """Objects shared by every subcommand, built once from a config."""

    def __init__(self, cfg: ProblemConfig):
        self.cfg = cfg
        self.domain = cfg.build_domain()
        self.mesh = cfg.build_mesh(self.domain)
        self.fine = self.mesh.fine
        self.settings = cfg.build_settings(self.fine, self.domain)
        self.material = cfg.build_material()
        self.loadcase = cfg.build_loadcase(self.fine) if cfg.w < 1 else None
        self.r_lo, self.r_hi = default_radius_bounds(self.settings, cfg.n_seeds, cfg.r_min_factor, cfg.r_max)
        self.lo, self.hi = cfg.seed_box(self.domain)

    def evaluator(self, sim=None):
        return Evaluator(self.settings, self.loadcase, sim or self.cfg.sim, self.mesh, self.material)

    def problem(self):
        c = self.cfg
        return OptProblem(self.lo, self.hi, self.r_lo, self.r_hi, c.w, c.v, c.max_iter, c.ch_tol)

    def initial_seeds(self, seeds_path=None):
        if seeds_path is not None:
            s = load_seeds(seeds_path)
            return SeedSet(s.positions, s.radii, self.lo, self.hi)
        c = self.cfg
        return init_seeds(self.domain, c.n_seeds, c.rng_seed, c.seed_strategy, c.v, self.settings,
                          self.r_lo, self.r_hi, self.lo, self.hi)


def _write_fields(out: Path, name, setup: Setup, state: FoamState):
    export_vtk(out / f"{name}.vtk", setup.fine, cell_data={"density": state.density.H},
               point_data={"phi": state.node_phi})


def _write_surface(out: Path, name, setup: Setup, state: FoamState):
    lo, hi = setup.domain.bbox
    h = float(np.min((hi - lo) / np.maximum(np.round((hi - lo) / setup.fine.l_a), 1)))
    export_surface(out / f"{name}.obj", state.foam, lo, hi, h, setup.r_lo)


def cmd_run(args):
    cfg = ProblemConfig.load(args.config)
    out = Path(args.out or cfg.base_dir / cfg.output_dir)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def track(p):
        written.append(Path(p))
        return p

    try:
        setup = Setup(cfg)
        track(out / "config.json").write_text(Path(args.config).read_text())
        seeds0 = setup.initial_seeds(args.seeds)
        ev = setup.evaluator()
        problem = setup.problem()
        checks = []
        if args.verify:
            track(out / "gradient_checks").mkdir(exist_ok=True)

        def callback(rec, e):
            k = rec.iteration
            if e.state is not None and cfg.snapshot_interval and k % cfg.snapshot_interval == 0:
                _write_fields(out, f"density_{k:04d}", setup, e.state)
                track(out / f"density_{k:04d}.vtk")
            if args.verify and e.dC is not None:
                names, a, r = finite_difference_check(ev, problem, e.state.seeds, sample=args.verify_sample)
                write_gradient_check(out / "gradient_checks" / f"iter_{k:04d}.csv", names, a, r)
                checks.append(cosine(a, r))

        result = run(problem, ev, seeds0, checkpoint=track(out / "checkpoint.json"),
                     rng=np.random.default_rng(cfg.rng_seed), callback=callback)
        result.trace.to_csv(track(out / "convergence.csv"))
        save_seeds(track(out / "seeds.json"), result.seeds)
        final = result.final
        state = final.state if final is not None and final.state is not None else FoamState(setup.settings,
                                                                                              result.seeds)
        _write_fields(out, "final", setup, state)
        track(out / "final.vtk")
        _write_surface(out, "foam", setup, state)
        track(out / "foam.obj")
        summary = {
            "iterations": result.iterations,
            "converged": result.converged,
            "feasible": result.feasible,
            "C_initial": result.trace.records[0].C,
            "C_final": final.C if final is not None else None,
            "S_final": final.S if final is not None else None,
            "V_frac_final": final.V_frac if final is not None else None,
            "J_sparkline": result.trace.sparkline("J"),
        }
        if checks:
            summary["gradient_check_min_cosine"] = min(checks)
        track(out / "summary.json").write_text(json.dumps(summary, indent=1))
        print(json.dumps(summary, indent=1))
        return EXIT_OK if result.converged else EXIT_NOT_CONVERGED
    except BaseException:
        _cleanup(out, written, created)
        raise


def _cleanup(out: Path, written, created):
    if created:
        shutil.rmtree(out, ignore_errors=True)
        return
    for p in written:
        p = Path(p)
        if p.is_dir():
            shutil.rmtree(p, ignore_errors=True)
        elif p.exists():
            p.unlink()


def cmd_simulate(args):
    cfg = ProblemConfig.load(args.config)
    if args.seeds is None:
        raise ConfigError("simulate needs --seeds")
    setup = Setup(cfg)
    if setup.loadcase is None:
        setup.loadcase = cfg.build_loadcase(setup.fine)
    seeds = setup.initial_seeds(args.seeds)
    state = FoamState(setup.settings, seeds)
    cache = StiffnessCache(setup.fine, setup.material)
    t = time.perf_counter()
    C_f = benchmark_compliance(state.density, setup.fine, setup.loadcase, setup.material, cache=cache)
    t_f = time.perf_counter() - t
    t = time.perf_counter()
    system = CoarseSystem(setup.mesh, cache, state.density.H, setup.loadcase)
    system.solve()
    t_c = time.perf_counter() - t
    report = {"C_fine": C_f, "C_coarse": system.C, "r": error_metric(system.C, C_f),
              "seconds_fine": t_f, "seconds_coarse": t_c}
    print(json.dumps(report, indent=1))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "simulate.json").write_text(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_export(args):
    cfg = ProblemConfig.load(args.config)
    if args.seeds is None:
        raise ConfigError("export needs --seeds")
    domain = cfg.build_domain()
    mesh = cfg.build_mesh(domain)
    settings = cfg.build_settings(mesh.fine, domain)
    seeds = load_seeds(args.seeds)
    state = FoamState(settings, seeds)
    out = Path(args.out or "foam.obj")
    if out.suffix != ".obj":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "foam.obj"
    lo, hi = domain.bbox
    h = float(np.max(hi - lo)) / args.resolution
    r_lo = float(seeds.radii.min())
    try:
        verts, faces = export_surface(out, state.foam, lo, hi, h, r_lo)
    except BaseException:
        if out.exists():
            out.unlink()
        raise
    print(f"wrote {out}: {len(verts)} vertices, {len(faces)} faces")
    return EXIT_OK


def cmd_check_gradients(args):
    cfg = ProblemConfig.load(args.config)
    setup = Setup(cfg)
    seeds = setup.initial_seeds(args.seeds)
    ev = setup.evaluator()
    problem = setup.problem()
    names, a, r = finite_difference_check(ev, problem, seeds, sample=args.verify_sample)
    out = Path(args.out or "gradient_check.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "gradient_check.csv"
    write_gradient_check(out, names, a, r)
    c = cosine(a, r)
    print(f"cosine similarity {c:.6f} over {len(a)} derivatives; report in {out}")
    return EXIT_OK if c >= 0.95 else EXIT_NOT_CONVERGED


def build_parser():
    ap = argparse.ArgumentParser(prog="foamopt", description="Voronoi foam topology optimisation")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (or FOAMOPT_THREADS)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seeds_required=False):
        p.add_argument("--config", required=True)
        p.add_argument("--seeds", required=seeds_required)
        p.add_argument("--out")
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("run", help="optimise a foam")
    common(p)
    p.add_argument("--verify", action="store_true", help="write a gradient check per iteration")
    p.add_argument("--verify-sample", type=int, default=12)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("simulate", help="fine vs coarse compliance for a seed file")
    common(p, True)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("export", help="write the foam surface as OBJ")
    common(p, True)
    p.add_argument("--resolution", type=int, default=128, help="grid cells along the longest side")
    p.set_defaults(func=cmd_export)
    p = sub.add_parser("check-gradients", help="compare design gradients with finite differences")
    common(p)
    p.add_argument("--verify-sample", type=int, default=None, help="check this many variables")
    p.set_defaults(func=cmd_check_gradients)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularSystemError, OptimizationAborted) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
