"""GCMMA driver for foam design: minimise (1-w) C + w S subject to V/V_0 <= v."""
from __future__ import annotations

import json
import logging
import os
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .coarsen import CoarseSystem, element_energies
from .fem import LoadCase, Material, SingularSystemError, StiffnessCache, compliance, solve
from .gcmma import GCMMAState, gcmma_step
from .implicit import volume
from .sensitivity import (FoamSettings, FoamState, _unchecked, all_slices, compliance_gradient,
                          shape_energy_and_gradient, variables, volume_gradient)
from .voronoi import SeedSet, margin_box, tessellate

log = logging.getLogger(__name__)

CH_WINDOW = 5
V_ER_TOL = 1e-4


class OptimizationAborted(RuntimeError):
    """Solver failure mid-run; ``checkpoint`` names the state dump."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class OptProblem:
    lo: np.ndarray
    hi: np.ndarray
    r_lo: float
    r_hi: float
    w: float = 0.1
    v: float = 0.3
    max_iter: int = 200
    ch_tol: float = 1e-3

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ValueError("position bounds need lo < hi on every axis")
        if not 0 < self.r_lo < self.r_hi:
            raise ValueError("radius bounds need 0 < r_lo < r_hi")
        if not 0 <= self.w <= 1:
            raise ValueError("w must lie in [0, 1]")
        if not 0 < self.v <= 1:
            raise ValueError("v must lie in (0, 1]")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")

    @property
    def shape_only(self):
        """w = 1: positions only, no simulation and no volume constraint."""
        return self.w >= 1.0

    @property
    def dim(self):
        return len(self.lo)

    def to_unit(self, seeds: SeedSet) -> np.ndarray:
        zx = (seeds.positions - self.lo) / (self.hi - self.lo)
        if self.shape_only:
            return zx.ravel()
        zr = (seeds.radii - self.r_lo) / (self.r_hi - self.r_lo)
        return np.concatenate([zx.ravel(), zr])

    def from_unit(self, z, radii=None) -> SeedSet:
        d = self.dim
        n = len(z) // (d if self.shape_only else d + 1)
        X = self.lo + np.reshape(z[:n * d], (n, d)) * (self.hi - self.lo)
        r = radii if self.shape_only else self.r_lo + z[n * d:] * (self.r_hi - self.r_lo)
        return SeedSet(X, r, self.lo, self.hi)

    def unit_scale(self, n):
        """d(physical)/d(unit) for every design variable."""
        s = np.tile(self.hi - self.lo, n)
        if self.shape_only:
            return s
        return np.concatenate([s, np.full(n, self.r_hi - self.r_lo)])


@dataclass
class IterRecord:
    iteration: int
    C: float
    S: float
    J: float
    V_frac: float
    ch: float
    seconds: float
    flagged: int = 0
    inner: int = 0


@dataclass
class OptTrace:
    v: float
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: IterRecord):
        self.records.append(rec)

    @property
    def J(self):
        return np.array([r.J for r in self.records])

    def to_csv(self, path):
        cols = ["iteration", "C", "S", "J", "V_frac", "ch", "seconds", "flagged", "inner"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.records:
                fh.write(",".join(f"{getattr(r, c):.10g}" if isinstance(getattr(r, c), float)
                                  else str(getattr(r, c)) for c in cols) + "\n")

    def sparkline(self, key="J", width=40):
        vals = np.array([getattr(r, key) for r in self.records], dtype=float)
        vals = vals[np.isfinite(vals)]
        if len(vals) == 0:
            return ""
        if len(vals) > width:
            vals = vals[np.linspace(0, len(vals) - 1, width).astype(int)]
        ticks = " .:-=+*#%@"
        lo, hi = vals.min(), vals.max()
        span = hi - lo if hi > lo else 1.0
        return "".join(ticks[int((x - lo) / span * (len(ticks) - 1))] for x in vals)


def convergence_check(trace, k, v=None, previous=None):
    """ch(k) over the objective history.

    ``trace`` is an OptTrace or a sequence of (J, V_frac) pairs; ``previous``
    is ch(k-1), held while the volume constraint is violated.
    """
    if isinstance(trace, OptTrace):
        v = trace.v
        hist = [(r.J, r.V_frac) for r in trace.records[:k + 1]]
        if previous is None and k >= 1 and len(trace.records) >= k:
            previous = trace.records[k - 1].ch
    else:
        hist = list(trace)[:k + 1]
    if k < CH_WINDOW:
        return 1.0
    Vf = hist[k][1]
    if v is not None and np.isfinite(Vf) and (Vf - v) / v > V_ER_TOL:
        return 1.0 if previous is None else float(previous)
    window = np.array([h[0] for h in hist[k - CH_WINDOW + 1:k + 1]], dtype=float)
    mean = window.mean()
    return float(abs(window.max() - mean) / abs(mean)) if mean != 0 else 0.0


# -- initial design ----------------------------------------------------------

def _domain_measure(domain, lo, hi, rng, n=200_000):
    exact = getattr(domain, "measure", None)
    if exact is not None:
        return float(exact)
    pts = rng.uniform(lo, hi, size=(n, len(lo)))
    return float(np.prod(hi - lo) * np.mean(domain(pts) >= 0))


def sample_positions(domain, n, rng, strategy="uniform", lo=None, hi=None):
    lo = np.asarray(domain.bbox[0] if lo is None else lo, dtype=float)
    hi = np.asarray(domain.bbox[1] if hi is None else hi, dtype=float)
    d = len(lo)
    if strategy not in ("uniform", "blue_noise"):
        raise ValueError(f"unknown seeding strategy {strategy!r}")
    if strategy == "blue_noise":
        measure = _domain_measure(domain, lo, hi, np.random.default_rng(0))
        radius = 0.7 * (measure / n) ** (1.0 / d)
        pts = []
        tries = 0
        while len(pts) < n and tries < 2000 * n:
            tries += 1
            x = rng.uniform(lo, hi)
            if domain(x[None])[0] < 0:
                continue
            if pts and np.min(np.linalg.norm(np.asarray(pts) - x, axis=1)) < radius:
                continue
            pts.append(x)
        if len(pts) == n:
            return np.asarray(pts)
        log.warning("could only fit %d of %d blue-noise samples; using uniform sampling", len(pts), n)
    pts = np.empty((0, d))
    while len(pts) < n:
        cand = rng.uniform(lo, hi, size=(max(4 * (n - len(pts)), 16), d))
        cand = cand[domain(cand) >= 0]
        pts = np.vstack([pts, cand])[:n]
    return pts


def fit_radius(settings: FoamSettings, positions, v, r_lo, r_hi, lo, hi, rtol=1e-2, max_steps=60):
    """Uniform radius with V/V_0 within ``rtol`` of ``v`` (clamped to the bounds)."""
    n = len(positions)

    def frac(r):
        seeds = SeedSet(positions, np.full(n, r), lo, hi)
        st = FoamState(settings, seeds)
        return volume(st.density, settings.fine, settings.alpha)[1]

    f_lo = frac(r_lo)
    if f_lo >= v * (1 - rtol):
        if f_lo > v * (1 + rtol):
            log.warning("V/V_0 = %.4g at the smallest radius already exceeds v = %.4g", f_lo, v)
        return r_lo
    f_hi = frac(r_hi)
    if f_hi <= v * (1 + rtol):
        if f_hi < v * (1 - rtol):
            log.warning("V/V_0 = %.4g at the largest radius is below v = %.4g", f_hi, v)
        return r_hi
    a, b = r_lo, r_hi
    r = 0.5 * (a + b)
    for _ in range(max_steps):
        r = 0.5 * (a + b)
        f = frac(r)
        if abs(f - v) <= rtol * v:
            return r
        if f < v:
            a = r
        else:
            b = r
    return r


def init_seeds(domain, n, rng_seed=0, strategy="uniform", v=None, settings=None,
               r_lo=None, r_hi=None, lo=None, hi=None) -> SeedSet:
    """Seeds inside Ω, optionally with a uniform radius that meets the volume target."""
    if n < 1:
        raise ValueError("need at least one seed")
    lo = np.asarray(domain.bbox[0] if lo is None else lo, dtype=float)
    hi = np.asarray(domain.bbox[1] if hi is None else hi, dtype=float)
    rng = np.random.default_rng(rng_seed)
    X = sample_positions(domain, n, rng, strategy, domain.bbox[0], domain.bbox[1])
    if settings is None or v is None:
        r = r_lo if r_lo is not None else 0.05 * float(np.min(hi - lo))
        return SeedSet(X, np.full(n, r), lo, hi)
    r = fit_radius(settings, X, v, r_lo, r_hi, lo, hi)
    return SeedSet(X, np.full(n, r), lo, hi)


def default_radius_bounds(settings: FoamSettings, n, r_min_factor=2.0, r_max=None):
    la = settings.l_a
    r_lo = r_min_factor * la
    if r_max is None:
        ell = (domain_volume(settings) / n) ** (1.0 / settings.fine.dim)
        r_max = max(2 * r_lo, 0.25 * ell)
    return r_lo, r_max


def domain_volume(settings: FoamSettings):
    fine = settings.fine
    return float(fine.volumes @ (settings.incidence @ settings.mask))


# -- evaluation ----------------------------------------------------------------

@dataclass
class Evaluation:
    C: float
    S: float
    V_frac: float
    dC: np.ndarray | None = None
    dV: np.ndarray | None = None
    dS: np.ndarray | None = None
    flagged: int = 0
    state: FoamState | None = None
    system: object = None


class Evaluator:
    """Seeds -> (C, S, V) and design gradients on a fixed mesh and load case."""

    def __init__(self, settings: FoamSettings, loadcase: LoadCase | None = None, sim="coarse",
                 coarse_mesh=None, material: Material = Material(), shape_resolution=None,
                 exact_shape=True, guard=True):
        if sim not in ("fine", "coarse"):
            raise ValueError("sim must be 'fine' or 'coarse'")
        if sim == "coarse" and coarse_mesh is None and loadcase is not None:
            raise ValueError("coarse simulation needs a coarse mesh")
        self.settings = settings
        self.loadcase = loadcase
        self.sim = sim
        self.coarse = coarse_mesh
        self.cache = StiffnessCache(settings.fine, material) if loadcase is not None else None
        self.shape_resolution = shape_resolution
        self.exact_shape = exact_shape
        self.guard = guard
        self.V0 = domain_volume(settings)

    def shape(self, seeds: SeedSet, graph=None):
        if graph is None:
            graph = tessellate(seeds, margin_box(seeds.bbox_lo, seeds.bbox_hi))
        return shape_energy_and_gradient(seeds, graph, self.settings.domain, self.shape_resolution,
                                         self.exact_shape)

    def simulate(self, state: FoamState):
        H = state.density.H
        if self.sim == "fine":
            K = self.cache.assemble(H)
            q = solve(K, self.loadcase, self.settings.fine.nodes)
            return compliance(K, q, self.loadcase.f), q, None
        system = CoarseSystem(self.coarse, self.cache, H, self.loadcase)
        system.solve()
        return system.C, system.q, system

    def __call__(self, seeds: SeedSet, grad=True, physics=True) -> Evaluation:
        if not physics:
            S, dS = self.shape(seeds)
            return Evaluation(math.nan, S, math.nan, dS=dS if grad else None)
        s = self.settings
        state = FoamState(s, seeds)
        S, dS = self.shape(seeds, state.raw)
        Vf = volume(state.density, s.fine, s.alpha)[1]
        C, q, system = self.simulate(state)
        out = Evaluation(C, S, Vf, state=state, system=system)
        if grad:
            slices = all_slices(state, radii=True, guard=self.guard)
            energies = element_energies(self.cache, q)
            out.dC = compliance_gradient(slices, energies, s)
            out.dV = volume_gradient(slices, s) / self.V0
            out.dS = dS
            out.flagged = sum(sl.flagged for sl in slices)
        return out


def finite_difference_check(evaluator: Evaluator, problem: OptProblem, seeds: SeedSet, sample=None,
                            step=None, rng_seed=0):
    """Assembled (dC, dV, dS) against central differences of full re-evaluations.

    Returns ``(names, analytic, reference)``; ``sample`` limits the check to
    that many randomly chosen variables.
    """
    physics = evaluator.loadcase is not None and not problem.shape_only
    base = evaluator(seeds, grad=True, physics=physics)
    h = evaluator.settings.step if step is None else step
    d = seeds.dim
    allv = variables(seeds, radii=physics)
    pick = np.arange(len(allv))
    if sample is not None and sample < len(allv):
        pick = np.sort(np.random.default_rng(rng_seed).choice(len(allv), sample, replace=False))
    names, analytic, reference = [], [], []
    for j in pick:
        i, c = allv[j]
        sides = []
        for delta in (h, -h):
            X, r = seeds.positions.copy(), seeds.radii.copy()
            if c < d:
                X[i, c] += delta
                if not problem.lo[c] <= X[i, c] <= problem.hi[c]:
                    continue
            else:
                r[i] += delta
            sides.append((delta, evaluator(_unchecked(seeds, X, r), grad=False, physics=physics)))
        if len(sides) == 2:
            (_, ep), (_, em) = sides
            denom = 2 * h
        else:
            (delta, ep), em = sides[0], base
            denom = delta
        tag = f"X[{i}][{c}]" if c < d else f"r[{i}]"
        if physics:
            names += [f"dC/d{tag}", f"dV/d{tag}"]
            analytic += [base.dC[j], base.dV[j]]
            reference += [(ep.C - em.C) / denom, (ep.V_frac - em.V_frac) / denom]
        if c < d:
            names.append(f"dS/d{tag}")
            analytic.append(base.dS[i, c])
            reference.append((ep.S - em.S) / denom)
    return names, np.array(analytic), np.array(reference)


# -- driver ----------------------------------------------------------------------

@dataclass
class RunResult:
    seeds: SeedSet
    trace: OptTrace
    converged: bool
    feasible: bool
    iterations: int
    C_ref: float
    final: Evaluation | None = None


def _save_checkpoint(path, z, iteration, rng, st: GCMMAState | None, C_ref, trace):
    data = {
        "iteration": iteration,
        "z": np.asarray(z).tolist(),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "C_ref": C_ref,
        "trace": [asdict(r) for r in trace.records],
    }
    if st is not None:
        data["gcmma"] = {k: (None if getattr(st, k) is None else np.asarray(getattr(st, k)).tolist())
                         for k in ("xold1", "xold2", "low", "upp")}
        data["gcmma"]["iteration"] = st.iteration
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(data, fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path) as fh:
        return json.load(fh)


def run(problem: OptProblem, evaluator: Evaluator, seeds: SeedSet, checkpoint=None, resume=None,
        rng=None, callback=None) -> RunResult:
    """Iterate GCMMA until ch(k) < tol or the iteration cap.

    In shape-only mode (w = 1) radii stay fixed and no simulation is run.
    """
    shape_only = problem.shape_only
    physics = not shape_only
    n = len(seeds)
    seeds = SeedSet(seeds.positions, seeds.radii, problem.lo, problem.hi)
    fixed_r = seeds.radii.copy()
    z = problem.to_unit(seeds)
    scale = problem.unit_scale(n)
    trace = OptTrace(problem.v)
    st = GCMMAState(len(z), 1)
    C_ref = None
    k0 = 0
    if resume is not None:
        data = load_checkpoint(resume) if isinstance(resume, str) else resume
        z = np.asarray(data["z"], dtype=float)
        k0 = int(data["iteration"])
        C_ref = data.get("C_ref")
        trace.records = [IterRecord(**r) for r in data.get("trace", [])]
        g = data.get("gcmma")
        if g:
            for key in ("xold1", "xold2", "low", "upp"):
                setattr(st, key, None if g[key] is None else np.asarray(g[key]))
            st.iteration = g["iteration"]
        if rng is not None and data.get("rng_state"):
            rng.bit_generator.state = data["rng_state"]

    ell = (evaluator.V0 / n) ** (1.0 / problem.dim)
    S_ref = n * ell ** 2

    def design(zz):
        return problem.from_unit(zz, fixed_r if shape_only else None)

    def merit(ev: Evaluation):
        J = problem.w * ev.S / S_ref
        if physics:
            J += (1 - problem.w) * ev.C / C_ref
        return J

    def constraint(ev: Evaluation):
        if not physics:
            return np.array([-1.0])
        return np.array([ev.V_frac / problem.v - 1.0])

    def evaluate(zz, grad):
        try:
            return evaluator(design(zz), grad=grad, physics=physics)
        except SingularSystemError as exc:
            dump = None
            if checkpoint is not None:
                dump = str(checkpoint)
                _save_checkpoint(dump, zz, len(trace), rng, st, C_ref, trace)
            raise OptimizationAborted(f"solver failure: {exc}", dump) from exc

    t0 = time.perf_counter()
    ev = evaluate(z, True)
    if C_ref is None:
        C_ref = ev.C if physics else 1.0
    if physics and not (C_ref > 0 and np.isfinite(C_ref)):
        raise OptimizationAborted(f"initial compliance {C_ref} is not positive")

    def record(k, ev, inner=0):
        J = merit(ev)
        rec = IterRecord(k, float(ev.C), float(ev.S), float(J), float(ev.V_frac), 1.0,
                         time.perf_counter() - t0, int(ev.flagged), int(inner))
        trace.append(rec)
        rec.ch = convergence_check(trace, len(trace) - 1)
        if callback is not None:
            callback(rec, ev)
        return rec

    if not trace.records:
        record(0, ev)
        if checkpoint is not None:
            _save_checkpoint(checkpoint, z, 0, rng, None, C_ref, trace)
    best = (z.copy(), ev) if _feasible(ev, problem) else None
    converged = False
    k = max(k0, len(trace) - 1)
    while k < problem.max_iter:
        f0 = merit(ev)
        df0 = problem.w * ev.dS.ravel() / S_ref
        if physics:
            df0 = np.concatenate([df0, np.zeros(n)]) + (1 - problem.w) * ev.dC / C_ref
            fval = constraint(ev)
            dfdx = (ev.dV / problem.v)[None, :] * scale[None, :]
        else:
            fval = constraint(ev)
            dfdx = np.zeros((1, len(z)))
        df0 = df0 * scale

        def values(zz):
            e = evaluate(zz, False)
            return merit(e), constraint(e)

        z, _, _ = gcmma_step(st, z, np.zeros_like(z), np.ones_like(z), f0, df0, fval, dfdx, values)
        k += 1
        ev = evaluate(z, True)
        rec = record(k, ev, st.inner_counts[-1])
        log.info("iter %d  J=%.6g  C=%.6g  S=%.6g  V/V0=%.4f  ch=%.3g", k, rec.J, rec.C, rec.S,
                 rec.V_frac, rec.ch)
        if _feasible(ev, problem) and (best is None or merit(ev) <= merit(best[1])):
            best = (z.copy(), ev)
        if checkpoint is not None:
            _save_checkpoint(checkpoint, z, k, rng, st, C_ref, trace)
        if rec.ch < problem.ch_tol:
            converged = True
            break

    final_z, final_ev = z, ev
    feasible = _feasible(ev, problem)
    if not feasible and best is not None:
        final_z, final_ev = best
        feasible = True
    return RunResult(design(final_z), trace, converged, feasible, k, C_ref, final_ev)


def _feasible(ev: Evaluation, problem: OptProblem):
    if not np.isfinite(ev.V_frac):
        return True
    return ev.V_frac <= problem.v * (1 + 1e-3)
