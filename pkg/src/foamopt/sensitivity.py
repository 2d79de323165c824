"""Design sensitivities.

Density derivatives come from finite differences of the nodal density under a
perturbation of one seed coordinate or radius.  The perturbed diagram is
recomputed globally (cheap) and diffed against the current one by the seed
sets of its edges; only vertices where a changed beam can move the KS union
are re-evaluated, so every slice equals a full recomputation.  Compliance and
volume gradients then follow from the adjoint (self-adjoint) formula.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .cells import cell_geometry, shape_energy, shape_energy_gradient
from .implicit import ImplicitFoam, ks_combine, node_density, sample_density, shell_and_faces
from .kernels import KS_SKIP, beam_union, max_beam_phi
from .voronoi import (SeedSet, VoronoiGraph, clip, default_k, margin_box, tessellate, three_point_phi)

log = logging.getLogger(__name__)


@dataclass
class FoamSettings:
    """Everything that turns seeds into a density field on a fixed fine mesh."""

    fine: object
    domain: object
    eps: float | None = None
    p: float = 16.0
    scale: float | None = None
    alpha: float = 1e-6
    shell: float | None = None
    boundary_faces: bool = False
    step: float | None = None
    mode: str = "reconstruct"
    k: int | None = None

    def __post_init__(self):
        la = self.fine.l_a
        self.eps = 1.5 * la if self.eps is None else self.eps
        self.scale = la if self.scale is None else self.scale
        self.step = la if self.step is None else self.step
        self.k = default_k(self.fine.dim) if self.k is None else self.k
        if self.mode not in ("auto", "reconstruct", "three_point"):
            raise ValueError(f"unknown sensitivity mode {self.mode!r}")
        d = self.fine.dim
        n, E = len(self.fine.nodes), len(self.fine.elements)
        rows = np.repeat(np.arange(E), d + 1)
        self.incidence = sp.csr_matrix((np.full(E * (d + 1), 1.0 / (d + 1)),
                                        (rows, self.fine.elements.ravel())), shape=(E, n))
        self.tree = cKDTree(self.fine.nodes)
        self.mask = self.fine.node_mask(self.domain)
        self.phi_domain = self.domain(self.fine.nodes) if self.domain is not None else np.full(n, np.inf)
        self.cut = KS_SKIP * self.scale / self.p

    @property
    def l_a(self):
        return self.fine.l_a

    def foam(self, graph, seeds) -> ImplicitFoam:
        return ImplicitFoam.from_graph(graph, seeds, self.eps, p=self.p, alpha=self.alpha, scale=self.scale,
                                       domain=self.domain, shell=self.shell, boundary_faces=self.boundary_faces)


class FoamState:
    """Tessellation, clipped graph and nodal fields for one design."""

    def __init__(self, settings: FoamSettings, seeds: SeedSet):
        self.settings = s = settings
        self.seeds = seeds
        self.bbox = margin_box(seeds.bbox_lo, seeds.bbox_hi)
        self.raw = tessellate(seeds, self.bbox)
        self.graph = clip(self.raw, s.domain, s.l_a)
        self.foam = s.foam(self.graph, seeds)
        nodes = s.fine.nodes
        self.extra = shell_and_faces(nodes, self.foam)
        self.beam_phi = beam_union(nodes, self.graph.p0, self.graph.p1, self.graph.rbar, s.p, s.scale)
        self.node_phi = ks_combine(self.beam_phi, self.extra, s.p, s.scale)
        self.density = sample_density(s.fine, self.foam, node_phi=self.node_phi)
        self._near = None

    # -- perturbed diagrams -------------------------------------------------
    def _diff(self, raw_new: VoronoiGraph):
        """Old raw edges gone and new raw edges added (matched by seed set and ends)."""
        diag = np.linalg.norm(self.bbox[1] - self.bbox[0])
        tol = 1e-12 * diag
        old = {}
        for j, key in enumerate(map(tuple, np.sort(self.raw.adjacent, axis=1).tolist())):
            old[key] = j
        matched = np.zeros(len(self.raw), dtype=bool)
        added = []
        P0, P1 = self.raw.p0, self.raw.p1
        N0, N1 = raw_new.p0, raw_new.p1
        for j, key in enumerate(map(tuple, np.sort(raw_new.adjacent, axis=1).tolist())):
            o = old.get(key)
            if o is not None and not matched[o]:
                same = ((np.abs(N0[j] - P0[o]).max() <= tol and np.abs(N1[j] - P1[o]).max() <= tol) or
                        (np.abs(N0[j] - P1[o]).max() <= tol and np.abs(N1[j] - P0[o]).max() <= tol))
                if same and raw_new.rbar[j] == self.raw.rbar[o]:
                    matched[o] = True
                    continue
            added.append(j)
        return np.nonzero(~matched)[0], np.array(added, dtype=int)

    def perturbed_beams(self, seeds_new: SeedSet, radius_of: int | None = None):
        """(kept piece mask, added beams p0, p1, rbar) of the perturbed foam."""
        s = self.settings
        g = self.graph
        if radius_of is not None:
            hit = np.any(g.adjacent == radius_of, axis=1)
            rb = seeds_new.radii[g.adjacent[hit]].mean(axis=1)
            return ~hit, g.p0[hit], g.p1[hit], rb
        raw_new = tessellate(seeds_new, self.bbox)
        gone, added = self._diff(raw_new)
        keep = ~np.isin(g.origin, gone)
        if len(added) == 0:
            return keep, np.zeros((0, g.dim)), np.zeros((0, g.dim)), np.zeros(0)
        sub = VoronoiGraph(raw_new.vertices, raw_new.edges[added], raw_new.adjacent[added],
                           raw_new.rbar[added], np.zeros(len(raw_new.vertices), bool),
                           raw_new.neighbors, raw_new.sites)
        c = clip(sub, s.domain, s.l_a)
        return keep, c.p0, c.p1, c.rbar

    def _candidates(self, p0, p1, rbar):
        """Fine nodes within reach of the given beams."""
        if len(rbar) == 0:
            return np.zeros(0, dtype=int)
        s = self.settings
        mid = 0.5 * (p0 + p1)
        half = 0.5 * np.linalg.norm(p1 - p0, axis=1)
        # phi_j >= Phi - cut needs dist <= rbar - Phi + cut, and where Phi <= -eps
        # before and after the move the density sits at alpha either way
        floor = -s.eps
        reach = half + rbar - floor + s.cut
        ids = self.settings.tree.query_ball_point(mid, reach)
        return np.unique(np.concatenate([np.asarray(i, dtype=int) for i in ids])) if len(ids) else np.zeros(0, int)

    def new_phi(self, nodes_idx, keep, a0, a1, arb, extra_new=None):
        """Φ at the given nodes for the perturbed beam set (kept pieces + added)."""
        s = self.settings
        g = self.graph
        pts = s.fine.nodes[nodes_idx]
        P0 = np.vstack([g.p0[keep], a0])
        P1 = np.vstack([g.p1[keep], a1])
        R = np.concatenate([g.rbar[keep], arb])
        extra = self.extra[nodes_idx] if extra_new is None else extra_new
        if len(pts) == 0:
            return np.zeros(0)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        mid = 0.5 * (P0 + P1)
        half = 0.5 * np.linalg.norm(P1 - P0, axis=1)
        dbox = np.linalg.norm(np.maximum(np.maximum(lo - mid, mid - hi), 0.0), axis=1)
        ub = R - (dbox - half)
        old = self.node_phi[nodes_idx]
        t = (np.min(old[np.isfinite(old)]) if np.isfinite(old).any() else -np.inf) - s.cut
        while True:
            sel = ub >= t
            phi = ks_combine(beam_union(pts, P0[sel], P1[sel], R[sel], s.p, s.scale), extra, s.p, s.scale)
            need = np.min(phi) - s.cut if len(phi) else np.inf
            if not np.any(~sel & (ub >= need)):
                return phi
            t = min(need, t - s.cut)

    def affected(self, keep, a0, a1, arb):
        """Nodes where removed or added beams come within the KS cut of Φ."""
        s = self.settings
        g = self.graph
        gone = ~keep
        r0, r1, rr = g.p0[gone], g.p1[gone], g.rbar[gone]
        cand = np.union1d(self._candidates(r0, r1, rr), self._candidates(a0, a1, arb))
        if len(cand) == 0:
            return cand
        pts = s.fine.nodes[cand]
        thr = self.node_phi[cand] - s.cut
        hit = np.zeros(len(cand), dtype=bool)
        for q0, q1, qr in ((r0, r1, rr), (a0, a1, arb)):
            if len(qr):
                hit |= max_beam_phi(pts, q0, q1, qr) >= thr
        return cand[hit]

    # -- three-point branch ----------------------------------------------------
    def near_seeds(self):
        """Per node: ids of the d nearest seeds and whether local radii vary <= 2x."""
        if self._near is None:
            s = self.settings
            d = s.fine.dim
            k = min(s.k, len(self.seeds))
            dist, ids = cKDTree(self.seeds.positions).query(s.fine.nodes, k)
            ids = ids.reshape(len(ids), -1)
            dist = dist.reshape(len(dist), -1)
            rad = self.seeds.radii[ids]
            uniform = rad.max(axis=1) <= 2.0 * rad.min(axis=1)
            self._near = (ids[:, :d], dist, uniform)
        return self._near


# -- per-variable density slices --------------------------------------------

@dataclass
class DensitySlice:
    nodes: np.ndarray
    dH: np.ndarray             # d (nodal density) / d a
    flagged: bool = False

    def element_values(self, settings: FoamSettings):
        return settings.incidence[:, self.nodes] @ self.dH


def _node_H(state, idx, phi):
    s = state.settings
    return node_density(phi, s.mask[idx], s.eps, s.alpha)


def _side_phi(state: FoamState, var, delta):
    """(node ids, Φ) for one perturbed design; ``var`` = (seed, axis) with axis d = radius."""
    s = state.settings
    seeds = state.seeds
    i, c = var
    d = seeds.dim
    if c < d:
        X = seeds.positions.copy()
        X[i, c] += delta
        new = _unchecked(seeds, X, seeds.radii)
        keep, a0, a1, arb = state.perturbed_beams(new)
    else:
        r = seeds.radii.copy()
        r[i] += delta
        new = _unchecked(seeds, seeds.positions, r)
        keep, a0, a1, arb = state.perturbed_beams(new, radius_of=i)
    idx = state.affected(keep, a0, a1, arb)
    extra_new = None
    if s.boundary_faces and d == 3:
        ribs = _rib_candidates(state, i, abs(delta))
        idx = np.union1d(idx, ribs)
        extra_new = shell_and_faces(s.fine.nodes[idx], s.foam(state.graph, new))
    phi = state.new_phi(idx, keep, a0, a1, arb, extra_new)
    return idx, phi, new


def _rib_candidates(state, i, h):
    s = state.settings
    if state.extra.shape[1] == 0:
        return np.zeros(0, dtype=int)
    ids, dist, _ = state.near_seeds()
    kth = dist[:, min(2, dist.shape[1] - 1)]
    # farther from the boundary a rib stays below -eps and the density at alpha
    reach = state.seeds.radii.max() + h + s.eps + s.cut
    near = np.asarray(s.tree.query_ball_point(state.seeds.positions[i], float(kth.max()) + h), dtype=int)
    x = s.fine.nodes[near]
    close = np.linalg.norm(x - state.seeds.positions[i], axis=1) - h <= kth[near]
    band = np.abs(s.phi_domain[near]) <= reach
    return np.sort(near[close & band & (s.mask[near] > 0)])


def _unchecked(seeds, X, r):
    obj = SeedSet.__new__(SeedSet)
    obj.positions, obj.radii, obj.bbox_lo, obj.bbox_hi = X, r, seeds.bbox_lo, seeds.bbox_hi
    return obj


def _three_point_side(state, var, delta, nodes_idx):
    s = state.settings
    seeds = state.seeds
    i, c = var
    X = seeds.positions.copy()
    r = seeds.radii.copy()
    if c < seeds.dim:
        X[i, c] += delta
    else:
        r[i] += delta
    pts = s.fine.nodes[nodes_idx]
    d = seeds.dim
    dist = np.linalg.norm(pts[:, None, :] - X[None, :, :], axis=2)
    near = np.argsort(dist, axis=1, kind="stable")[:, :d]
    phi = three_point_phi(pts, near, X, r)
    return ks_combine(phi, state.extra[nodes_idx], s.p, s.scale)


def density_derivative(state: FoamState, var, step=None, flagged=False) -> DensitySlice:
    """dH/da at the fine nodes for variable ``var = (seed, axis)``; axis == d is the radius.

    Central differences by default; forward (or backward at a bound) when the
    variable is flagged by the differentiability guard.
    """
    s = state.settings
    seeds = state.seeds
    h = s.step if step is None else step
    i, c = var
    d = seeds.dim
    if c < d:
        lo, hi = seeds.bbox_lo[c], seeds.bbox_hi[c]
        x = seeds.positions[i, c]
        plus_ok, minus_ok = x + h <= hi, x - h >= lo
    else:
        # the field is affine in the radius, so r - h < 0 is harmless
        plus_ok = minus_ok = True
    if flagged:
        minus_ok = minus_ok and not plus_ok
    sides = []
    if plus_ok:
        sides.append(h)
    if minus_ok:
        sides.append(-h)
    if len(sides) == 1:
        flagged = True
    values = {}
    union = np.zeros(0, dtype=int)
    for delta in sides:
        idx, phi, _ = _side_phi(state, var, delta)
        values[delta] = (idx, phi)
        union = np.union1d(union, idx)

    use_tp = None
    if s.mode in ("auto", "three_point"):
        ids, dist, uniform = state.near_seeds()
        # nodes whose d nearest seeds involve seed i now or after the move
        cand = np.nonzero(np.any(ids == i, axis=1) |
                          (np.linalg.norm(s.fine.nodes - seeds.positions[i], axis=1) - h <= dist[:, d - 1]))[0]
        tp = cand if s.mode == "three_point" else cand[uniform[cand]]
        union = np.union1d(union, tp)
        use_tp = np.isin(union, tp)

    def side_values(delta):
        if delta == 0.0:
            return state.node_phi[union]
        idx, phi = values[delta]
        out = state.node_phi[union].copy()
        pos = np.searchsorted(union, idx)
        out[pos] = phi
        if use_tp is not None and use_tp.any():
            out[use_tp] = _three_point_side(state, var, delta, union[use_tp])
        return out

    if len(sides) == 2:
        Hp = _node_H(state, union, side_values(h))
        Hm = _node_H(state, union, side_values(-h))
        dH = (Hp - Hm) / (2 * h)
    else:
        delta = sides[0]
        Hs = _node_H(state, union, side_values(delta))
        if use_tp is not None and use_tp.any():
            H0 = _node_H(state, union, side_values(0.0))
            H0[use_tp] = _node_H(state, union[use_tp], _three_point_side(state, var, 0.0, union[use_tp]))
        else:
            H0 = state.density.node_H[union]
        dH = (Hs - H0) / delta
    nz = dH != 0
    return DensitySlice(union[nz], dH[nz], flagged)


# -- differentiability guard -------------------------------------------------

def differentiability_guard(x0, local_seeds, l_a, tol_factor=1e-3):
    """True if ``x0`` sits at a near-critical configuration of its nearest seeds.

    (i) the d+2 nearest seeds are (nearly) cocircular / cospherical, tested by
    the distance of the (d+2)-th seed to the circumsphere of the first d+1;
    (ii) ``x0`` is within ``tol_factor * l_a`` of the locus equidistant from
    its d nearest seeds.
    """
    x0 = np.asarray(x0, dtype=float)
    S = np.asarray(local_seeds, dtype=float)
    d = S.shape[1]
    tol = tol_factor * l_a
    order = np.argsort(np.linalg.norm(S - x0, axis=1), kind="stable")
    S = S[order]
    dist = np.linalg.norm(S - x0, axis=1)
    if len(S) >= d + 2:
        A = 2 * (S[1:d + 1] - S[0])
        b = np.einsum("ij,ij->i", S[1:d + 1], S[1:d + 1]) - S[0] @ S[0]
        if abs(np.linalg.det(A)) > 1e-300:
            c = np.linalg.solve(A, b)
            R = np.linalg.norm(S[0] - c)
            for k in range(d + 1, len(S)):
                if abs(np.linalg.norm(S[k] - c) - R) <= tol:
                    return True
        else:
            return True
    if len(S) >= 2:
        # ties between nearest distances mean x0 is on a cell boundary
        if dist[1] - dist[0] <= tol:
            if d == 2 or len(S) < 3 or dist[2] - dist[0] <= tol:
                return True
    return False


def critical_seeds(state: FoamState, tol_factor=1e-3):
    """Seeds taking part in a nearly degenerate Voronoi vertex inside the domain box."""
    s = state.settings
    seeds = state.seeds
    d = seeds.dim
    n = len(seeds)
    if n < d + 2:
        return set()
    tol = tol_factor * s.l_a
    lo, hi = s.domain.bbox
    rmax = seeds.radii.max()
    V = state.raw.vertices
    inside = np.all((V >= lo - rmax - s.eps) & (V <= hi + rmax + s.eps), axis=1)
    V = V[inside & np.all(np.isfinite(V), axis=1)]
    if len(V) == 0:
        return set()
    dist, ids = cKDTree(seeds.positions).query(V, d + 2)
    bad = dist[:, d + 1] - dist[:, 0] <= tol
    out = set()
    for row, drow in zip(ids[bad], dist[bad]):
        out.update(int(j) for j, dj in zip(row, drow) if dj - drow[0] <= tol)
    return out


# -- gradients ---------------------------------------------------------------

def nodal_weights(settings: FoamSettings, element_weights):
    """Pull per-element weights back to nodes through the nodal average."""
    return settings.incidence.T @ element_weights


def compliance_gradient(slices, energies, settings: FoamSettings):
    """dC/da = -1/2 sum_e dH_e q_e^T k_e q_e for each slice."""
    w = -0.5 * nodal_weights(settings, energies)
    return np.array([float(w[sl.nodes] @ sl.dH) for sl in slices])


def volume_gradient(slices, settings: FoamSettings):
    """dV/da = sum_e |D_e| dH_e."""
    w = nodal_weights(settings, settings.fine.volumes)
    return np.array([float(w[sl.nodes] @ sl.dH) for sl in slices])


def shape_energy_and_gradient(seeds: SeedSet, graph, domain, resolution=None, exact=True):
    """S over cells inside Ω and dS/dX.

    ``exact`` includes the motion of the cell faces (the derivative of the
    centroids); otherwise centroids are frozen (Lloyd direction 2(X - X^c)).
    """
    cells = cell_geometry(seeds.positions, graph.neighbors, domain, resolution, with_faces=exact)
    S = shape_energy(seeds.positions, cells)
    if exact:
        return S, shape_energy_gradient(seeds.positions, cells)
    g = np.zeros_like(seeds.positions)
    for i, c in enumerate(cells):
        if c.mass > 0:
            g[i] = 2.0 * (seeds.positions[i] - c.centroid)
    return S, g


def variables(seeds: SeedSet, radii=True):
    """Design variables in packing order: all coordinates seed-major, then radii."""
    n, d = seeds.positions.shape
    out = [(i, c) for i in range(n) for c in range(d)]
    if radii:
        out += [(i, d) for i in range(n)]
    return out


def all_slices(state: FoamState, radii=True, guard=True):
    crit = critical_seeds(state) if guard else set()
    out = []
    for var in variables(state.seeds, radii):
        flagged = var[0] in crit
        out.append(density_derivative(state, var, flagged=flagged))
    n_flag = sum(sl.flagged for sl in out)
    if n_flag:
        log.info("%d variables used one-sided differences", n_flag)
    return out


def write_gradient_check(path, names, analytic, reference):
    """CSV with analytic vs reference derivative per variable."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "analytic", "finite_difference", "abs_error", "rel_error"])
        for n, a, r in zip(names, analytic, reference):
            err = abs(a - r)
            w.writerow([n, f"{a:.10g}", f"{r:.10g}", f"{err:.3g}", f"{err / max(abs(r), 1e-300):.3g}"])


def cosine(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(a @ b / (na * nb))
