"""Voronoi tessellation of the seed set, clipping, beams and cell centroids.

The diagram is extracted as the dual of a scipy/Qhull Delaunay triangulation.
A ring of far-away ghost points makes every cell bounded; ghosts sit far
enough out that they are never the nearest site inside the margin box, so the
truncated diagram is exact.  Zero-length duals produced by cocircular sites
are dropped.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, cKDTree
from scipy.spatial import QhullError

from .kernels import beam_union


class DuplicateSeedError(ValueError):
    pass


class DegenerateConfiguration(ValueError):
    """Nearest sites are collinear/coincident; a local reconstruction is needed."""


@dataclass
class SeedSet:
    positions: np.ndarray
    radii: np.ndarray
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        self.bbox_lo = np.asarray(self.bbox_lo, dtype=float)
        self.bbox_hi = np.asarray(self.bbox_hi, dtype=float)
        if len(self.positions) == 0:
            raise ValueError("seed set is empty")
        if len(self.radii) != len(self.positions):
            raise ValueError("positions and radii differ in length")
        if np.any(self.radii <= 0):
            raise ValueError("radii must be positive")
        tol = 1e-9 * float(np.linalg.norm(self.bbox_hi - self.bbox_lo))
        if np.any(self.positions < self.bbox_lo - tol) or np.any(self.positions > self.bbox_hi + tol):
            raise ValueError("seed outside its design bounds")

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def __len__(self):
        return len(self.positions)

    def replace(self, positions=None, radii=None) -> "SeedSet":
        return SeedSet(self.positions if positions is None else positions,
                       self.radii if radii is None else radii,
                       self.bbox_lo, self.bbox_hi)


@dataclass
class VoronoiGraph:
    """Edges of a (truncated, possibly clipped) Voronoi diagram.

    ``edges[j]`` indexes ``vertices``; ``adjacent[j]`` lists the d sites
    equidistant from edge j (2 in 2D, 3 in 3D); ``on_boundary[v]`` marks
    vertices created by clipping.
    """

    vertices: np.ndarray
    edges: np.ndarray
    adjacent: np.ndarray
    rbar: np.ndarray
    on_boundary: np.ndarray
    neighbors: list = field(default_factory=list, repr=False)
    sites: np.ndarray | None = field(default=None, repr=False)
    # for clipped graphs: index of the source edge of each piece
    origin: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self):
        return self.vertices.shape[1]

    def __len__(self):
        return len(self.edges)

    @property
    def p0(self):
        return self.vertices[self.edges[:, 0]]

    @property
    def p1(self):
        return self.vertices[self.edges[:, 1]]

    def with_radii(self, radii) -> "VoronoiGraph":
        return VoronoiGraph(self.vertices, self.edges, self.adjacent,
                            beam_radii(self.adjacent, radii), self.on_boundary, self.neighbors, self.sites,
                            self.origin)

    def edge_keys(self):
        return [tuple(sorted(a)) for a in self.adjacent.tolist()]


def margin_box(lo, hi, factor=2.0):
    """Axis box grown on every side by ``factor`` times its diagonal."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    pad = factor * np.linalg.norm(hi - lo)
    return lo - pad, hi + pad


def beam_radius(adjacent, radii) -> float:
    """Mean radius of the sites adjacent to one edge."""
    adjacent = list(adjacent)
    if not adjacent:
        raise ValueError("edge without adjacent seeds")
    return float(np.mean(np.asarray(radii)[adjacent]))


def beam_radii(adjacent, radii):
    if len(adjacent) == 0:
        return np.zeros(0)
    return np.asarray(radii)[adjacent].mean(axis=1)


def check_duplicates(positions, diag):
    tree = cKDTree(positions)
    pairs = tree.query_pairs(1e-12 * diag, output_type="ndarray")
    if len(pairs):
        pts = sorted(tuple(positions[i]) for i in np.unique(pairs))
        raise DuplicateSeedError(f"coincident seeds at {pts[0]}")


def _circumcenters(pts):
    """Circumcenters and radii of simplices given as (T, d+1, d)."""
    base = pts[:, 0, :]
    A = pts[:, 1:, :] - base[:, None, :]
    rhs = 0.5 * np.einsum("tkd,tkd->tk", A, A)
    det = np.linalg.det(A)
    ok = np.abs(det) > 1e-300
    c = np.full(base.shape, np.nan)
    if ok.any():
        c[ok] = np.linalg.solve(A[ok], rhs[ok][..., None])[..., 0]
    return base + c, np.linalg.norm(c, axis=1)


def _clip_segments_to_box(p0, p1, lo, hi):
    """Liang-Barsky; returns clipped endpoints and a keep mask."""
    d = p1 - p0
    t0 = np.zeros(len(p0))
    t1 = np.ones(len(p0))
    keep = np.ones(len(p0), dtype=bool)
    for k in range(p0.shape[1]):
        dk = d[:, k]
        par = np.abs(dk) < 1e-300
        keep &= ~(par & ((p0[:, k] < lo[k]) | (p0[:, k] > hi[k])))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[k] - p0[:, k]) / dk
            tb = (hi[k] - p0[:, k]) / dk
        tmin = np.where(par, -np.inf, np.minimum(ta, tb))
        tmax = np.where(par, np.inf, np.maximum(ta, tb))
        t0 = np.maximum(t0, tmin)
        t1 = np.minimum(t1, tmax)
    keep &= t1 > t0
    return p0 + t0[:, None] * d, p0 + t1[:, None] * d, keep, t0 > 0, t1 < 1


def _ghosts(lo, hi):
    center = 0.5 * (lo + hi)
    R = 4.0 * np.linalg.norm(hi - lo)
    d = len(lo)
    corners = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
    # distinct scales keep the ghosts off a common sphere (no flat simplices)
    stretch = 1.0 + 0.05 * np.arange(len(corners)) / len(corners)
    return center + R * stretch[:, None] * corners


def tessellate(seeds: SeedSet, bbox=None) -> VoronoiGraph:
    """Voronoi edges of ``seeds`` truncated to ``bbox``.

    ``bbox`` defaults to ``margin_box`` of the seeds' design bounds.
    """
    X = seeds.positions
    n, d = X.shape
    if d not in (2, 3):
        raise ValueError("only 2D and 3D seeds are supported")
    lo, hi = bbox if bbox is not None else margin_box(seeds.bbox_lo, seeds.bbox_hi)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    diag = float(np.linalg.norm(hi - lo))
    if np.any(X <= lo) or np.any(X >= hi):
        raise ValueError("tessellation box must strictly contain all seeds")
    check_duplicates(X, diag)

    empty = VoronoiGraph(np.zeros((0, d)), np.zeros((0, 2), int), np.zeros((0, d), int),
                         np.zeros(0), np.zeros(0, bool), [set() for _ in range(n)], X.copy())
    if n < d:
        # 3D with two sites: a single bisecting face and no edges
        if d == 3 or n == 1:
            if n == 2:
                empty.neighbors = [{1}, {0}]
            return empty

    pts = np.vstack([X, _ghosts(lo, hi)])
    try:
        tri = Delaunay(pts)
    except QhullError:
        tri = Delaunay(pts, qhull_options="Qbb Qc Qz Q12 QJ")
    simp = tri.simplices
    cc, _ = _circumcenters(pts[simp])

    # each facet made only of real seeds is dual to one Voronoi edge
    neighbors = [set() for _ in range(n)]
    s_idx, k_idx = np.nonzero(tri.neighbors >= 0)
    other = tri.neighbors[s_idx, k_idx]
    once = s_idx < other
    s_idx, k_idx, other = s_idx[once], k_idx[once], other[once]
    mask = np.ones((len(s_idx), d + 1), dtype=bool)
    mask[np.arange(len(s_idx)), k_idx] = False
    facets = simp[s_idx][mask].reshape(len(s_idx), d)
    real = np.all(facets < n, axis=1)
    s_idx, other, facets = s_idx[real], other[real], np.sort(facets[real], axis=1)

    for f in facets:
        for a, b in itertools.combinations(f, 2):
            neighbors[a].add(int(b))
            neighbors[b].add(int(a))

    p0, p1 = cc[s_idx], cc[other]
    length = np.linalg.norm(p1 - p0, axis=1)
    ok = length > 1e-12 * diag
    s_idx, other, facets, p0, p1 = s_idx[ok], other[ok], facets[ok], p0[ok], p1[ok]
    # zero-length duals connect sites that are not true neighbours
    if d == 2:
        neighbors = [set() for _ in range(n)]
        for a, b in facets:
            neighbors[a].add(int(b))
            neighbors[b].add(int(a))

    q0, q1, keep, cut0, cut1 = _clip_segments_to_box(p0, p1, lo, hi)
    s_idx, other, facets = s_idx[keep], other[keep], facets[keep]
    q0, q1, cut0, cut1 = q0[keep], q1[keep], cut0[keep], cut1[keep]

    m = len(q0)
    vertices = [cc]
    ids0 = s_idx.copy()
    ids1 = other.copy()
    extra = []
    nv = len(cc)
    for j in range(m):
        if cut0[j]:
            extra.append(q0[j])
            ids0[j] = nv
            nv += 1
        if cut1[j]:
            extra.append(q1[j])
            ids1[j] = nv
            nv += 1
    if extra:
        vertices.append(np.array(extra))
    vertices = np.vstack(vertices)
    edges = np.column_stack([ids0, ids1]).astype(int)
    on_boundary = np.zeros(len(vertices), dtype=bool)
    return VoronoiGraph(vertices, edges, facets.astype(int), beam_radii(facets, seeds.radii),
                        on_boundary, neighbors, X.copy())


def _bisect_many(domain, a, b, tol):
    """Vectorised bisection between inside points ``a`` and outside points ``b``."""
    a = a.copy()
    b = b.copy()
    for _ in range(200):
        if len(a) == 0 or np.max(np.linalg.norm(b - a, axis=1)) <= tol:
            break
        m = 0.5 * (a + b)
        inside = domain(m) >= 0
        a[inside] = m[inside]
        b[~inside] = m[~inside]
    return 0.5 * (a + b)


def clip(graph: VoronoiGraph, domain, l_a: float | None = None) -> VoronoiGraph:
    """Keep the parts of every edge inside ``domain`` (phi >= 0).

    Sign changes are detected by sampling at spacing ``l_a / 2``; each crossing
    is then bisected to ``1e-12`` of the domain diagonal, well inside the
    ``1e-3 * l_a`` budget, so trimmed ends do not depend on the sampling.
    Adjacency (and radius) of a trimmed piece is that of the full edge.
    """
    d = graph.dim
    if len(graph) == 0:
        return VoronoiGraph(graph.vertices, graph.edges, graph.adjacent, graph.rbar, graph.on_boundary,
                            graph.neighbors, graph.sites, np.zeros(0, dtype=int))
    if l_a is None:
        l_a = domain.diagonal / 100.0
    lo, hi = domain.bbox
    pad = 1e-6 * domain.diagonal
    p0, p1 = graph.p0, graph.p1
    b0, b1, keep, _, _ = _clip_segments_to_box(p0, p1, lo - pad, hi + pad)
    tol = 1e-12 * domain.diagonal

    idx = np.nonzero(keep)[0]
    lengths = np.linalg.norm(b1[idx] - b0[idx], axis=1)
    nsamp = np.maximum(2, np.ceil(lengths / (0.5 * l_a)).astype(int) + 1)
    offsets = np.concatenate([[0], np.cumsum(nsamp)])
    ts = np.concatenate([np.linspace(0.0, 1.0, k) for k in nsamp]) if len(idx) else np.zeros(0)
    owner = np.repeat(np.arange(len(idx)), nsamp)
    samples = b0[idx][owner] + ts[:, None] * (b1[idx] - b0[idx])[owner]
    inside = domain(samples) >= 0 if len(samples) else np.zeros(0, bool)

    # pieces as (edge, start sample, stop sample) runs of inside samples
    pieces = []
    for r, j in enumerate(idx):
        ins = inside[offsets[r]:offsets[r + 1]]
        if not ins.any():
            continue
        k = 0
        n = len(ins)
        while k < n:
            if not ins[k]:
                k += 1
                continue
            start = k
            while k + 1 < n and ins[k + 1]:
                k += 1
            pieces.append((j, offsets[r] + start, offsets[r] + k, start == 0, k == n - 1))
            k += 1

    # all crossings bisected together
    brackets_in, brackets_out, slots = [], [], []
    for q, (j, s0, s1, first, last) in enumerate(pieces):
        if not first:
            brackets_in.append(samples[s0])
            brackets_out.append(samples[s0 - 1])
            slots.append((q, 0))
        if not last:
            brackets_in.append(samples[s1])
            brackets_out.append(samples[s1 + 1])
            slots.append((q, 1))
    roots = {}
    if slots:
        pts = _bisect_many(domain, np.array(brackets_in), np.array(brackets_out), tol)
        roots = {slot: pt for slot, pt in zip(slots, pts)}

    new_vertices = [graph.vertices]
    boundary = [graph.on_boundary]
    nv = len(graph.vertices)
    out_edges, out_adj, out_r, out_o = [], [], [], []
    for q, (j, s0, s1, first, last) in enumerate(pieces):
        ends = []
        for side in (0, 1):
            at_end = first if side == 0 else last
            orig = p0[j] if side == 0 else p1[j]
            boxed = b0[j] if side == 0 else b1[j]
            if at_end and np.array_equal(boxed, orig):
                ends.append(graph.edges[j, side])
                continue
            pt = roots[(q, side)] if not at_end else boxed
            new_vertices.append(pt[None])
            boundary.append(np.array([True]))
            ends.append(nv)
            nv += 1
        out_edges.append(ends)
        out_adj.append(graph.adjacent[j])
        out_r.append(graph.rbar[j])
        out_o.append(j)

    vertices = np.vstack(new_vertices)
    edges = np.array(out_edges, dtype=int).reshape(-1, 2)
    adjacent = np.array(out_adj, dtype=int).reshape(-1, d)
    on_boundary = np.concatenate(boundary)
    return VoronoiGraph(vertices, edges, adjacent, np.array(out_r, dtype=float),
                        on_boundary, graph.neighbors, graph.sites, np.array(out_o, dtype=int))


def two_ring_seeds(x0, seeds: SeedSet, k: int) -> np.ndarray:
    """Indices of the ``k`` seeds nearest to ``x0`` (all seeds if k >= N)."""
    n = len(seeds)
    if k >= n:
        return np.arange(n)
    d = np.linalg.norm(seeds.positions - np.asarray(x0, dtype=float), axis=1)
    return np.sort(np.argpartition(d, k - 1)[:k])


def default_k(dim: int) -> int:
    return 16 if dim == 2 else 32


def _clip_to_ball(p0, p1, center, radius):
    """Portions of segments within a ball; returns clipped ends and keep mask."""
    if not np.isfinite(radius):
        return p0, p1, np.ones(len(p0), dtype=bool)
    dvec = p1 - p0
    f = p0 - center
    a = np.einsum("ij,ij->i", dvec, dvec)
    b = 2 * np.einsum("ij,ij->i", f, dvec)
    c = np.einsum("ij,ij->i", f, f) - radius * radius
    disc = b * b - 4 * a * c
    keep = (disc > 0) & (a > 0)
    sq = np.sqrt(np.where(keep, disc, 0.0))
    safe = np.where(a > 0, a, 1.0)
    t0 = np.clip((-b - sq) / (2 * safe), 0.0, 1.0)
    t1 = np.clip((-b + sq) / (2 * safe), 0.0, 1.0)
    keep &= t1 > t0
    return p0 + t0[:, None] * dvec, p0 + t1[:, None] * dvec, keep


@dataclass
class LocalBeams:
    p0: np.ndarray
    p1: np.ndarray
    rbar: np.ndarray
    adjacent: np.ndarray
    seed_ids: np.ndarray
    trusted_radius: float


def local_reconstruct(x0, seeds: SeedSet, k: int | None = None, domain=None, l_a=None,
                      p: float = 16.0, scale: float = 1.0) -> LocalBeams:
    """Beams of the Voronoi diagram of the k seeds nearest to ``x0``.

    Inside the ball of radius ``(R - d0) / 2`` around ``x0`` (``d0`` nearest
    distance, ``R`` distance to the closest excluded seed) the local diagram
    equals the global one.  Beams are cut to that ball, and ``k`` is doubled
    until every beam that could still move the KS union at ``x0`` lies inside
    it, so the local union matches the global one to rounding.
    """
    from .kernels import KS_SKIP

    x0 = np.asarray(x0, dtype=float)
    n = len(seeds)
    d = seeds.dim
    k = default_k(d) if k is None else k
    bbox = margin_box(seeds.bbox_lo, seeds.bbox_hi)
    dist = np.linalg.norm(seeds.positions - x0, axis=1)
    order = np.argsort(dist, kind="stable")
    while True:
        k = min(k, n)
        ids = np.sort(order[:k])
        if k < d + 1 and k < n:
            k = d + 1
            continue
        rho = np.inf if k >= n else 0.5 * (dist[order[k]] - dist[order[0]])
        sub = SeedSet(seeds.positions[ids], seeds.radii[ids], seeds.bbox_lo, seeds.bbox_hi)
        g = tessellate(sub, bbox)
        if domain is not None:
            g = clip(g, domain, l_a)
        q0, q1, keep = _clip_to_ball(g.p0, g.p1, x0, rho)
        beams = LocalBeams(q0[keep], q1[keep], g.rbar[keep], ids[g.adjacent[keep]], ids, rho)
        if k >= n:
            return beams
        rmax = seeds.radii.max()
        top = beam_union(x0[None], beams.p0, beams.p1, beams.rbar, p, scale)[0] if len(beams.rbar) else -np.inf
        # beams only partially seen have phi <= rmax - rho at x0
        if rmax - rho < top - KS_SKIP * scale / p:
            return beams
        k *= 2


def three_point_beam(x0, seeds: SeedSet):
    """Locus equidistant from the d nearest seeds, its averaged radius and distance.

    Returns ``(point_on_locus, direction, rbar, distance)``.  In 2D the locus is
    the bisector of the two nearest seeds, in 3D the line through the
    circumcenter of the three nearest, normal to their plane.
    """
    x0 = np.asarray(x0, dtype=float)
    d = seeds.dim
    dist = np.linalg.norm(seeds.positions - x0, axis=1)
    ids = np.argsort(dist, kind="stable")[:d]
    if len(ids) < d:
        raise DegenerateConfiguration("not enough seeds for a three-point estimate")
    point, direction = _equidistant_locus(seeds.positions[ids])
    rbar = float(seeds.radii[ids].mean())
    off = x0 - point
    distance = float(np.linalg.norm(off - np.dot(off, direction) * direction))
    return point, direction, rbar, distance


def _equidistant_locus(S):
    d = S.shape[1]
    scale = np.linalg.norm(S[1] - S[0])
    if scale < 1e-300:
        raise DegenerateConfiguration("coincident nearest seeds")
    if d == 2:
        n = (S[1] - S[0]) / scale
        return 0.5 * (S[0] + S[1]), np.array([-n[1], n[0]])
    a, b = S[1] - S[0], S[2] - S[0]
    normal = np.cross(a, b)
    nn = np.linalg.norm(normal)
    if nn < 1e-9 * scale * max(np.linalg.norm(b), 1e-300):
        raise DegenerateConfiguration("collinear nearest seeds")
    normal /= nn
    c, _ = _circumcenters(np.vstack([S, S[0] + normal])[None])
    return c[0], normal


def three_point_phi(points, near, positions, radii):
    """Vectorised three-point estimate ``rbar - dist`` for many points.

    ``near`` (P, d) holds the d nearest seed ids of each point.  Rows with a
    degenerate locus come back as NaN.
    """
    P, d = points.shape
    S = positions[near]                      # (P, d, d)
    rbar = radii[near].mean(axis=1)
    if d == 2:
        ab = S[:, 1] - S[:, 0]
        L = np.linalg.norm(ab, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            n = ab / L[:, None]
        mid = 0.5 * (S[:, 0] + S[:, 1])
        dist = np.abs(np.einsum("pd,pd->p", points - mid, n))
        dist[L < 1e-300] = np.nan
        return rbar - dist
    a = S[:, 1] - S[:, 0]
    b = S[:, 2] - S[:, 0]
    normal = np.cross(a, b)
    nn = np.linalg.norm(normal, axis=1)
    bad = nn < 1e-9 * np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        normal = normal / nn[:, None]
    # circumcenter of the triangle, in its plane
    aa = np.einsum("pd,pd->p", a, a)
    bb = np.einsum("pd,pd->p", b, b)
    axb = np.cross(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = S[:, 0] + (np.cross(aa[:, None] * b - bb[:, None] * a, axb)) / (2 * nn[:, None] ** 2)
    off = points - c
    along = np.einsum("pd,pd->p", off, normal)
    dist = np.linalg.norm(off - along[:, None] * normal, axis=1)
    dist[bad] = np.nan
    return rbar - dist


def cell_centroids(graph: VoronoiGraph, domain, resolution=None):
    """Centroid of every cell clipped to ``domain``; ``None`` for cells outside it."""
    from .cells import cell_geometry

    cells = cell_geometry(graph.sites, graph.neighbors, domain, resolution, with_faces=False)
    return [c.centroid for c in cells]
