"""Clipped Voronoi cells as convex polytopes: mass, centroid and face quadrature.

Each cell is the intersection of its bisector half-spaces with the bounding box
of the domain, built with Qhull's half-space intersection.  For box domains the
moments are exact; for curved domains a lattice of points masks the cell by
the domain indicator.  Face quadrature on bisector faces feeds the analytic
gradient of the shape energy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError

from .domain import Box

_GAUSS2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


@dataclass
class Cell:
    mass: float = 0.0
    moment: np.ndarray | None = None
    # neighbour id -> (points (q, d), weights (q,))
    faces: dict = field(default_factory=dict)

    @property
    def centroid(self):
        return None if self.mass <= 0 else self.moment / self.mass


def _halfspaces(i, X, nbrs, lo, hi):
    d = X.shape[1]
    rows = []
    for j in nbrs:
        n = X[j] - X[i]
        rows.append(np.append(n, -0.5 * (X[j] @ X[j] - X[i] @ X[i])))
    eye = np.eye(d)
    for k in range(d):
        rows.append(np.append(eye[k], -hi[k]))
        rows.append(np.append(-eye[k], lo[k]))
    return np.array(rows)


def _interior_point(H, x_guess):
    A, b = H[:, :-1], -H[:, -1]
    if np.all(A @ x_guess - b < 0):
        return x_guess, True
    # Chebyshev centre: max t s.t. A x + t |A| <= b
    norms = np.linalg.norm(A, axis=1)
    d = A.shape[1]
    c = np.zeros(d + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=np.column_stack([A, norms]), b_ub=b,
                  bounds=[(None, None)] * d + [(0, None)], method="highs")
    if res.status != 0 or res.x[-1] <= 0:
        return None, False
    return res.x[:-1], res.x[-1] > 0


def _simplex_moments(apex, hull_pts, simplices):
    d = hull_pts.shape[1]
    V = hull_pts[simplices] - apex                           # (T, d, d)
    vol = np.abs(np.linalg.det(V)) / (2.0 if d == 2 else 6.0)
    cen = apex + V.sum(axis=1) / (d + 1)
    return vol, cen


def _face_rule(pts):
    """Quadrature exact to degree 2 on a segment (2D) or triangle (3D)."""
    if pts.shape[0] == 2:
        a, b = pts
        L = np.linalg.norm(b - a)
        q = np.array([a + t * (b - a) for t in _GAUSS2])
        return q, np.full(2, 0.5 * L)
    a, b, c = pts
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a))
    q = np.array([0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)])
    return q, np.full(3, area / 3.0)


def _lattice(lo, hi, h):
    axes = [np.arange(lo[k] + 0.5 * h, hi[k], h) for k in range(len(lo))]
    if any(len(a) == 0 for a in axes):
        return np.zeros((0, len(lo)))
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))


def cell_geometry(sites, neighbors, domain, resolution=None, with_faces=True):
    """Mass, first moment and bisector-face quadrature of every cell in Ω.

    ``resolution`` is the lattice spacing used to mask curved domains; it is
    ignored for boxes.
    """
    X = np.asarray(sites, dtype=float)
    n, d = X.shape
    lo, hi = domain.bbox
    diag = float(np.linalg.norm(hi - lo))
    exact = isinstance(domain, Box)
    h = resolution if resolution is not None else diag / 100.0
    cells = []
    for i in range(n):
        nbrs = sorted(neighbors[i]) if neighbors else []
        H = _halfspaces(i, X, nbrs, lo, hi)
        ip, ok = _interior_point(H, X[i])
        if not ok:
            cells.append(Cell())
            continue
        try:
            hs = HalfspaceIntersection(H, ip)
            verts = hs.intersections
            hull = ConvexHull(verts)
        except (QhullError, ValueError):
            cells.append(Cell())
            continue
        cell = Cell()
        if exact:
            vol, cen = _simplex_moments(ip, verts, hull.simplices)
            cell.mass = float(vol.sum())
            cell.moment = (vol[:, None] * cen).sum(axis=0)
        else:
            A, b = H[:, :-1], -H[:, -1]
            cl, ch = verts.min(axis=0), verts.max(axis=0)
            grid = _lattice(np.floor(cl / h) * h, ch + h, h)
            if len(grid):
                grid = grid[np.all(grid @ A.T <= b, axis=1)]
            if len(grid):
                grid = grid[domain(grid) >= 0]
            w = h ** d
            cell.mass = float(len(grid) * w)
            cell.moment = grid.sum(axis=0) * w if len(grid) else np.zeros(d)
        if cell.mass <= 1e-14 * diag ** d:
            cells.append(Cell())
            continue
        if with_faces and nbrs:
            _collect_faces(cell, i, X, nbrs, verts, hull, diag, domain if not exact else None, h)
        cells.append(cell)
    return cells


def _collect_faces(cell, i, X, nbrs, verts, hull, diag, mask_domain, h):
    tol = 1e-9 * diag
    normals = np.array([X[j] - X[i] for j in nbrs])
    lens = np.linalg.norm(normals, axis=1)
    units = normals / lens[:, None]
    offsets = np.array([0.5 * (X[j] @ X[j] - X[i] @ X[i]) for j in nbrs]) / lens
    for simplex in hull.simplices:
        pts = verts[simplex]
        res = np.abs(pts @ units.T - offsets)                # (d, nbrs)
        hit = np.nonzero(np.all(res <= tol, axis=0))[0]
        if len(hit) == 0:
            continue
        j = nbrs[hit[0]]
        if mask_domain is not None:
            q, w = _fine_face_rule(pts, h)
            w = w * (mask_domain(q) >= 0)
        else:
            q, w = _face_rule(pts)
        if j in cell.faces:
            q0, w0 = cell.faces[j]
            cell.faces[j] = (np.vstack([q0, q]), np.concatenate([w0, w]))
        else:
            cell.faces[j] = (q, w)


def _fine_face_rule(pts, h):
    size = max(np.linalg.norm(pts[k] - pts[0]) for k in range(1, len(pts)))
    m = max(1, int(np.ceil(size / h)))
    if pts.shape[0] == 2:
        a, b = pts
        qs, ws = [], []
        for s in range(m):
            q, w = _face_rule(np.array([a + (b - a) * s / m, a + (b - a) * (s + 1) / m]))
            qs.append(q)
            ws.append(w)
        return np.vstack(qs), np.concatenate(ws)
    a, b, c = pts
    qs, ws = [], []
    # uniform split of the triangle into m^2 pieces
    P = lambda u, v: a + (b - a) * u / m + (c - a) * v / m
    for u in range(m):
        for v in range(m - u):
            tris = [(P(u, v), P(u + 1, v), P(u, v + 1))]
            if u + v < m - 1:
                tris.append((P(u + 1, v), P(u + 1, v + 1), P(u, v + 1)))
            for t in tris:
                q, w = _face_rule(np.array(t))
                qs.append(q)
                ws.append(w)
    return np.vstack(qs), np.concatenate(ws)


def shape_energy(sites, cells):
    """S = sum over cells inside Ω of |X_i - X_i^c|^2."""
    X = np.asarray(sites, dtype=float)
    S = 0.0
    for i, c in enumerate(cells):
        if c.mass > 0:
            e = X[i] - c.centroid
            S += float(e @ e)
    return S


def shape_energy_gradient(sites, cells):
    """dS/dX from the motion of bisector faces (radii do not enter S)."""
    X = np.asarray(sites, dtype=float)
    g = np.zeros_like(X)
    for i, c in enumerate(cells):
        if c.mass <= 0:
            continue
        ci = c.centroid
        e = X[i] - ci
        g[i] += 2.0 * e
        for j, (q, w) in c.faces.items():
            L = np.linalg.norm(X[j] - X[i])
            yc = q - ci                                       # (q, d)
            # d c_i / d X_i and d c_i / d X_j
            dci = np.einsum("q,qa,qb->ab", w, yc, q - X[i]) / (L * c.mass)
            dcj = -np.einsum("q,qa,qb->ab", w, yc, q - X[j]) / (L * c.mass)
            g[i] -= 2.0 * dci.T @ e
            g[j] -= 2.0 * dcj.T @ e
    return g
