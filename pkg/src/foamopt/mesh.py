"""Two-level background mesh: coarse cells, each owning a patch of fine simplices."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import factorial
from pathlib import Path

import numpy as np


@dataclass
class FineMesh:
    nodes: np.ndarray
    elements: np.ndarray
    elem_cell: np.ndarray | None = None
    _mask_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.elements = np.asarray(self.elements, dtype=int)
        if self.elem_cell is None:
            self.elem_cell = np.zeros(len(self.elements), dtype=int)
        vol = signed_volumes(self.nodes, self.elements)
        if np.any(vol <= 0):
            raise ValueError(f"{int(np.sum(vol <= 0))} inverted or flat simplices")
        self.volumes = vol
        pairs = [np.sort(self.elements[:, [a, b]], axis=1)
                 for a, b in itertools.combinations(range(self.dim + 1), 2)]
        e = np.unique(np.concatenate(pairs), axis=0)
        self.l_a = float(np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1).mean())

    @property
    def dim(self):
        return self.nodes.shape[1]

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.nodes.max(axis=0) - self.nodes.min(axis=0)))

    def node_mask(self, domain):
        """Sharp domain indicator at the nodes (cached per domain object)."""
        if domain is None:
            return np.ones(len(self.nodes))
        key = id(domain)
        if key not in self._mask_cache:
            self._mask_cache[key] = (domain(self.nodes) >= -1e-9 * self.l_a).astype(float)
        return self._mask_cache[key]

    def centroids(self):
        return self.nodes[self.elements].mean(axis=1)


def signed_volumes(nodes, elements):
    P = nodes[elements]
    A = P[:, 1:] - P[:, :1]
    d = nodes.shape[1]
    return np.linalg.det(A) / (2.0 if d == 2 else 6.0)


def spatch_labels(n_sides: int, depth: int) -> np.ndarray:
    """All multi-indices of length ``n_sides`` summing to ``depth``."""
    out = []
    for combo in itertools.combinations_with_replacement(range(n_sides), depth):
        lab = np.zeros(n_sides, dtype=int)
        for c in combo:
            lab[c] += 1
        out.append(lab)
    return np.array(out[::-1])


def multinomial(label) -> float:
    n = int(np.sum(label))
    out = factorial(n)
    for i in label:
        out //= factorial(int(i))
    return float(out)


def spatch_control_points(vertices, depth, tol=1e-9, face_interior=True):
    """Control points ``sum_k i_k v_k / d`` with coinciding labels merged.

    Returns ``(points, labels, R)``: ``R`` (L x n_points) maps each label's
    basis function onto the merged points.  With ``face_interior=False``
    points off the polygon boundary are removed and their weight spread over
    the corners by ``i_k / d`` (keeps partition of unity and linear precision).
    """
    V = np.asarray(vertices, dtype=float)
    labels = spatch_labels(len(V), depth)
    pos = labels @ V / depth
    scale = max(np.linalg.norm(V.max(axis=0) - V.min(axis=0)), 1e-300)
    keep_label = np.ones(len(labels), dtype=bool)
    if not face_interior and len(V) > 2:
        keep_label = np.array([_on_polygon_boundary(lab) for lab in labels])
    points, R_cols = [], []
    R = np.zeros((len(labels), 0))
    for li in range(len(labels)):
        if not keep_label[li]:
            continue
        hit = None
        for pi, q in enumerate(points):
            if np.linalg.norm(q - pos[li]) <= tol * scale:
                hit = pi
                break
        if hit is None:
            points.append(pos[li])
            R_cols.append([li])
        else:
            R_cols[hit].append(li)
    R = np.zeros((len(labels), len(points)))
    for pi, lis in enumerate(R_cols):
        R[lis, pi] = 1.0
    if not keep_label.all():
        corner_of = {}
        for pi, lis in enumerate(R_cols):
            lab = labels[lis[0]]
            if lab.max() == depth:
                corner_of[int(np.argmax(lab))] = pi
        for li in np.nonzero(~keep_label)[0]:
            for k, ik in enumerate(labels[li]):
                if ik:
                    R[li, corner_of[k]] += ik / depth
    return np.array(points), labels, R


def _on_polygon_boundary(label):
    nz = np.nonzero(label)[0]
    n = len(label)
    if len(nz) == 1:
        return True
    if len(nz) == 2:
        a, b = nz
        return (b - a) in (1, n - 1)
    return False


@dataclass
class CoarseElement:
    faces: list                       # vertex arrays: segments (2D) or polygons (3D)
    fine_elements: np.ndarray
    nodes: np.ndarray = None          # global fine node ids used by the element
    boundary: np.ndarray = None       # subset of nodes on the element boundary
    interior: np.ndarray = None
    coarse_nodes: np.ndarray = None   # global coarse node ids
    face_ctrl: list = None            # per face: (labels, R, local coarse index per point)
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None


@dataclass
class CoarseMesh:
    fine: FineMesh
    elements: list
    coarse_coords: np.ndarray = None
    depth: int = 2
    face_interior: bool = True

    @property
    def dim(self):
        return self.fine.dim

    @property
    def n_coarse_nodes(self):
        return len(self.coarse_coords)


def _box_faces(lo, hi):
    d = len(lo)
    if d == 2:
        c = [np.array([lo[0], lo[1]]), np.array([hi[0], lo[1]]),
             np.array([hi[0], hi[1]]), np.array([lo[0], hi[1]])]
        return [np.array([c[k], c[(k + 1) % 4]]) for k in range(4)]
    faces = []
    for ax in range(3):
        u, v = [a for a in range(3) if a != ax]
        for side in (lo[ax], hi[ax]):
            quad = []
            for su, sv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                p = np.empty(3)
                p[ax] = side
                p[u] = (lo[u], hi[u])[su]
                p[v] = (lo[v], hi[v])[sv]
                quad.append(p)
            faces.append(np.array(quad))
    return faces


def _kuhn_cells(d):
    """Simplices of the unit cube as corner bit-tuples, consistent diagonal."""
    out = []
    for perm in itertools.permutations(range(d)):
        v = [np.zeros(d, dtype=int)]
        for a in perm:
            nxt = v[-1].copy()
            nxt[a] = 1
            v.append(nxt)
        out.append(v)
    return out


def build_structured(domain, coarse_res, refine: int = 8, depth: int = 2, face_interior: bool = True,
                     bounds=None) -> CoarseMesh:
    """Axis-aligned coarse grid over the bounding box of Ω, refined into simplices."""
    lo, hi = bounds if bounds is not None else domain.bbox
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = len(lo)
    res = np.broadcast_to(np.asarray(coarse_res, dtype=int), (d,)).copy()
    if np.any(res < 1):
        raise ValueError("coarse resolution must be >= 1 on every axis")
    if refine < 1:
        raise ValueError("refine must be >= 1")
    nf = res * refine
    axes = [np.linspace(lo[k], hi[k], nf[k] + 1) for k in range(d)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    shape = tuple(nf + 1)
    inside = (domain(grid) >= 0).reshape(shape) if domain is not None else np.ones(shape, bool)
    if not inside.any():
        raise ValueError("domain has an empty interior on this grid")

    kuhn = _kuhn_cells(d)
    # local fine cells of one coarse cell
    cell_idx = np.stack(np.meshgrid(*[np.arange(refine)] * d, indexing="ij"), axis=-1).reshape(-1, d)
    elements, owner, kept = [], [], []
    for cidx in itertools.product(*[range(res[k]) for k in range(d)]):
        cidx = np.array(cidx)
        sl = tuple(slice(cidx[k] * refine, (cidx[k] + 1) * refine + 1) for k in range(d))
        if not inside[sl].any():
            continue
        base = cidx * refine + cell_idx                          # (r^d, d)
        tets = []
        for simplex in kuhn:
            ids = [np.ravel_multi_index(tuple((base + off).T), shape) for off in simplex]
            tets.append(np.stack(ids, axis=1))
        tets = np.concatenate(tets)
        elements.append(tets)
        owner.append(np.full(len(tets), len(kept)))
        kept.append(cidx)
    elements = np.concatenate(elements)
    owner = np.concatenate(owner)
    used, elements = np.unique(elements, return_inverse=True)
    elements = elements.reshape(-1, d + 1)
    nodes = grid[used]
    vol = signed_volumes(nodes, elements)
    flip = vol < 0
    elements[flip, 0], elements[flip, 1] = elements[flip, 1].copy(), elements[flip, 0].copy()
    fine = FineMesh(nodes, elements, owner)

    h = (hi - lo) / res
    cells = []
    for c, cidx in enumerate(kept):
        clo = lo + cidx * h
        chi = clo + h
        cells.append(CoarseElement(_box_faces(clo, chi), np.nonzero(owner == c)[0], lo=clo, hi=chi))
    mesh = CoarseMesh(fine, cells, depth=depth, face_interior=face_interior)
    finalize(mesh)
    return mesh


def _point_on_face(x, face, tol):
    """Mask of points lying on a segment (2D) or planar convex polygon (3D)."""
    if len(face) == 2:
        a, b = face
        ab = b - a
        t = (x - a) @ ab / (ab @ ab)
        foot = a + np.clip(t, 0, 1)[:, None] * ab
        return np.linalg.norm(x - foot, axis=1) <= tol
    n = np.cross(face[1] - face[0], face[2] - face[0])
    n /= np.linalg.norm(n)
    ok = np.abs((x - face[0]) @ n) <= tol
    m = len(face)
    for k in range(m):
        e = face[(k + 1) % m] - face[k]
        inward = np.cross(n, e)
        inward /= np.linalg.norm(inward)
        ok &= (x - face[k]) @ inward >= -tol
    return ok


def classify_nodes(elem: CoarseElement, fine: FineMesh):
    """Split the element's fine nodes into boundary (on a face) and interior."""
    nodes = np.unique(fine.elements[elem.fine_elements])
    tol = 1e-9 * fine.l_a
    x = fine.nodes[nodes]
    on = np.zeros(len(nodes), dtype=bool)
    for f in elem.faces:
        on |= _point_on_face(x, f, tol)
    return nodes[on], nodes[~on]


def layout_coarse_nodes(elem: CoarseElement, depth: int, face_interior: bool = True):
    """Control-point coordinates of every face of the element (merged per face)."""
    out = []
    for f in elem.faces:
        pts, labels, R = spatch_control_points(f, depth, face_interior=face_interior)
        out.append((pts, labels, R))
    return out


def finalize(mesh: CoarseMesh):
    """Classify nodes and lay out globally deduplicated coarse nodes."""
    fine = mesh.fine
    scale = fine.diagonal
    registry = {}
    coords = []

    def key(p):
        return tuple(np.round(p / scale * 1e9).astype(np.int64).tolist())

    for elem in mesh.elements:
        elem.nodes = np.unique(fine.elements[elem.fine_elements])
        elem.boundary, elem.interior = classify_nodes(elem, fine)
        local = {}
        elem.face_ctrl = []
        for pts, labels, R in layout_coarse_nodes(elem, mesh.depth, mesh.face_interior):
            idx = []
            for p in pts:
                kk = key(p)
                if kk not in registry:
                    registry[kk] = len(coords)
                    coords.append(p)
                g = registry[kk]
                if g not in local:
                    local[g] = len(local)
                idx.append(local[g])
            elem.face_ctrl.append((labels, R, np.array(idx, dtype=int)))
        elem.coarse_nodes = np.array(sorted(local, key=local.get), dtype=int)
    mesh.coarse_coords = np.array(coords)
    return mesh


def load_json(path) -> CoarseMesh:
    """Read ``{"nodes", "elements", "coarse": [{"elements", "faces"}], "depth"}``."""
    data = json.loads(Path(path).read_text())
    nodes = np.array(data["nodes"], dtype=float)
    elements = np.array(data["elements"], dtype=int)
    owner = np.zeros(len(elements), dtype=int)
    cells = []
    for c, cell in enumerate(data["coarse"]):
        ids = np.array(cell["elements"], dtype=int)
        owner[ids] = c
        cells.append(CoarseElement([np.array(f, dtype=float) for f in cell["faces"]], ids))
    vol = signed_volumes(nodes, elements)
    flip = vol < 0
    elements[flip, 0], elements[flip, 1] = elements[flip, 1].copy(), elements[flip, 0].copy()
    mesh = CoarseMesh(FineMesh(nodes, elements, owner), cells, depth=int(data.get("depth", 2)))
    return finalize(mesh)


def export_vtk(path, fine: FineMesh, cell_data: dict | None = None, point_data: dict | None = None):
    """Legacy ASCII VTK unstructured grid."""
    d = fine.dim
    pts = fine.nodes if d == 3 else np.column_stack([fine.nodes, np.zeros(len(fine.nodes))])
    k = d + 1
    ctype = 5 if d == 2 else 10
    lines = ["# vtk DataFile Version 3.0", "foamopt mesh", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(pts)} double"]
    lines += [" ".join(f"{v:.10g}" for v in p) for p in pts]
    lines.append(f"CELLS {len(fine.elements)} {len(fine.elements) * (k + 1)}")
    lines += [f"{k} " + " ".join(map(str, e)) for e in fine.elements]
    lines.append(f"CELL_TYPES {len(fine.elements)}")
    lines += [str(ctype)] * len(fine.elements)
    for tag, data, n in (("CELL_DATA", cell_data, len(fine.elements)), ("POINT_DATA", point_data, len(pts))):
        if not data:
            continue
        lines.append(f"{tag} {n}")
        for name, vals in data.items():
            vals = np.asarray(vals, dtype=float)
            if vals.ndim == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [f"{v:.10g}" for v in vals]
            else:
                if vals.shape[1] == 2:
                    vals = np.column_stack([vals, np.zeros(len(vals))])
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(f"{v:.10g}" for v in row) for row in vals]
    Path(path).write_text("\n".join(lines) + "\n")
