"""Implicit foam: capsule fields, KS union, boundary terms and rasterised density."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .kernels import beam_union, ks_combine, segment_distances


@dataclass
class Beam:
    v1: np.ndarray
    v2: np.ndarray
    rbar: float
    degenerate: bool = False

    def __post_init__(self):
        self.v1 = np.asarray(self.v1, dtype=float)
        self.v2 = np.asarray(self.v2, dtype=float)
        if self.rbar <= 0:
            raise ValueError("beam radius must be positive")
        if np.array_equal(self.v1, self.v2) and not self.degenerate:
            raise ValueError("coincident beam ends; pass degenerate=True for a sphere")


def segment_distance(x, v1, v2) -> float:
    """Distance from ``x`` to the segment [v1, v2] (point distance if v1 == v2)."""
    x, v1, v2 = (np.asarray(a, dtype=float) for a in (x, v1, v2))
    a = v2 - v1
    b = x - v1
    ab = a @ b
    aa = a @ a
    if aa == 0.0 or ab <= 0.0:
        return float(np.linalg.norm(b))
    if ab >= aa:
        return float(np.linalg.norm(x - v2))
    g = b - (ab / aa) * a
    return float(np.linalg.norm(g))


def beam_phi(x, beam: Beam) -> float:
    return beam.rbar - segment_distance(x, beam.v1, beam.v2)


def ks_union(values, p: float = 16.0, scale: float = 1.0) -> float:
    """Shifted-exponent KS union, ``scale`` making ``p`` dimensionless."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("ks_union needs at least one value")
    top = v.max()
    return float(scale * np.log(np.exp(p * (v - top) / scale).sum()) / p + top)


def heaviside(phi, eps: float, alpha: float = 1e-6):
    phi = np.asarray(phi, dtype=float)
    t = np.clip(phi / eps, -1.0, 1.0)
    cubic = 0.75 * (1 - alpha) * (t - t ** 3 / 3.0) + 0.5 * (1 + alpha)
    out = np.where(phi >= eps, 1.0, np.where(phi <= -eps, alpha, cubic))
    return out if out.ndim else float(out)


def heaviside_derivative(phi, eps: float, alpha: float = 1e-6):
    phi = np.asarray(phi, dtype=float)
    t = phi / eps
    out = np.where(np.abs(phi) <= eps, 0.75 * (1 - alpha) * (1 - t * t) / eps, 0.0)
    return out if out.ndim else float(out)


@dataclass
class ImplicitFoam:
    """Beams plus optional boundary terms.

    ``scale`` is the length that normalises the KS sharpness (the union is
    ``scale * KS(phi / scale, p)``); 1.0 gives the raw formula.
    ``domain`` masks material outside the design domain.
    """

    p0: np.ndarray
    p1: np.ndarray
    rbar: np.ndarray
    eps: float
    p: float = 16.0
    alpha: float = 1e-6
    scale: float = 1.0
    domain: object = None
    shell: float | None = None
    boundary_faces: bool = False
    # sites and radii are needed only for face ribs
    sites: np.ndarray | None = field(default=None, repr=False)
    radii: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.p <= 0 or self.eps <= 0 or not 0 < self.alpha < 1:
            raise ValueError("need p > 0, eps > 0 and 0 < alpha < 1")

    @classmethod
    def from_graph(cls, graph, seeds, eps, **kw):
        return cls(graph.p0, graph.p1, graph.rbar, eps, sites=seeds.positions, radii=seeds.radii, **kw)

    @classmethod
    def from_beams(cls, beams, eps, **kw):
        d = len(beams[0].v1) if beams else kw.pop("dim", 3)
        p0 = np.array([b.v1 for b in beams]).reshape(-1, d)
        p1 = np.array([b.v2 for b in beams]).reshape(-1, d)
        return cls(p0, p1, np.array([b.rbar for b in beams], dtype=float), eps, **kw)


def shell_and_faces(x, foam: ImplicitFoam) -> np.ndarray:
    """Extra field values per point, shape (P, m) with m in {0, 1, 2}."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cols = []
    if foam.domain is None:
        return np.zeros((len(x), 0))
    phi_o = foam.domain(x)
    if foam.shell is not None:
        cols.append(foam.shell - np.abs(phi_o))
    if foam.boundary_faces and x.shape[1] == 3 and foam.sites is not None and len(foam.sites) > 1:
        cols.append(face_ribs(x, foam.sites, foam.radii, phi_o))
    return np.column_stack(cols) if cols else np.zeros((len(x), 0))


def face_ribs(x, sites, radii, phi_o):
    """Rib along each Voronoi face where it meets the boundary of Ω.

    Uses the two nearest sites: half the distance gap ``(d2 - d1) / 2``
    (zero on their bisector, continuous in x) and the depth ``|phi_Ω|``.
    Thickness is the mean radius of the two sites.
    """
    dist, ids = cKDTree(sites).query(x, 2)
    gap = 0.5 * (dist[:, 1] - dist[:, 0])
    rib_r = 0.5 * (radii[ids[:, 0]] + radii[ids[:, 1]])
    return rib_r - np.maximum(gap, np.abs(phi_o))


def foam_field(points, foam: ImplicitFoam) -> np.ndarray:
    """Φ at many points from the foam's own beam list plus boundary terms."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    phi = beam_union(points, foam.p0, foam.p1, foam.rbar, foam.p, foam.scale)
    return ks_combine(phi, shell_and_faces(points, foam), foam.p, foam.scale)


def foam_phi(x, foam: ImplicitFoam, seeds=None, mode: str = "global", k: int | None = None,
             l_a: float | None = None) -> float:
    """Φ(x) at one point.

    ``mode="global"`` uses the foam's beams; ``"reconstruct"`` rebuilds the
    beams from the k nearest seeds; ``"auto"`` follows the radius-spread test
    (three-point estimate when the local radii differ by at most 2x, local
    reconstruction otherwise).
    """
    from .voronoi import DegenerateConfiguration, local_reconstruct, three_point_beam, two_ring_seeds

    x = np.asarray(x, dtype=float)
    extra = shell_and_faces(x[None], foam)
    if mode == "global" or seeds is None:
        return float(foam_field(x[None], foam)[0])
    if mode not in ("auto", "reconstruct", "three_point"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode in ("auto", "three_point"):
        kk = k if k is not None else (16 if x.size == 2 else 32)
        local = seeds.radii[two_ring_seeds(x, seeds, min(kk, len(seeds)))]
        if mode == "three_point" or local.max() <= 2.0 * local.min():
            try:
                _, _, rb, dj = three_point_beam(x, seeds)
                return float(ks_combine(np.array([rb - dj]), extra, foam.p, foam.scale)[0])
            except DegenerateConfiguration:
                pass
    b = local_reconstruct(x, seeds, k, foam.domain, l_a, foam.p, foam.scale)
    phi = beam_union(x[None], b.p0, b.p1, b.rbar, foam.p, foam.scale)
    return float(ks_combine(phi, extra, foam.p, foam.scale)[0])


def domain_mask(nodes, domain, tol=0.0):
    """Sharp indicator of Ω at mesh nodes (1 inside or on the boundary)."""
    if domain is None:
        return np.ones(len(nodes))
    return (domain(nodes) >= -tol).astype(float)


@dataclass
class DensityField:
    """Per-element density plus the nodal data it was averaged from."""

    H: np.ndarray
    node_phi: np.ndarray
    node_H: np.ndarray
    node_mask: np.ndarray
    mask_mean: np.ndarray
    mesh_id: int = 0


def node_density(node_phi, node_mask, eps, alpha):
    return alpha + node_mask * (heaviside(node_phi, eps, alpha) - alpha)


def sample_density(fine_mesh, foam: ImplicitFoam, seeds=None, node_phi=None) -> DensityField:
    """Nodal-average density on every fine element, void outside Ω."""
    nodes = fine_mesh.nodes
    if node_phi is None:
        node_phi = foam_field(nodes, foam)
    mask = fine_mesh.node_mask(foam.domain)
    nH = node_density(node_phi, mask, foam.eps, foam.alpha)
    H = nH[fine_mesh.elements].mean(axis=1)
    return DensityField(H, node_phi, nH, mask, mask[fine_mesh.elements].mean(axis=1), id(fine_mesh))


def volume(density: DensityField, fine_mesh, alpha: float = 1e-6):
    """Material volume and fraction V / V_0.

    The void floor outside Ω is not counted, so all-solid gives V_0 and
    all-void gives alpha * V_0.
    """
    vol = fine_mesh.volumes
    V = float(np.sum(vol * (density.H - alpha * (1.0 - density.mask_mean))))
    V0 = float(np.sum(vol * density.mask_mean))
    return V, V / V0


__all__ = [
    "Beam", "ImplicitFoam", "DensityField", "segment_distance", "segment_distances", "beam_phi",
    "ks_union", "heaviside", "heaviside_derivative", "shell_and_faces", "face_ribs", "foam_field",
    "foam_phi", "sample_density", "volume", "node_density", "domain_mask",
]
