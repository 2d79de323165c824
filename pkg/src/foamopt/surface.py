"""Φ = 0 surfaces: sample the foam field on a grid and contour it."""
from __future__ import annotations

import logging

import numpy as np
from skimage import measure

from .implicit import ImplicitFoam, foam_field

log = logging.getLogger(__name__)


def grid_axes(lo, hi, h):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = np.maximum(np.ceil((hi - lo) / h).astype(int), 1)
    return [np.linspace(lo[k], hi[k], n[k] + 1) for k in range(len(lo))]


def sample_grid(foam: ImplicitFoam, axes, clip_domain=True):
    """Φ on the tensor grid, intersected with Ω unless ``clip_domain`` is off."""
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    phi = foam_field(pts, foam) if len(foam.p0) or foam.shell is not None else np.full(len(pts), -np.inf)
    if clip_domain and foam.domain is not None:
        phi = np.minimum(phi, foam.domain(pts))
    return phi.reshape(tuple(len(a) for a in axes))


def extract(phi, axes):
    """Vertices and faces (3D triangles, 2D segments) of {Φ = 0}.

    The grid is padded with one void layer so components touching the grid
    boundary come out closed.
    """
    d = len(axes)
    spacing = np.array([a[1] - a[0] if len(a) > 1 else 1.0 for a in axes])
    finite = phi[np.isfinite(phi)]
    if finite.size == 0 or finite.max() < 0:
        return np.zeros((0, d)), np.zeros((0, d), dtype=int)
    void = -max(1.0, float(np.abs(finite).max()))
    padded = np.pad(np.where(np.isfinite(phi), phi, void), 1, constant_values=void)
    origin = np.array([a[0] for a in axes]) - spacing
    if d == 3:
        verts, faces, _, _ = measure.marching_cubes(padded, 0.0, spacing=tuple(spacing))
        return verts + origin, faces
    verts, segs = [], []
    for c in measure.find_contours(padded, 0.0):
        base = sum(len(v) for v in verts)
        closed = np.allclose(c[0], c[-1])
        pts = c[:-1] if closed else c
        verts.append(pts * spacing + origin)
        m = len(pts)
        idx = np.arange(m) + base
        segs.append(np.column_stack([idx, np.roll(idx, -1)]) if closed else np.column_stack([idx[:-1], idx[1:]]))
    return np.vstack(verts), np.vstack(segs)


def write_obj(path, verts, faces):
    with open(path, "w") as fh:
        fh.write("# foamopt surface\n")
        for v in verts:
            fh.write("v " + " ".join(f"{x:.9g}" for x in np.pad(v, (0, 3 - len(v)))) + "\n")
        tag = "f" if faces.shape[1] == 3 else "l"
        for f in faces:
            fh.write(tag + " " + " ".join(str(i + 1) for i in f) + "\n")


def export_surface(path, foam: ImplicitFoam, lo, hi, h, r_lo=None, clip_domain=True):
    """Sample on a grid of spacing ``h`` over [lo, hi] and write the Φ = 0 surface as OBJ."""
    if r_lo is not None and h > r_lo / 2:
        log.warning("grid spacing %.3g gives fewer than 2 cells per minimum radius %.3g", h, r_lo)
    axes = grid_axes(lo, hi, h)
    phi = sample_grid(foam, axes, clip_domain)
    verts, faces = extract(phi, axes)
    write_obj(path, verts, faces)
    return verts, faces
