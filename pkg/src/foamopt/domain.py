"""Implicit design domains.

Every domain is a signed function ``phi(x)`` that is positive inside,
zero on the boundary and negative outside.  Values are exact signed distances
for boxes and spheres away from edges/corners; boolean combinations use
min/max and are only distance bounds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator


class DomainField:
    """Base class: subclasses implement ``__call__`` and ``bbox``."""

    dim: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    def contains(self, x: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self(np.atleast_2d(x)) >= -tol

    def __or__(self, other):
        return Union([self, other])

    def __and__(self, other):
        return Intersection([self, other])

    def __sub__(self, other):
        return Difference(self, other)


@dataclass
class Box(DomainField):
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.hi <= self.lo):
            raise ValueError("box needs lo < hi componentwise")
        self.dim = self.lo.size

    def __call__(self, x):
        x = np.atleast_2d(x)
        d_lo = x - self.lo
        d_hi = self.hi - x
        inner = np.minimum(d_lo, d_hi)
        inside = inner.min(axis=1)
        outside = np.linalg.norm(np.minimum(inner, 0.0), axis=1)
        return np.where(inside >= 0, inside, -outside)

    @property
    def bbox(self):
        return self.lo.copy(), self.hi.copy()


@dataclass
class Sphere(DomainField):
    """Ball (disk in 2D)."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        self.dim = self.center.size

    def __call__(self, x):
        x = np.atleast_2d(x)
        return self.radius - np.linalg.norm(x - self.center, axis=1)

    @property
    def bbox(self):
        return self.center - self.radius, self.center + self.radius


@dataclass
class Cylinder(DomainField):
    """Finite cylinder with axis along coordinate ``axis`` (3D only)."""

    center: np.ndarray
    radius: float
    height: float
    axis: int = 2

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.center.size != 3:
            raise ValueError("cylinder is a 3D primitive")
        self.dim = 3

    def __call__(self, x):
        x = np.atleast_2d(x) - self.center
        radial_axes = [k for k in range(3) if k != self.axis]
        radial = self.radius - np.linalg.norm(x[:, radial_axes], axis=1)
        axial = 0.5 * self.height - np.abs(x[:, self.axis])
        return np.minimum(radial, axial)

    @property
    def bbox(self):
        half = np.full(3, self.radius)
        half[self.axis] = 0.5 * self.height
        return self.center - half, self.center + half


@dataclass
class Union(DomainField):
    parts: list

    def __post_init__(self):
        self.dim = self.parts[0].dim

    def __call__(self, x):
        return np.max([p(x) for p in self.parts], axis=0)

    @property
    def bbox(self):
        boxes = [p.bbox for p in self.parts]
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)


@dataclass
class Intersection(DomainField):
    parts: list

    def __post_init__(self):
        self.dim = self.parts[0].dim

    def __call__(self, x):
        return np.min([p(x) for p in self.parts], axis=0)

    @property
    def bbox(self):
        boxes = [p.bbox for p in self.parts]
        return np.max([b[0] for b in boxes], axis=0), np.min([b[1] for b in boxes], axis=0)


@dataclass
class Difference(DomainField):
    base: DomainField
    cut: DomainField

    def __post_init__(self):
        self.dim = self.base.dim

    def __call__(self, x):
        return np.minimum(self.base(x), -self.cut(x))

    @property
    def bbox(self):
        return self.base.bbox


@dataclass
class GridSDF(DomainField):
    """Signed distance sampled on a regular grid, trilinearly interpolated."""

    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.dim = self.lo.size
        if self.values.ndim != self.dim:
            raise ValueError("grid dimension does not match bounds")
        axes = [np.linspace(self.lo[k], self.hi[k], self.values.shape[k]) for k in range(self.dim)]
        self._interp = RegularGridInterpolator(axes, self.values, bounds_error=False, fill_value=None)

    def __call__(self, x):
        x = np.atleast_2d(x)
        inside = np.clip(x, self.lo, self.hi)
        # outside the grid: extrapolate by the distance to the grid box
        return self._interp(inside) - np.linalg.norm(x - inside, axis=1)

    @property
    def bbox(self):
        # tight box of the positive region, padded by one grid cell
        mask = self.values >= 0
        if not mask.any():
            raise ValueError("SDF grid has an empty interior")
        axes = [np.linspace(self.lo[k], self.hi[k], self.values.shape[k]) for k in range(self.dim)]
        idx = np.nonzero(mask)
        step = (self.hi - self.lo) / (np.array(self.values.shape) - 1)
        lo = np.array([axes[k][idx[k].min()] for k in range(self.dim)]) - step
        hi = np.array([axes[k][idx[k].max()] for k in range(self.dim)]) + step
        return np.maximum(lo, self.lo), np.minimum(hi, self.hi)

    @classmethod
    def load(cls, path):
        """Load from ``.npz`` with arrays ``lo``, ``hi``, ``values``."""
        data = np.load(path)
        return cls(data["lo"], data["hi"], data["values"])


def domain_from_spec(spec: dict, base_dir: Path | None = None) -> DomainField:
    """Build a domain from its JSON description.

    ``{"type": "box", "lo": [...], "hi": [...]}``, ``{"type": "sphere", ...}``,
    ``{"type": "cylinder", ...}``, ``{"type": "union"|"intersection",
    "parts": [...]}``, ``{"type": "difference", "base": {...}, "cut": {...}}``
    or ``{"type": "sdf_grid", "path": "file.npz"}``.
    """
    kind = spec.get("type")
    if kind == "box":
        return Box(spec["lo"], spec["hi"])
    if kind == "sphere":
        return Sphere(spec["center"], float(spec["radius"]))
    if kind == "cylinder":
        return Cylinder(spec["center"], float(spec["radius"]), float(spec["height"]), int(spec.get("axis", 2)))
    if kind == "union":
        return Union([domain_from_spec(p, base_dir) for p in spec["parts"]])
    if kind == "intersection":
        return Intersection([domain_from_spec(p, base_dir) for p in spec["parts"]])
    if kind == "difference":
        return Difference(domain_from_spec(spec["base"], base_dir), domain_from_spec(spec["cut"], base_dir))
    if kind == "sdf_grid":
        path = Path(spec["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise FileNotFoundError(f"SDF grid file not found: {path}")
        return GridSDF.load(path)
    raise ValueError(f"unknown domain type {kind!r}; spec was {json.dumps(spec)}")
