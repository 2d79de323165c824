"""Problem configuration: JSON in, validated objects out."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import domain_from_spec
from .fem import LoadCase, Material
from .mesh import build_structured, load_json
from .sensitivity import FoamSettings


class ConfigError(ValueError):
    pass


@dataclass
class ProblemConfig:
    domain: dict
    coarse_res: list = field(default_factory=lambda: [4, 4])
    refine: int = 8
    depth: int = 2
    mesh_file: str | None = None
    n_seeds: int = 20
    v: float = 0.3
    w: float = 0.1
    p: float = 16.0
    eps_factor: float = 1.5
    alpha: float = 1e-6
    fd_step_factor: float = 1.0
    sim: str = "coarse"
    shell: bool = False
    shell_thickness: float | None = None
    boundary_faces: bool = False
    loads: dict = field(default_factory=dict)
    material: dict = field(default_factory=dict)
    rng_seed: int = 0
    seed_strategy: str = "uniform"
    max_iter: int = 200
    ch_tol: float = 1e-3
    r_min_factor: float = 2.0
    r_max: float | None = None
    seed_bounds: list | None = None
    sensitivity_mode: str = "reconstruct"
    snapshot_interval: int = 10
    output_dir: str = "out"
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir=None):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "domain" not in data:
            raise ConfigError("config needs a 'domain'")
        cfg = cls(**data)
        cfg.base_dir = Path(base_dir) if base_dir is not None else Path(".")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
        return cls.from_dict(data, path.parent)

    def validate(self):
        checks = [
            (self.n_seeds >= 1, "n_seeds must be >= 1"),
            (0 < self.v <= 1, "v must lie in (0, 1]"),
            (0 <= self.w <= 1, "w must lie in [0, 1]"),
            (self.p > 0, "p must be positive"),
            (self.eps_factor > 0, "eps_factor must be positive"),
            (0 < self.alpha < 1, "alpha must lie in (0, 1)"),
            (self.fd_step_factor > 0, "fd_step_factor must be positive"),
            (self.sim in ("fine", "coarse"), "sim must be 'fine' or 'coarse'"),
            (self.refine >= 1, "refine must be >= 1"),
            (self.depth >= 1, "depth must be >= 1"),
            (self.max_iter >= 0, "max_iter must be >= 0"),
            (self.ch_tol > 0, "ch_tol must be positive"),
            (self.r_min_factor > 0, "r_min_factor must be positive"),
            (self.seed_strategy in ("uniform", "blue_noise"), "seed_strategy must be uniform or blue_noise"),
            (self.sensitivity_mode in ("reconstruct", "auto", "three_point"), "unknown sensitivity_mode"),
            (self.snapshot_interval >= 0, "snapshot_interval must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.mesh_file is not None and not (self.base_dir / self.mesh_file).exists():
            raise ConfigError(f"mesh file not found: {self.mesh_file}")
        try:
            self.build_domain()
        except (KeyError, TypeError, ValueError, FileNotFoundError) as exc:
            raise ConfigError(f"bad domain: {exc}") from exc
        try:
            Material(**self.material)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad material: {exc}") from exc

    # -- builders --------------------------------------------------------------
    def build_domain(self):
        return domain_from_spec(self.domain, self.base_dir)

    def build_mesh(self, domain):
        if self.mesh_file is not None:
            return load_json(self.base_dir / self.mesh_file)
        return build_structured(domain, self.coarse_res, self.refine, self.depth)

    def build_material(self):
        return Material(**self.material)

    def build_settings(self, fine, domain):
        la = fine.l_a
        thickness = None
        if self.shell:
            thickness = self.shell_thickness if self.shell_thickness is not None else 2.0 * la
        return FoamSettings(fine, domain, eps=self.eps_factor * la, p=self.p, alpha=self.alpha,
                            shell=thickness, boundary_faces=self.boundary_faces,
                            step=self.fd_step_factor * la, mode=self.sensitivity_mode)

    def build_loadcase(self, fine):
        return loadcase_from_spec(self.loads, fine)

    def seed_box(self, domain):
        if self.seed_bounds is None:
            return domain.bbox
        lo, hi = self.seed_bounds
        return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)


def _select(nodes, region, tol):
    if "box" in region:
        lo, hi = (np.asarray(b, dtype=float) for b in region["box"])
        return np.nonzero(np.all((nodes >= lo - tol) & (nodes <= hi + tol), axis=1))[0]
    if "nodes" in region:
        return np.asarray(region["nodes"], dtype=int)
    raise ConfigError("a load region needs 'box' or 'nodes'")


def loadcase_from_spec(spec: dict, fine) -> LoadCase:
    """``{"supports": [{"box": [lo, hi], "axes": [0, 1]}], "forces": [{"box": ..., "vector": [...]}]}``.

    A force vector is the total load, spread evenly over the selected nodes.
    """
    d = fine.dim
    nodes = fine.nodes
    tol = 1e-6 * fine.l_a
    fixed = []
    f = np.zeros(len(nodes) * d)
    for sup in spec.get("supports", []):
        ids = _select(nodes, sup, tol)
        if len(ids) == 0:
            raise ConfigError(f"support region selects no nodes: {sup}")
        axes = sup.get("axes", list(range(d)))
        fixed.append((ids[:, None] * d + np.asarray(axes)[None, :]).ravel())
    for force in spec.get("forces", []):
        ids = _select(nodes, force, tol)
        if len(ids) == 0:
            raise ConfigError(f"force region selects no nodes: {force}")
        vec = np.asarray(force["vector"], dtype=float)
        if vec.shape != (d,):
            raise ConfigError("force vector has the wrong dimension")
        for c in range(d):
            f[ids * d + c] += vec[c] / len(ids)
    fixed = np.concatenate(fixed) if fixed else np.zeros(0, dtype=int)
    return LoadCase(fixed, 0.0, f)
