"""Linear elasticity on simplices: element matrices, assembly, constrained solve."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class SingularSystemError(RuntimeError):
    """Constraints leave a rigid-body mode free or the factorisation failed."""


@dataclass(frozen=True)
class Material:
    E: float = 1.0
    nu: float = 0.3
    plane: str = "stress"      # 2D only: "stress" or "strain"

    def __post_init__(self):
        if self.E <= 0 or not -1.0 < self.nu < 0.5:
            raise ValueError("need E > 0 and -1 < nu < 0.5")
        if self.plane not in ("stress", "strain"):
            raise ValueError("plane must be 'stress' or 'strain'")

    def D(self, dim: int) -> np.ndarray:
        E, nu = self.E, self.nu
        if dim == 2:
            if self.plane == "stress":
                c = E / (1 - nu * nu)
                return c * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
            c = E / ((1 + nu) * (1 - 2 * nu))
            return c * np.array([[1 - nu, nu, 0], [nu, 1 - nu, 0], [0, 0, (1 - 2 * nu) / 2]])
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[:3, :3] += 2 * mu * np.eye(3)
        D[3:, 3:] = mu * np.eye(3)
        return D


def _strain_matrices(P):
    """B matrices (T, n_strain, d(d+1)) and volumes for simplices P (T, d+1, d)."""
    T, n, d = P.shape
    A = np.ones((T, n, n))
    A[:, :, 1:] = P
    det = np.linalg.det(A)
    vol = det / (2.0 if d == 2 else 6.0)
    grads = np.linalg.inv(A)[:, 1:, :]          # (T, d, n): d lambda_k / d x_c
    B = np.zeros((T, 3 if d == 2 else 6, d * n))
    for k in range(n):
        gx = grads[:, 0, k]
        gy = grads[:, 1, k]
        if d == 2:
            B[:, 0, 2 * k] = gx
            B[:, 1, 2 * k + 1] = gy
            B[:, 2, 2 * k] = gy
            B[:, 2, 2 * k + 1] = gx
        else:
            gz = grads[:, 2, k]
            c = 3 * k
            B[:, 0, c] = gx
            B[:, 1, c + 1] = gy
            B[:, 2, c + 2] = gz
            B[:, 3, c + 1] = gz
            B[:, 3, c + 2] = gy
            B[:, 4, c] = gz
            B[:, 4, c + 2] = gx
            B[:, 5, c] = gy
            B[:, 5, c + 1] = gx
    return B, vol


def element_stiffness(P, material: Material) -> np.ndarray:
    """Unit-density stiffness of one linear simplex (constant strain)."""
    P = np.asarray(P, dtype=float)
    B, vol = _strain_matrices(P[None])
    if vol[0] <= 0:
        raise ValueError("inverted or flat simplex")
    D = material.D(P.shape[1])
    return vol[0] * B[0].T @ D @ B[0]


def element_dofs(elements, dim):
    e = np.asarray(elements)
    return (e[:, :, None] * dim + np.arange(dim)).reshape(len(e), -1)


@dataclass
class StiffnessCache:
    """Unit-density element matrices, shared between congruent elements.

    Structured meshes have only a handful of distinct simplex shapes, so
    matrices are keyed by their rounded edge vectors.
    """

    fine: object
    material: Material = field(default_factory=Material)

    def __post_init__(self):
        nodes, elems = self.fine.nodes, self.fine.elements
        P = nodes[elems]
        edges = P[:, 1:] - P[:, :1]
        key = np.round(edges.reshape(len(elems), -1) / self.fine.l_a * 1e8).astype(np.int64)
        _, first, self.kind = np.unique(key, axis=0, return_index=True, return_inverse=True)
        self.kind = self.kind.ravel()
        B, vol = _strain_matrices(P[first])
        D = self.material.D(self.fine.dim)
        self.kref = vol[:, None, None] * np.einsum("tsi,sr,trj->tij", B, D, B)
        self.dofs = element_dofs(elems, self.fine.dim)

    def matrices(self, ids=None):
        return self.kref[self.kind if ids is None else self.kind[ids]]

    def assemble(self, H, ids=None, dof_map=None, n=None):
        """Sparse sum of H_e * k_e over ``ids`` (all elements by default).

        ``dof_map`` renumbers global DOFs into a local range of size ``n``.
        """
        ids = np.arange(len(self.kind)) if ids is None else np.asarray(ids)
        k = self.kref[self.kind[ids]]
        k *= np.asarray(H, dtype=float)[:, None, None]
        dofs = self.dofs[ids]
        if dof_map is not None:
            dofs = dof_map[dofs]
        else:
            n = self.fine.nodes.shape[0] * self.fine.dim
        m = dofs.shape[1]
        rows = np.repeat(dofs, m, axis=1).ravel()
        cols = np.tile(dofs, (1, m)).ravel()
        K = sp.coo_matrix((k.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        K.sum_duplicates()
        return K


def assemble(density, mesh, material: Material = Material(), cache: StiffnessCache | None = None):
    """Global K = sum_e H_e k_e on the fine mesh."""
    fine = getattr(mesh, "fine", mesh)
    cache = cache or StiffnessCache(fine, material)
    H = getattr(density, "H", density)
    return cache.assemble(H)


@dataclass
class LoadCase:
    """Dirichlet data as (DOF ids, values) and a nodal force vector over all DOFs."""

    fixed_dofs: np.ndarray
    fixed_values: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        self.fixed_dofs = np.asarray(self.fixed_dofs, dtype=int)
        self.fixed_values = np.broadcast_to(np.asarray(self.fixed_values, dtype=float),
                                            self.fixed_dofs.shape).copy()
        self.f = np.asarray(self.f, dtype=float)
        self.fixed_dofs, idx = np.unique(self.fixed_dofs, return_index=True)
        self.fixed_values = self.fixed_values[idx]

    @classmethod
    def from_triples(cls, dirichlet, f, dim):
        """``dirichlet`` is an iterable of (node, axis, value)."""
        trip = list(dirichlet)
        dofs = [int(n) * dim + int(a) for n, a, _ in trip]
        return cls(dofs, [float(v) for _, _, v in trip], f)

    @property
    def homogeneous(self):
        return not np.any(self.fixed_values)


def dirichlet_loadcase(n_nodes, dim, fixed_nodes, axes, load_nodes, load_vector):
    """Fix ``axes`` of ``fixed_nodes``; spread ``load_vector`` evenly over ``load_nodes``."""
    fixed_nodes = np.asarray(fixed_nodes, dtype=int)
    dofs = (fixed_nodes[:, None] * dim + np.asarray(axes)[None, :]).ravel()
    f = np.zeros(n_nodes * dim)
    load_nodes = np.asarray(load_nodes, dtype=int)
    if len(load_nodes):
        share = np.asarray(load_vector, dtype=float) / len(load_nodes)
        for c in range(dim):
            f[load_nodes * dim + c] += share[c]
    return LoadCase(dofs, 0.0, f)


def rigid_modes(coords):
    """Translations then rotations as columns (named), for DOF layout node*d + c."""
    x = np.asarray(coords, dtype=float)
    n, d = x.shape
    c = x - x.mean(axis=0)
    modes, names = [], []
    for a in range(d):
        m = np.zeros((n, d))
        m[:, a] = 1.0
        modes.append(m.ravel())
        names.append(f"translation {'xyz'[a]}")
    if d == 2:
        m = np.column_stack([-c[:, 1], c[:, 0]])
        modes.append(m.ravel())
        names.append("rotation z")
    else:
        for a, (i, j) in zip("xyz", ((1, 2), (2, 0), (0, 1))):
            m = np.zeros((n, 3))
            m[:, i] = -c[:, j]
            m[:, j] = c[:, i]
            modes.append(m.ravel())
            names.append(f"rotation {a}")
    return np.column_stack(modes), names


def check_constraints(coords, fixed_dofs):
    """Raise if the fixed DOFs leave a rigid-body mode unconstrained."""
    R, names = rigid_modes(coords)
    Rc = R[np.asarray(fixed_dofs, dtype=int)]
    if Rc.shape[0] == 0:
        raise SingularSystemError(f"unconstrained rigid mode: {names[0]}")
    s, vt = np.linalg.svd(Rc, full_matrices=True)[1:]
    scale = np.linalg.norm(R, axis=0).max()
    rank = int(np.sum(s > 1e-10 * scale))
    if rank < R.shape[1]:
        free = vt[rank:]
        # name the mode contributing most to the null direction
        k = int(np.argmax(np.abs(free[0])))
        raise SingularSystemError(f"unconstrained rigid mode: {names[k]}")


def solve(K, loadcase: LoadCase, coords=None):
    """Solve K Q = f with DOF elimination; Dirichlet values are set exactly."""
    n = K.shape[0]
    if coords is not None:
        check_constraints(coords, loadcase.fixed_dofs)
    fixed = loadcase.fixed_dofs
    free = np.setdiff1d(np.arange(n), fixed)
    Q = np.zeros(n)
    Q[fixed] = loadcase.fixed_values
    rhs = loadcase.f[free]
    if np.any(Q[fixed]):
        rhs = rhs - K[free][:, fixed] @ Q[fixed]
    if not np.any(rhs):
        return Q
    Kff = K[free][:, free].tocsc()
    try:
        lu = splu(Kff)
    except RuntimeError as exc:
        raise SingularSystemError(f"constrained stiffness is singular: {exc}") from exc
    q = lu.solve(rhs)
    if not np.all(np.isfinite(q)):
        raise SingularSystemError("constrained stiffness is singular")
    res = np.linalg.norm(Kff @ q - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if res > 1e-8:
        raise SingularSystemError(f"solve residual {res:.2e} exceeds 1e-8")
    Q[free] = q
    return Q


def compliance(K, Q, f=None):
    """C = 1/2 f^T Q; when ``f`` is given the energy form 1/2 Q^T K Q is checked too."""
    energy = 0.5 * float(Q @ (K @ Q))
    if f is None:
        return energy
    work = 0.5 * float(f @ Q)
    if abs(work - energy) > 1e-8 * max(abs(work), abs(energy)) + 1e-300:
        raise ArithmeticError(f"compliance mismatch: work {work} vs energy {energy}")
    return work


def error_metric(C1, C0) -> float:
    """r = (C1 - C0)^2 / C0^2."""
    return float((C1 - C0) ** 2 / C0 ** 2)


def benchmark_compliance(density, fine, loadcase: LoadCase, material: Material = Material(),
                         reference: float | None = None, cache: StiffnessCache | None = None):
    """Full fine-mesh compliance; with a reference also the error metric r."""
    K = assemble(density, fine, material, cache)
    Q = solve(K, loadcase, fine.nodes)
    C = compliance(K, Q, loadcase.f)
    if reference is None:
        return C
    return C, error_metric(C, reference)
