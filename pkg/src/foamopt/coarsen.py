"""Material-aware coarsening.

Per coarse element the fine displacements are ``q = Psi Q`` with
``Psi = M psi``: ``psi`` interpolates coarse-node values onto the element
boundary with an S-patch basis, ``M = [I; -k_i^{-1} k_ib]`` fills the interior
by static condensation.  Stitched over elements this is a conforming
prolongation ``P`` and the coarse problem is the Galerkin projection
``K_H = P^T K P``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import LoadCase, SingularSystemError, StiffnessCache, check_constraints
from .mesh import multinomial, spatch_control_points


def mean_value_coordinates(V, x, tol=1e-12):
    """Mean-value coordinates of points ``x`` (P, 2) in polygon ``V`` (n, 2).

    Points on an edge get linear coordinates along it, points at a vertex a
    unit vector, so the basis is continuous up to the boundary.
    """
    V = np.asarray(V, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(V)
    P = len(x)
    scale = np.linalg.norm(V.max(axis=0) - V.min(axis=0))
    if n == 2:
        a, b = V
        ab = b - a
        t = (x - a) @ ab / (ab @ ab)
        return np.column_stack([1 - t, t])
    out = np.zeros((P, n))
    s = V[None, :, :] - x[:, None, :]                       # (P, n, 2)
    r = np.linalg.norm(s, axis=2)
    done = np.zeros(P, dtype=bool)
    at_vertex = r <= tol * scale
    for k in range(n):
        hit = at_vertex[:, k] & ~done
        out[hit, k] = 1.0
        done |= hit
    for k in range(n):
        k1 = (k + 1) % n
        e = V[k1] - V[k]
        L2 = e @ e
        t = (x - V[k]) @ e / L2
        foot = V[k] + np.clip(t, 0, 1)[:, None] * e
        on = (np.linalg.norm(x - foot, axis=1) <= tol * scale) & ~done
        out[on, k] = 1 - t[on]
        out[on, k1] = t[on]
        done |= on
    rest = ~done
    if rest.any():
        s_, r_ = s[rest], r[rest]
        sn = np.roll(s_, -1, axis=1)
        rn = np.roll(r_, -1, axis=1)
        cross = s_[..., 0] * sn[..., 1] - s_[..., 1] * sn[..., 0]
        dot = np.einsum("pkc,pkc->pk", s_, sn)
        # tan(theta_k / 2) for the angle at x between v_k and v_{k+1}
        tan_half = cross / (r_ * rn + dot)
        w = (np.roll(tan_half, 1, axis=1) + tan_half) / r_
        out[rest] = w / w.sum(axis=1, keepdims=True)
    return out


def _plane_frame(V):
    o = V[0]
    u = V[1] - V[0]
    u /= np.linalg.norm(u)
    nrm = np.cross(V[1] - V[0], V[2] - V[0])
    nrm /= np.linalg.norm(nrm)
    v = np.cross(nrm, u)
    return o, np.column_stack([u, v])


@dataclass
class SPatchBasis:
    """Degree-``depth`` S-patch on one polygon (a segment in 2D)."""

    vertices: np.ndarray
    depth: int = 2
    face_interior: bool = True

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.points, self.labels, self.R = spatch_control_points(
            self.vertices, self.depth, face_interior=self.face_interior)
        self.coef = np.array([multinomial(l) for l in self.labels])
        if self.vertices.shape[1] == 3:
            self._o, self._F = _plane_frame(self.vertices)

    def _flat(self, x):
        if self.vertices.shape[1] == 3:
            return (x - self._o) @ self._F, (self.vertices - self._o) @ self._F
        return x, self.vertices

    def coordinates(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xf, Vf = self._flat(x)
        return mean_value_coordinates(Vf, xf)

    def label_values(self, x):
        w = self.coordinates(x)                                 # (P, n)
        return self.coef[None, :] * np.prod(w[:, None, :] ** self.labels[None, :, :], axis=2)

    def __call__(self, x):
        """Basis values on the merged control points, shape (P, n_points)."""
        return self.label_values(x) @ self.R


def spatch_eval(basis: SPatchBasis, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = basis.coordinates(x)
    if np.any(w < -1e-9):
        raise ValueError("point lies outside the S-patch polygon (extrapolation)")
    return basis(x)


def boundary_interpolation(elem, mesh):
    """Scalar weights psi (n_boundary, n_coarse_local) for the element."""
    from .mesh import _point_on_face

    fine = mesh.fine
    xb = fine.nodes[elem.boundary]
    psi = np.zeros((len(xb), len(elem.coarse_nodes)))
    done = np.zeros(len(xb), dtype=bool)
    tol = 1e-9 * fine.l_a
    for face, (labels, R, local) in zip(elem.faces, elem.face_ctrl):
        on = _point_on_face(xb, face, tol) & ~done
        if not on.any():
            continue
        basis = SPatchBasis(face, mesh.depth, mesh.face_interior)
        vals = basis(xb[on])
        rows = np.nonzero(on)[0]
        np.add.at(psi, (rows[:, None], local[None, :]), vals)
        done |= on
    if not done.all():
        raise ValueError("boundary node not found on any face")
    return psi


@dataclass
class ElementOperators:
    dofs: np.ndarray            # global fine DOFs of the element
    coarse_dofs: np.ndarray     # global coarse DOFs
    Psi: np.ndarray             # (len(dofs), len(coarse_dofs))
    K: np.ndarray               # coarse stiffness
    psi: np.ndarray             # scalar boundary weights


def _node_dofs(nodes, d):
    return (np.asarray(nodes)[:, None] * d + np.arange(d)).ravel()


def _spd_lu(A):
    # interior blocks are SPD: symmetric ordering, no pivoting off the diagonal
    return splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True))


def schur_transform(k, b_idx, i_idx):
    """Dense M = [I; -k_i^{-1} k_ib] with rows ordered as ``b_idx`` then ``i_idx``."""
    k = sp.csc_matrix(k)
    kib = k[i_idx][:, b_idx]
    if len(i_idx) == 0:
        return np.eye(len(b_idx))
    try:
        lu = _spd_lu(k[i_idx][:, i_idx])
    except RuntimeError as exc:
        raise SingularSystemError("interior block is singular; the void floor alpha must be > 0") from exc
    Mi = -lu.solve(kib.toarray())
    return np.vstack([np.eye(len(b_idx)), Mi])


def build_element(elem, mesh, cache: StiffnessCache, H, fixed_dof_mask=None):
    """Operators of one coarse element for densities ``H`` (all fine elements)."""
    d = mesh.dim
    dofs = _node_dofs(elem.nodes, d)
    lmap = -np.ones(len(mesh.fine.nodes) * d, dtype=int)
    lmap[dofs] = np.arange(len(dofs))
    k = cache.assemble(H[elem.fine_elements], elem.fine_elements, lmap, len(dofs)).tocsc()
    if getattr(elem, "psi", None) is None:
        elem.psi = boundary_interpolation(elem, mesh)        # geometric: built once
    psi = elem.psi
    b_dofs = _node_dofs(elem.boundary, d)
    i_dofs = _node_dofs(elem.interior, d)
    if fixed_dof_mask is not None:
        i_dofs = i_dofs[~fixed_dof_mask[i_dofs]]
    b_loc, i_loc = lmap[b_dofs], lmap[i_dofs]
    Psi_b = np.kron(psi, np.eye(d))
    Psi = np.zeros((len(dofs), Psi_b.shape[1]))
    Psi[b_loc] = Psi_b
    if len(i_loc):
        try:
            lu = _spd_lu(k[i_loc][:, i_loc])
        except RuntimeError as exc:
            raise SingularSystemError("interior block is singular; the void floor alpha must be > 0") from exc
        Psi[i_loc] = -lu.solve(np.asarray(k[i_loc][:, b_loc] @ Psi_b))
    K = Psi.T @ (k @ Psi)
    K = 0.5 * (K + K.T)
    coarse_dofs = _node_dofs(elem.coarse_nodes, d)
    return ElementOperators(dofs, coarse_dofs, Psi, K, psi)


def coarse_stiffness(ops: ElementOperators):
    return ops.K


def coarse_gradient(ops: ElementOperators, elem, cache: StiffnessCache, dH):
    """dK/da = Psi^T (sum_e dH_e k_e) Psi with Psi held fixed."""
    d = cache.fine.dim
    lmap = -np.ones(len(cache.fine.nodes) * d, dtype=int)
    lmap[ops.dofs] = np.arange(len(ops.dofs))
    dk = cache.assemble(np.asarray(dH)[elem.fine_elements], elem.fine_elements, lmap, len(ops.dofs))
    return ops.Psi.T @ (dk @ ops.Psi)


class CoarseSystem:
    """Global coarse solve for one density field."""

    def __init__(self, mesh, cache: StiffnessCache, H, loadcase: LoadCase):
        if not loadcase.homogeneous:
            raise ValueError("the coarse path supports homogeneous Dirichlet data only")
        self.mesh = mesh
        d = mesh.dim
        n_fine = len(mesh.fine.nodes) * d
        n_coarse = mesh.n_coarse_nodes * d
        fixed_mask = np.zeros(n_fine, dtype=bool)
        fixed_mask[loadcase.fixed_dofs] = True
        self.ops = []
        rows, cols, vals = [], [], []
        Kr, Kc, Kv = [], [], []
        seen = np.zeros(n_fine, dtype=bool)
        coarse_fixed = np.zeros(n_coarse, dtype=bool)
        for elem in mesh.elements:
            op = build_element(elem, mesh, cache, H, fixed_mask)
            self.ops.append(op)
            m = len(op.coarse_dofs)
            Kr.append(np.repeat(op.coarse_dofs, m))
            Kc.append(np.tile(op.coarse_dofs, m))
            Kv.append(op.K.ravel())
            new = ~seen[op.dofs]
            seen[op.dofs] = True
            r, c = np.nonzero(op.Psi[new])
            rows.append(op.dofs[new][r])
            cols.append(op.coarse_dofs[c])
            vals.append(op.Psi[new][r, c])
            # a fixed fine DOF on the element boundary pins every coarse DOF feeding it
            bd = _node_dofs(elem.boundary, d)
            fb = bd[fixed_mask[bd]]
            if len(fb):
                lmap = {g: i for i, g in enumerate(op.dofs)}
                sub = op.Psi[[lmap[g] for g in fb]]
                coarse_fixed[op.coarse_dofs[np.any(np.abs(sub) > 1e-14, axis=0)]] = True
        self.P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(n_fine, n_coarse))
        self.K = sp.csr_matrix((np.concatenate(Kv), (np.concatenate(Kr), np.concatenate(Kc))),
                               shape=(n_coarse, n_coarse))
        self.F = self.P.T @ loadcase.f
        self.coarse_fixed = np.nonzero(coarse_fixed)[0]
        self.loadcase = loadcase

    def solve(self):
        n = self.K.shape[0]
        used = np.unique(np.concatenate([op.coarse_dofs for op in self.ops]))
        check_constraints(self.mesh.coarse_coords, self.coarse_fixed)
        free = np.setdiff1d(used, self.coarse_fixed)
        Q = np.zeros(n)
        Kff = self.K[free][:, free].tocsc()
        try:
            Q[free] = splu(Kff).solve(self.F[free])
        except RuntimeError as exc:
            raise SingularSystemError(f"coarse stiffness is singular: {exc}") from exc
        if not np.all(np.isfinite(Q)):
            raise SingularSystemError("coarse stiffness is singular")
        self.Q = Q
        self.q = self.P @ Q
        self.C = 0.5 * float(self.F @ Q)
        return Q

    def prolong(self, Q=None):
        return self.P @ (self.Q if Q is None else Q)


def prolong(system: CoarseSystem, Q=None):
    return system.prolong(Q)


def element_energies(cache: StiffnessCache, q):
    """q_e^T k_e q_e per fine element (unit density)."""
    out = np.empty(len(cache.kind))
    for t in range(len(cache.kref)):
        ids = np.nonzero(cache.kind == t)[0]
        qe = q[cache.dofs[ids]]
        out[ids] = np.einsum("ei,ij,ej->e", qe, cache.kref[t], qe)
    return out
