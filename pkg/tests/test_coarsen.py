import numpy as np
import pytest

from foamopt.coarsen import (CoarseSystem, SPatchBasis, build_element, coarse_gradient, mean_value_coordinates,
                             schur_transform, spatch_eval)
from foamopt.domain import Box
from foamopt.fem import (LoadCase, StiffnessCache, assemble, benchmark_compliance, dirichlet_loadcase,
                         element_stiffness, rigid_modes, solve)
from foamopt.mesh import CoarseElement, CoarseMesh, FineMesh, build_structured, finalize

PENTAGON = np.array([[np.cos(t), np.sin(t)] for t in np.arange(5) * 2 * np.pi / 5])


def test_spatch_vertex_and_partition_of_unity():
    b = SPatchBasis(PENTAGON, 2)
    vals = spatch_eval(b, PENTAGON[2])
    k = int(np.argmin(np.linalg.norm(b.points - PENTAGON[2], axis=1)))
    assert vals[0, k] == pytest.approx(1.0) and np.allclose(np.delete(vals[0], k), 0.0)
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.5, 0.5, (200, 2))
    assert np.allclose(b(x).sum(axis=1), 1.0, atol=1e-10)
    with pytest.raises(ValueError):
        spatch_eval(b, [[3.0, 0.0]])


def test_depth_one_is_barycentric():
    b = SPatchBasis(PENTAGON, 1)
    x = np.array([[0.1, 0.2], [-0.3, 0.1]])
    order = [int(np.argmin(np.linalg.norm(PENTAGON - p, axis=1))) for p in b.points]
    assert np.allclose(b(x), mean_value_coordinates(PENTAGON, x)[:, order])


def test_spatch_linear_precision_3d_face():
    quad = np.array([[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1.0]])
    b = SPatchBasis(quad, 2)
    x = np.array([[0.3, 0.6, 1.0], [0.9, 0.1, 1.0]])
    assert np.allclose(b(x) @ b.points, x)


def _element_k(m, e=0):
    cache = StiffnessCache(m.fine)
    elem = m.elements[e]
    K = cache.assemble(np.ones(len(m.fine.elements)))
    return K, elem


def test_schur_transform_properties():
    m = build_structured(Box([0, 0], [1, 1]), 1, 4)
    K, elem = _element_k(m)
    b = (elem.boundary[:, None] * 2 + np.arange(2)).ravel()
    i = (elem.interior[:, None] * 2 + np.arange(2)).ravel()
    M = schur_transform(K[np.r_[b, i]][:, np.r_[b, i]], np.arange(len(b)), np.arange(len(b), len(b) + len(i)))
    # rigid translation
    qb = np.tile([0.3, -0.2], len(elem.boundary))
    assert np.allclose(M @ qb, np.tile([0.3, -0.2], len(elem.boundary) + len(elem.interior)))
    # linear boundary field gives the linear interior field
    G = np.array([[0.01, 0.02], [-0.03, 0.005]])
    xb, xi = m.fine.nodes[elem.boundary], m.fine.nodes[elem.interior]
    q = M @ (xb @ G.T).ravel()
    assert np.allclose(q[len(b):], (xi @ G.T).ravel(), atol=1e-12)
    # equilibrium residual for random boundary data
    rng = np.random.default_rng(0)
    qb = rng.normal(size=len(b))
    qi = (M @ qb)[len(b):]
    kib, ki = K[i][:, b], K[i][:, i]
    assert np.linalg.norm(kib @ qb + ki @ qi) <= 1e-8 * np.linalg.norm(kib @ qb)


def test_schur_without_interior_is_identity():
    k = element_stiffness(np.array([[0.0, 0.0], [1, 0], [0, 1]]), __import__("foamopt").fem.Material())
    assert np.array_equal(schur_transform(k, np.arange(6), np.arange(0)), np.eye(6))


def _single_simplex_mesh(depth=1):
    P = np.array([[0.0, 0.0], [1.0, 0.1], [0.2, 0.8]])
    fine = FineMesh(P, [[0, 1, 2]])
    faces = [P[[0, 1]], P[[1, 2]], P[[2, 0]]]
    mesh = CoarseMesh(fine, [CoarseElement(faces, np.array([0]))], depth=depth)
    return finalize(mesh)


def test_single_simplex_coarse_stiffness_is_element_stiffness():
    mesh = _single_simplex_mesh()
    cache = StiffnessCache(mesh.fine)
    op = build_element(mesh.elements[0], mesh, cache, np.ones(1))
    order = [int(np.argmin(np.linalg.norm(mesh.coarse_coords - p, axis=1))) for p in mesh.fine.nodes]
    perm = (np.array(order)[:, None] * 2 + np.arange(2)).ravel()
    k = cache.kref[0]
    assert np.allclose(op.K[np.ix_(perm, perm)], k, atol=1e-12)


@pytest.mark.parametrize("dim", [2, 3])
def test_element_operators_reproduce_rigid_modes(dim):
    rng = np.random.default_rng(dim)
    m = build_structured(Box(np.zeros(dim), np.ones(dim)), 2, 3)
    cache = StiffnessCache(m.fine)
    H = rng.uniform(1e-3, 1, len(m.fine.elements))
    for elem in m.elements[:2]:
        op = build_element(elem, m, cache, H)
        assert np.allclose(op.K, op.K.T)
        R, _ = rigid_modes(m.coarse_coords[elem.coarse_nodes])
        Rf, _ = rigid_modes(m.fine.nodes[elem.nodes])
        # translations and rotations are reproduced exactly (linear precision)
        assert np.allclose(op.Psi @ R[:, :dim], Rf[:, :dim], atol=1e-10)
        assert np.max(np.abs(op.K @ R)) <= 1e-8 * np.abs(op.K).max()
        assert np.allclose(op.psi.sum(axis=1), 1.0, atol=1e-10)


def _cantilever(m, F=(0.0, -1.0)):
    x = m.fine.nodes
    left = np.nonzero(x[:, 0] < 1e-12)[0]
    hi = x[:, 0].max()
    tip = np.nonzero(np.abs(x[:, 0] - hi) < 1e-12)[0]
    return dirichlet_loadcase(len(x), m.dim, left, list(range(m.dim)), tip, F)


def test_ritz_bound_and_homogeneous_accuracy():
    rng = np.random.default_rng(3)
    m = build_structured(Box([0, 0], [3, 1]), (3, 1), 6)
    cache = StiffnessCache(m.fine)
    lc = _cantilever(m)
    H = np.ones(len(m.fine.elements))
    Cf = benchmark_compliance(H, m.fine, lc, cache=cache)
    sysH = CoarseSystem(m, cache, H, lc)
    sysH.solve()
    assert sysH.C <= Cf * (1 + 1e-12)
    H = rng.uniform(1e-3, 1, len(m.fine.elements))
    Cf = benchmark_compliance(H, m.fine, lc, cache=cache)
    s = CoarseSystem(m, cache, H, lc)
    s.solve()
    assert s.C <= Cf * (1 + 1e-12)


def test_depth_two_not_worse_than_depth_one():
    errs = []
    for depth in (1, 2):
        m = build_structured(Box([0, 0], [3, 1]), (3, 1), 6, depth=depth)
        cache = StiffnessCache(m.fine)
        lc = _cantilever(m)
        H = np.random.default_rng(4).uniform(1e-2, 1, len(m.fine.elements))
        Cf = benchmark_compliance(H, m.fine, lc, cache=cache)
        s = CoarseSystem(m, cache, H, lc)
        s.solve()
        errs.append(abs(s.C - Cf) / Cf)
    assert errs[1] <= errs[0]


def test_prolong_translation_and_energy_identity():
    rng = np.random.default_rng(5)
    m = build_structured(Box([0, 0, 0], [2, 1, 1]), (2, 1, 1), 3)
    cache = StiffnessCache(m.fine)
    lc = _cantilever(m, (0.0, 0.0, -1.0))
    H = rng.uniform(1e-2, 1, len(m.fine.elements))
    s = CoarseSystem(m, cache, H, lc)
    s.solve()
    T = np.tile([0.1, 0.2, -0.3], m.n_coarse_nodes)
    assert np.allclose(s.prolong(T), np.tile([0.1, 0.2, -0.3], len(m.fine.nodes)))
    K = assemble(H, m.fine, cache=cache)
    q = s.prolong()
    assert 0.5 * q @ (K @ q) == pytest.approx(s.C, rel=1e-8)


def test_single_element_prolongation_matches_clamped_fine_solve():
    m = build_structured(Box([0, 0], [1, 1]), 1, 6, depth=1)
    cache = StiffnessCache(m.fine)
    K = assemble(np.ones(len(m.fine.elements)), m.fine, cache=cache)
    elem = m.elements[0]
    op = build_element(elem, m, cache, np.ones(len(m.fine.elements)))
    Qc = np.random.default_rng(0).normal(size=len(op.coarse_dofs))
    q = op.Psi @ Qc
    bd = (elem.boundary[:, None] * 2 + np.arange(2)).ravel()
    local = {g: i for i, g in enumerate(op.dofs)}
    vals = q[[local[g] for g in bd]]
    ref = solve(K, LoadCase(bd, vals, np.zeros(K.shape[0])))
    assert np.allclose(q, ref[op.dofs], atol=1e-10)


def test_coarse_gradient_matches_rebuild():
    rng = np.random.default_rng(6)
    m = build_structured(Box([0, 0], [1, 1]), 1, 5)
    cache = StiffnessCache(m.fine)
    elem = m.elements[0]
    H = rng.uniform(0.05, 1, len(m.fine.elements))
    op = build_element(elem, m, cache, H)
    assert not np.any(coarse_gradient(op, elem, cache, np.zeros_like(H)))
    dH = rng.normal(size=len(H))
    G = coarse_gradient(op, elem, cache, dH)
    h = 1e-6
    Kp = build_element(elem, m, cache, H + h * dH).K
    Km = build_element(elem, m, cache, H - h * dH).K
    fd = (Kp - Km) / (2 * h)
    # the interior is energy-minimising, so holding Psi fixed loses nothing
    assert np.max(np.abs(G - fd)) <= 1e-6 * np.abs(G).max()
    e = np.zeros_like(H)
    e[7] = 1.0
    unit = coarse_gradient(op, elem, cache, e)
    dofs = m.fine.elements[7]
    local = {g: i for i, g in enumerate(op.dofs)}
    rows = [local[int(n) * 2 + c] for n in dofs for c in range(2)]
    assert np.allclose(unit, op.Psi[rows].T @ cache.kref[cache.kind[7]] @ op.Psi[rows])


def test_inhomogeneous_dirichlet_rejected():
    m = build_structured(Box([0, 0], [1, 1]), 1, 2)
    lc = LoadCase([0, 1], [0.1, 0.0], np.zeros(len(m.fine.nodes) * 2))
    with pytest.raises(ValueError):
        CoarseSystem(m, StiffnessCache(m.fine), np.ones(len(m.fine.elements)), lc)
