"""Hot loops: capsule distances and their smooth (KS) union over many points.

``beam_union`` is the only kernel that sees (points x beams) work; everything
else in the package is vectorised numpy or sparse linear algebra.
"""
import numpy as np

from ._jit import njit, pick

# exp(-40) ~ 4e-18: terms this far below the running max do not change a
# float64 log-sum-exp, so the numba loop skips them.
KS_SKIP = 40.0


def segment_distances(points, v1, v2):
    """Distance from every point to every segment, shape (P, B)."""
    points = np.atleast_2d(points)
    a = v2 - v1                                   # (B, d)
    aa = np.einsum("bd,bd->b", a, a)
    b = points[:, None, :] - v1[None, :, :]       # (P, B, d)
    ab = np.einsum("pbd,bd->pb", b, a)
    safe = np.where(aa > 0, aa, 1.0)
    t = np.clip(ab / safe, 0.0, 1.0)
    t = np.where(aa > 0, t, 0.0)
    foot = v1[None, :, :] + t[..., None] * a[None, :, :]
    return np.linalg.norm(points[:, None, :] - foot, axis=2)


def _beam_union_numpy(points, v1, v2, rbar, p, scale, chunk=2048):
    n = len(points)
    out = np.full(n, -np.inf)
    if len(rbar) == 0:
        return out
    for s in range(0, n, chunk):
        phi = rbar[None, :] - segment_distances(points[s:s + chunk], v1, v2)
        top = phi.max(axis=1)
        z = np.exp(p * (phi - top[:, None]) / scale).sum(axis=1)
        out[s:s + chunk] = scale * np.log(z) / p + top
    return out


@njit(cache=True)
def _beam_union_numba(points, v1, v2, rbar, p, scale):
    n, d = points.shape
    nb = rbar.shape[0]
    out = np.full(n, -np.inf)
    if nb == 0:
        return out
    # per-beam bounding sphere for cheap rejection
    mid = 0.5 * (v1 + v2)
    half = np.empty(nb)
    aa = np.empty(nb)
    for j in range(nb):
        s = 0.0
        for k in range(d):
            t = v2[j, k] - v1[j, k]
            s += t * t
        aa[j] = s
        half[j] = 0.5 * np.sqrt(s)
    cut = KS_SKIP * scale / p
    for i in range(n):
        m = -np.inf
        acc = 0.0
        for j in range(nb):
            c = 0.0
            for k in range(d):
                t = points[i, k] - mid[j, k]
                c += t * t
            ub = rbar[j] - (np.sqrt(c) - half[j])
            if ub < m - cut:
                continue
            ab = 0.0
            for k in range(d):
                ab += (points[i, k] - v1[j, k]) * (v2[j, k] - v1[j, k])
            if aa[j] > 0.0:
                t = ab / aa[j]
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            else:
                t = 0.0
            dist = 0.0
            for k in range(d):
                g = points[i, k] - (v1[j, k] + t * (v2[j, k] - v1[j, k]))
                dist += g * g
            phi = rbar[j] - np.sqrt(dist)
            if phi > m:
                acc = acc * np.exp(p * (m - phi) / scale) + 1.0
                m = phi
            else:
                acc += np.exp(p * (phi - m) / scale)
        out[i] = scale * np.log(acc) / p + m
    return out


_beam_union = pick(_beam_union_numba, _beam_union_numpy)


def beam_union(points, v1, v2, rbar, p=16.0, scale=1.0):
    """KS union of capsule fields ``rbar - dist(x, [v1, v2])`` at every point.

    Returns ``-inf`` where there are no beams.  ``scale`` is the length that
    makes ``p`` dimensionless: the union is ``scale * KS(phi / scale)``.
    """
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    v1 = np.ascontiguousarray(np.reshape(v1, (-1, points.shape[1])), dtype=float)
    v2 = np.ascontiguousarray(np.reshape(v2, (-1, points.shape[1])), dtype=float)
    rbar = np.ascontiguousarray(np.ravel(rbar), dtype=float)
    return _beam_union(points, v1, v2, rbar, float(p), float(scale))


def _max_beam_phi_numpy(points, v1, v2, rbar, chunk=2048):
    out = np.full(len(points), -np.inf)
    if len(rbar) == 0:
        return out
    for s in range(0, len(points), chunk):
        out[s:s + chunk] = (rbar[None, :] - segment_distances(points[s:s + chunk], v1, v2)).max(axis=1)
    return out


@njit(cache=True)
def _max_beam_phi_numba(points, v1, v2, rbar):
    n, d = points.shape
    nb = rbar.shape[0]
    out = np.full(n, -np.inf)
    for i in range(n):
        m = -np.inf
        for j in range(nb):
            aa = 0.0
            ab = 0.0
            for k in range(d):
                a = v2[j, k] - v1[j, k]
                aa += a * a
                ab += (points[i, k] - v1[j, k]) * a
            t = 0.0
            if aa > 0.0:
                t = min(max(ab / aa, 0.0), 1.0)
            dist = 0.0
            for k in range(d):
                g = points[i, k] - (v1[j, k] + t * (v2[j, k] - v1[j, k]))
                dist += g * g
            phi = rbar[j] - np.sqrt(dist)
            if phi > m:
                m = phi
        out[i] = m
    return out


_max_beam_phi = pick(_max_beam_phi_numba, _max_beam_phi_numpy)


def max_beam_phi(points, v1, v2, rbar):
    """Largest single-capsule value ``max_j rbar_j - dist_j(x)`` at every point."""
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    v1 = np.ascontiguousarray(np.reshape(v1, (-1, points.shape[1])), dtype=float)
    v2 = np.ascontiguousarray(np.reshape(v2, (-1, points.shape[1])), dtype=float)
    rbar = np.ascontiguousarray(np.ravel(rbar), dtype=float)
    return _max_beam_phi(points, v1, v2, rbar)


def ks_combine(base, extra, p, scale):
    """Merge extra field values (P, m) into already-unioned values (P,)."""
    if extra is None or extra.size == 0:
        return base
    allv = np.column_stack([base, extra])
    top = allv.max(axis=1)
    finite = np.isfinite(top)
    out = np.full(len(base), -np.inf)
    t = top[finite]
    z = np.exp(p * (allv[finite] - t[:, None]) / scale).sum(axis=1)
    out[finite] = scale * np.log(z) / p + t
    return out
