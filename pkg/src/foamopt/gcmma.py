"""Globally convergent method of moving asymptotes (Svanberg).

Minimises f0(x) subject to f_i(x) <= 0 and box bounds.  Each outer step
builds a separable convex approximation around the current point; inner
steps tighten it (raise ``raa``) until the approximation is conservative at
the candidate, which makes every accepted step decrease the merit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GCMMAState:
    n: int
    m: int
    asyinit: float = 0.5
    asyincr: float = 1.2
    asydecr: float = 0.7
    move: float = 0.1
    raa0eps: float = 1e-6
    raaeps: float = 1e-6
    max_inner: int = 15
    # also accept an inner candidate that lowers f0 without worsening
    # feasibility; guards against stalling on non-smooth responses
    accept_descent: bool = True
    iteration: int = 0
    xold1: np.ndarray | None = None
    xold2: np.ndarray | None = None
    low: np.ndarray | None = None
    upp: np.ndarray | None = None
    a0: float = 1.0
    a: np.ndarray = None
    c: np.ndarray = None
    d: np.ndarray = None
    inner_counts: list = field(default_factory=list)

    def __post_init__(self):
        self.a = np.zeros(self.m) if self.a is None else self.a
        self.c = np.full(self.m, 1000.0) if self.c is None else self.c
        self.d = np.ones(self.m) if self.d is None else self.d


def _asymptotes(st: GCMMAState, x, xmin, xmax):
    span = xmax - xmin
    if st.iteration < 2 or st.low is None:
        low = x - st.asyinit * span
        upp = x + st.asyinit * span
    else:
        zzz = (x - st.xold1) * (st.xold1 - st.xold2)
        factor = np.ones_like(x)
        factor[zzz > 0] = st.asyincr
        factor[zzz < 0] = st.asydecr
        low = x - factor * (st.xold1 - st.low)
        upp = x + factor * (st.upp - st.xold1)
        low = np.clip(low, x - 10 * span, x - 0.01 * span)
        upp = np.clip(upp, x + 0.01 * span, x + 10 * span)
    return low, upp


def _approx_terms(df, raa, x, low, upp, xmin, xmax):
    """p, q for one function (df shape (n,))."""
    xmami = np.maximum(xmax - xmin, 1e-5)
    ux2 = (upp - x) ** 2
    xl2 = (x - low) ** 2
    p = np.maximum(df, 0.0)
    q = np.maximum(-df, 0.0)
    pq = p + q
    p = (p + 0.001 * pq + raa / xmami) * ux2
    q = (q + 0.001 * pq + raa / xmami) * xl2
    return p, q


def _approx_value(fval, p, q, x, xnew, low, upp):
    return fval + np.sum(p / (upp - xnew) + q / (xnew - low)) - np.sum(p / (upp - x) + q / (x - low))


def subsolv(m, n, epsimin, low, upp, alfa, beta, p0, q0, P, Q, a0, a, b, c, d):
    """Primal-dual interior-point solve of the MMA subproblem."""
    een = np.ones(n)
    eem = np.ones(m)
    epsi = 1.0
    x = 0.5 * (alfa + beta)
    y = eem.copy()
    z = 1.0
    lam = eem.copy()
    xsi = np.maximum(een / (x - alfa), een)
    eta = np.maximum(een / (beta - x), een)
    mu = np.maximum(eem, 0.5 * c)
    zet = 1.0
    s = eem.copy()

    def residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi):
        ux1 = upp - x
        xl1 = x - low
        plam = p0 + P.T @ lam
        qlam = q0 + Q.T @ lam
        gvec = P @ (1 / ux1) + Q @ (1 / xl1)
        dpsidx = plam / ux1 ** 2 - qlam / xl1 ** 2
        r = np.concatenate([
            dpsidx - xsi + eta,
            c + d * y - mu - lam,
            [a0 - zet - a @ lam],
            gvec - a * z - y + s - b,
            xsi * (x - alfa) - epsi,
            eta * (beta - x) - epsi,
            mu * y - epsi,
            [zet * z - epsi],
            lam * s - epsi,
        ])
        return r

    while epsi > epsimin:
        res = residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
        resnorm = np.linalg.norm(res)
        resmax = np.max(np.abs(res))
        it = 0
        while resmax > 0.9 * epsi and it < 200:
            it += 1
            ux1 = upp - x
            xl1 = x - low
            ux2, xl2 = ux1 ** 2, xl1 ** 2
            ux3, xl3 = ux1 * ux2, xl1 * xl2
            plam = p0 + P.T @ lam
            qlam = q0 + Q.T @ lam
            gvec = P @ (1 / ux1) + Q @ (1 / xl1)
            GG = P / ux2[None, :] - Q / xl2[None, :]
            dpsidx = plam / ux2 - qlam / xl2
            delx = dpsidx - epsi / (x - alfa) + epsi / (beta - x)
            dely = c + d * y - lam - epsi / y
            delz = a0 - a @ lam - epsi / z
            dellam = gvec - a * z - y - b + epsi / lam
            diagx = 2 * (plam / ux3 + qlam / xl3) + xsi / (x - alfa) + eta / (beta - x)
            diagy = d + mu / y
            diaglamyi = s / lam + 1.0 / diagy
            if m < n:
                blam = dellam + dely / diagy - GG @ (delx / diagx)
                Alam = np.diag(diaglamyi) + (GG / diagx[None, :]) @ GG.T
                AA = np.block([[Alam, a[:, None]], [a[None, :], np.array([[-zet / z]])]])
                sol = np.linalg.solve(AA, np.concatenate([blam, [delz]]))
                dlam = sol[:m]
                dz = sol[m]
                dx = -delx / diagx - (GG.T @ dlam) / diagx
            else:
                diaglamyiinv = 1.0 / diaglamyi
                dellamyi = dellam + dely / diagy
                Axx = np.diag(diagx) + (GG.T * diaglamyiinv[None, :]) @ GG
                azz = zet / z + a @ (a / diaglamyi)
                axz = -GG.T @ (a / diaglamyi)
                bx = delx + GG.T @ (dellamyi / diaglamyi)
                bz = delz - a @ (dellamyi / diaglamyi)
                AA = np.block([[Axx, axz[:, None]], [axz[None, :], np.array([[azz]])]])
                sol = np.linalg.solve(AA, -np.concatenate([bx, [bz]]))
                dx = sol[:n]
                dz = sol[n]
                dlam = (GG @ dx) / diaglamyi - dz * (a / diaglamyi) + dellamyi / diaglamyi
            dy = -dely / diagy + dlam / diagy
            dxsi = -xsi + epsi / (x - alfa) - (xsi * dx) / (x - alfa)
            deta = -eta + epsi / (beta - x) + (eta * dx) / (beta - x)
            dmu = -mu + epsi / y - (mu * dy) / y
            dzet = -zet + epsi / z - zet * dz / z
            ds = -s + epsi / lam - (s * dlam) / lam
            xx = np.concatenate([y, [z], lam, xsi, eta, mu, [zet], s])
            dxx = np.concatenate([dy, [dz], dlam, dxsi, deta, dmu, [dzet], ds])
            stmxx = np.max(-1.01 * dxx / xx)
            stmalfa = np.max(-1.01 * dx / (x - alfa))
            stmbeta = np.max(1.01 * dx / (beta - x))
            steg = 1.0 / max(stmxx, stmalfa, stmbeta, 1.0)
            old = (x, y, z, lam, xsi, eta, mu, zet, s)
            itto = 0
            resinew = 2 * resnorm
            while resinew > resnorm and itto < 50:
                itto += 1
                x = old[0] + steg * dx
                y = old[1] + steg * dy
                z = old[2] + steg * dz
                lam = old[3] + steg * dlam
                xsi = old[4] + steg * dxsi
                eta = old[5] + steg * deta
                mu = old[6] + steg * dmu
                zet = old[7] + steg * dzet
                s = old[8] + steg * ds
                res = residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
                resinew = np.linalg.norm(res)
                steg /= 2
            resnorm = resinew
            resmax = np.max(np.abs(res))
        epsi *= 0.1
    return x, y, z, lam


def gcmma_step(st: GCMMAState, x, xmin, xmax, f0val, df0dx, fval, dfdx, evaluate):
    """One outer iteration.

    ``evaluate(x) -> (f0, f)`` gives function values only; it is called for
    each inner candidate.  Returns ``(xnew, f0new, fnew)``.
    """
    n, m = st.n, st.m
    fval = np.atleast_1d(np.asarray(fval, dtype=float))
    dfdx = np.atleast_2d(np.asarray(dfdx, dtype=float)).reshape(m, n)
    low, upp = _asymptotes(st, x, xmin, xmax)
    albefa = 0.1
    alfa = np.maximum.reduce([xmin, low + albefa * (x - low), x - st.move * (xmax - xmin)])
    beta = np.minimum.reduce([xmax, upp - albefa * (upp - x), x + st.move * (xmax - xmin)])
    span = xmax - xmin
    raa0 = max(st.raa0eps, 0.1 / n * np.sum(np.abs(df0dx) * span))
    raa = np.maximum(st.raaeps, 0.1 / n * (np.abs(dfdx) @ span))
    xnew = x
    f0new, fnew = f0val, fval
    for inner in range(st.max_inner + 1):
        p0, q0 = _approx_terms(df0dx, raa0, x, low, upp, xmin, xmax)
        PQ = [_approx_terms(dfdx[i], raa[i], x, low, upp, xmin, xmax) for i in range(m)]
        P = np.array([pq[0] for pq in PQ])
        Q = np.array([pq[1] for pq in PQ])
        b = P @ (1 / (upp - x)) + Q @ (1 / (x - low)) - fval
        xnew, _, _, _ = subsolv(m, n, 1e-7, low, upp, alfa, beta, p0, q0, P, Q, st.a0, st.a, b, st.c, st.d)
        f0new, fnew = evaluate(xnew)
        fnew = np.atleast_1d(fnew)
        f0app = _approx_value(f0val, p0, q0, x, xnew, low, upp)
        fapp = np.array([_approx_value(fval[i], P[i], Q[i], x, xnew, low, upp) for i in range(m)])
        # slack relative to the current values, so tiny objectives are still checked
        tol0 = 1e-7 * max(abs(f0val), 1e-3)
        tol = 1e-7 * np.maximum(np.abs(fval), 1e-3)
        conservative = f0app + tol0 >= f0new and np.all(fapp + tol >= fnew)
        descent = (st.accept_descent and f0new < f0val
                   and np.all(fnew <= np.maximum(fval, 0.0)))
        if conservative or descent or inner == st.max_inner:
            break
        dd = np.sum((upp - low) * (xnew - x) ** 2 / ((upp - xnew) * (xnew - low) * span))
        dd = max(dd, 1e-12)
        if f0new > f0app + tol0:
            raa0 = min(1.1 * (raa0 + (f0new - f0app) / dd), 10 * raa0)
        for i in range(m):
            if fnew[i] > fapp[i] + tol[i]:
                raa[i] = min(1.1 * (raa[i] + (fnew[i] - fapp[i]) / dd), 10 * raa[i])
    st.inner_counts.append(inner)
    st.xold2 = st.xold1 if st.xold1 is not None else x.copy()
    st.xold1 = x.copy()
    st.low, st.upp = low, upp
    st.iteration += 1
    return np.clip(xnew, xmin, xmax), f0new, fnew


def minimize(fun, x0, xmin, xmax, m=0, max_iter=100, tol=1e-8, **kw):
    """Small driver: ``fun(x, grad) -> (f0, df0, f, df)``; for tests and toys."""
    x = np.asarray(x0, dtype=float).copy()
    n = len(x)
    mm = max(m, 1)
    st = GCMMAState(n, mm, **kw)

    def full(x, grad):
        f0, df0, f, df = fun(x, grad)
        if m == 0:
            f, df = np.array([-1.0]), np.zeros((1, n))
        return f0, df0, np.atleast_1d(f), df

    f0, df0, f, df = full(x, True)
    for _ in range(max_iter):
        xn, f0n, fn = gcmma_step(st, x, xmin, xmax, f0, df0, f, df, lambda z: full(z, False)[::2])
        done = np.max(np.abs(xn - x)) < tol
        x = xn
        f0, df0, f, df = full(x, True)
        if done:
            break
    return x, f0, f
