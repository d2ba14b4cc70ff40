"""Dense solvers for small convex QPs.

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

Two methods are available. When ``P`` is positive definite the default is the
Goldfarb-Idnani dual active-set method, which is exact up to rounding and
detects infeasibility in finitely many steps. The second is an OSQP-style
operator splitting (ADMM): a regularised linear solve in ``x``, a projection of
``z = Ax`` onto the box ``[l, u]`` and a dual ascent step, with
over-relaxation, Ruiz equilibration, adaptive step size, an infeasibility
certificate and a final active-set polish. It handles semidefinite ``P`` and
serves as the fallback.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

SOLVED = "solved"
MAX_ITER = "max_iter"
INFEASIBLE = "primal_infeasible"
_STATUS = {0: MAX_ITER, 1: SOLVED, 2: INFEASIBLE}

_RHO_MIN = 1e-6
_RHO_MAX = 1e6
_RHO_EQ_SCALE = 1e3


@dataclass
class QpSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    eps_infeas: float = 1e-7
    max_iter: int = 4000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    check_every: int = 5
    scaling_iters: int = 10
    polish: bool = True
    polish_start: int = 25
    method: str = "auto"  # "auto" (active set when P is definite), "active_set" or "admm"


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    prim_res: float
    dual_res: float
    objective: float
    polished: bool = False


@njit(cache=True)
def _cholesky(P, A, rho, sigma):
    n = P.shape[0]
    K = P.copy()
    for i in range(n):
        K[i, i] += sigma
    m = A.shape[0]
    for r in range(m):
        for i in range(n):
            ari = A[r, i] * rho[r]
            if ari != 0.0:
                for j in range(n):
                    K[i, j] += ari * A[r, j]
    return np.linalg.cholesky(K)


@njit(cache=True)
def _chol_solve(L, b):
    n = b.shape[0]
    w = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * w[k]
        w[i] = s / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = w[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def _set_rho(l, u, rho_base):
    m = l.shape[0]
    rho = np.empty(m)
    for i in range(m):
        if l[i] == -np.inf and u[i] == np.inf:
            rho[i] = _RHO_MIN
        elif u[i] - l[i] < 1e-9:
            rho[i] = _RHO_EQ_SCALE * rho_base
        else:
            rho[i] = rho_base
    return rho


@njit(cache=True)
def _inf_norm(v):
    out = 0.0
    for i in range(v.shape[0]):
        a = abs(v[i])
        if a > out:
            out = a
    return out


@njit(cache=True)
def _admm(P, q, A, l, u, x, z, y, rho_base, sigma, alpha, eps_abs, eps_rel, eps_inf, max_iter, check_every):
    m = A.shape[0]
    rho = _set_rho(l, u, rho_base)
    L = _cholesky(P, A, rho, sigma)
    status = 0
    it = 0
    rp = np.inf
    rd = np.inf
    while it < max_iter:
        it += 1
        rhs = sigma * x - q + A.T @ (rho * z - y)
        xt = _chol_solve(L, rhs)
        zt = A @ xt
        x = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        zn = np.minimum(np.maximum(zr + y / rho, l), u)
        dy = rho * (zr - zn)
        y = y + dy
        z = zn
        if it % check_every != 0 and it != max_iter:
            continue
        Ax = A @ x
        Px = P @ x
        Aty = A.T @ y
        rp = _inf_norm(Ax - z)
        rd = _inf_norm(Px + q + Aty)
        nprim = max(_inf_norm(Ax), _inf_norm(z))
        ndual = max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(q))
        if rp <= eps_abs + eps_rel * nprim and rd <= eps_abs + eps_rel * ndual:
            status = 1
            break
        ndy = _inf_norm(dy)
        if ndy > 1e-12:
            cert = 0.0
            valid = True
            for i in range(m):
                if dy[i] > eps_inf * ndy:
                    if u[i] == np.inf:
                        valid = False
                        break
                    cert += u[i] * dy[i]
                elif dy[i] < -eps_inf * ndy:
                    if l[i] == -np.inf:
                        valid = False
                        break
                    cert += l[i] * dy[i]
            if valid and _inf_norm(A.T @ dy) <= eps_inf * ndy and cert <= -eps_inf * ndy:
                status = 2
                break
        if nprim > 0.0 and ndual > 0.0 and rd > 0.0:
            ratio = np.sqrt((rp / max(nprim, 1e-30)) / (rd / max(ndual, 1e-30)))
            if ratio > 5.0 or ratio < 0.2:
                rho_base = min(max(rho_base * ratio, _RHO_MIN), _RHO_MAX)
                rho = _set_rho(l, u, rho_base)
                L = _cholesky(P, A, rho, sigma)
    return x, z, y, status, it, rp, rd, rho_base


@njit(cache=True)
def _ruiz_kernel(P, q, A, iters):
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        dd = np.empty(n)
        for j in range(n):
            mx = 0.0
            for i in range(n):
                mx = max(mx, abs(Ps[i, j]))
            for i in range(m):
                mx = max(mx, abs(As[i, j]))
            dd[j] = 1.0 / np.sqrt(min(max(mx, 1e-4), 1e4))
        ee = np.empty(m)
        for i in range(m):
            mx = 0.0
            for j in range(n):
                mx = max(mx, abs(As[i, j]))
            ee[i] = 1.0 / np.sqrt(min(max(mx, 1e-4), 1e4))
        for i in range(n):
            for j in range(n):
                Ps[i, j] *= dd[i] * dd[j]
            qs[i] *= dd[i]
            D[i] *= dd[i]
        for i in range(m):
            for j in range(n):
                As[i, j] *= ee[i] * dd[j]
            E[i] *= ee[i]
    colmax = 0.0
    for j in range(n):
        mx = 0.0
        for i in range(n):
            mx = max(mx, abs(Ps[i, j]))
        colmax += mx
    gamma = colmax / max(n, 1)
    for i in range(n):
        gamma = max(gamma, abs(qs[i]))
    c = 1.0 / min(max(gamma, 1e-4), 1e4)
    return c * Ps, c * qs, As, D, E, c


def _ruiz(P, q, A, iters):
    """Equilibrate the KKT matrix; returns scaled data and ``(D, E, c)``."""
    return _ruiz_kernel(P, q, A, iters)


def _objective(P, q, x):
    return float(0.5 * x @ P @ x + q @ x)


def _residuals(P, q, A, l, u, x, y):
    Ax = A @ x
    viol = np.maximum(np.maximum(l - Ax, Ax - u), 0.0)
    rp = float(np.max(viol)) if viol.size else 0.0
    rd = float(np.max(np.abs(P @ x + q + A.T @ y))) if x.size else 0.0
    return rp, rd


def _polish(P, q, A, l, u, x, z, y, delta=1e-9):
    """Solve the equality-constrained KKT system on the guessed active set."""
    eq = u - l < 1e-9
    lower = (z - l < -y) | eq
    upper = (u - z < y) & ~lower
    idx = np.flatnonzero(lower | upper)
    n = P.shape[0]
    b = np.where(lower, l, u)[idx]
    Aa = A[idx]
    k = idx.size
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P
    K[:n, n:] = Aa.T
    K[n:, :n] = Aa
    Kreg = K.copy()
    Kreg[:n, :n] += delta * np.eye(n)
    Kreg[n:, n:] -= delta * np.eye(k)
    rhs = np.concatenate([-q, b])
    try:
        sol = np.linalg.solve(Kreg, rhs)
        for _ in range(3):
            r = rhs - K @ sol
            if np.max(np.abs(r)) <= 1e-13 * (1.0 + np.max(np.abs(rhs))):
                break
            sol = sol + np.linalg.solve(Kreg, r)
    except np.linalg.LinAlgError:
        return None
    xp = sol[:n]
    yp = np.zeros(A.shape[0])
    yp[idx] = sol[n:]
    if not np.all(np.isfinite(xp)):
        return None
    return xp, yp, lower & ~eq, upper


def _try_polish(P, q, A, l, u, x, z, y, strict, current=None):
    """Polish and accept when the result is a KKT point (strict) or no worse than ``current``."""
    out = _polish(P, q, A, l, u, x, z, y)
    if out is None:
        return None
    xp, yp, lower, upper = out
    rpp, rdp = _residuals(P, q, A, l, u, xp, yp)
    if not (np.all(yp[lower] <= 1e-9) and np.all(yp[upper] >= -1e-9)):
        return None
    fin = np.isfinite(l) | np.isfinite(u)
    bscale = float(np.max(np.abs(np.where(np.isfinite(l), l, 0.0)[fin]), initial=0.0))
    bscale = max(bscale, float(np.max(np.abs(np.where(np.isfinite(u), u, 0.0)[fin]), initial=0.0)))
    qscale = float(np.max(np.abs(q))) if q.size else 0.0
    tol_p = 1e-9 * (1.0 + bscale)
    tol_d = 1e-9 * (1.0 + qscale)
    if strict:
        ok = rpp <= tol_p and rdp <= tol_d
    else:
        rp, rd = current
        ok = rpp <= max(rp, tol_p) and rdp <= max(rd, tol_d)
    return (xp, yp, rpp, rdp) if ok else None


@njit(cache=True)
def _tri_lower(L, b):
    n = b.shape[0]
    w = np.empty(n)
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * w[k]
        w[i] = acc / L[i, i]
    return w


@njit(cache=True)
def _tri_upper_t(L, b):
    """Solve ``L' x = b`` for lower-triangular ``L``."""
    n = b.shape[0]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * x[k]
        x[i] = acc / L[i, i]
    return x


@njit(cache=True)
def _project(Q, R, k, b):
    """Coefficients ``r`` of ``b`` on the active columns and the orthogonal residual."""
    n = b.shape[0]
    coef = np.zeros(k)
    resid = b.copy()
    for _ in range(2):  # classical Gram-Schmidt with one re-orthogonalisation
        for j in range(k):
            c = 0.0
            for i in range(n):
                c += Q[i, j] * resid[i]
            coef[j] += c
            for i in range(n):
                resid[i] -= c * Q[i, j]
    r = np.empty(k)
    for i in range(k - 1, -1, -1):
        acc = coef[i]
        for j in range(i + 1, k):
            acc -= R[i, j] * r[j]
        r[i] = acc / R[i, i]
    return coef, resid, r


@njit(cache=True)
def _dual_active_set(C, d, Ct, L, x, max_iter, feas_tol):
    n = x.shape[0]
    mc = C.shape[0]
    Q = np.zeros((n, n))
    R = np.zeros((n, n))
    act = np.empty(n, dtype=np.int64)
    lam = np.zeros(n)
    is_act = np.zeros(mc, dtype=np.bool_)
    k = 0
    it = 0
    while True:
        p = -1
        worst = -feas_tol
        for j in range(mc):
            if is_act[j]:
                continue
            sj = -d[j]
            for i in range(n):
                sj += C[j, i] * x[i]
            if sj < worst:
                worst = sj
                p = j
        if p < 0:
            return x, act[:k].copy(), lam[:k].copy(), 1, it
        lam_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                return x, act[:k].copy(), lam[:k].copy(), 0, it
            coef, resid, r = _project(Q, R, k, Ct[:, p])
            curv = 0.0
            for i in range(n):
                curv += resid[i] * resid[i]
            t1 = np.inf
            kk = -1
            for j in range(k):
                if r[j] > 1e-12:
                    ratio = lam[j] / r[j]
                    if ratio < t1:
                        t1 = ratio
                        kk = j
            sp = -d[p]
            for i in range(n):
                sp += C[p, i] * x[i]
            t2 = -sp / curv if (curv > 1e-14 and k < n) else np.inf
            if t1 == np.inf and t2 == np.inf:
                return x, act[:k].copy(), lam[:k].copy(), 2, it
            t = min(t1, t2)
            if t2 < np.inf:
                step = _tri_upper_t(L, resid)
                for i in range(n):
                    x[i] += t * step[i]
            for j in range(k):
                lam[j] -= t * r[j]
            lam_p += t
            if t2 <= t1:
                nrm = np.sqrt(curv)
                for i in range(n):
                    Q[i, k] = resid[i] / nrm
                for j in range(k):
                    R[j, k] = coef[j]
                R[k, k] = nrm
                act[k] = p
                lam[k] = lam_p
                is_act[p] = True
                k += 1
                break
            # drop column kk and restore the triangular factor with Givens rotations
            is_act[act[kk]] = False
            for j in range(kk, k - 1):
                act[j] = act[j + 1]
                lam[j] = lam[j + 1]
                for i in range(k):
                    R[i, j] = R[i, j + 1]
            for i in range(k):
                R[i, k - 1] = 0.0
            k -= 1
            for j in range(kk, k):
                a_ = R[j, j]
                b_ = R[j + 1, j]
                h = np.hypot(a_, b_)
                if h == 0.0:
                    continue
                cs, sn = a_ / h, b_ / h
                for c in range(j, k):
                    r1, r2 = R[j, c], R[j + 1, c]
                    R[j, c] = cs * r1 + sn * r2
                    R[j + 1, c] = -sn * r1 + cs * r2
                for i in range(n):
                    q1, q2 = Q[i, j], Q[i, j + 1]
                    Q[i, j] = cs * q1 + sn * q2
                    Q[i, j + 1] = -sn * q1 + cs * q2
            for i in range(n):
                Q[i, k] = 0.0
            for c in range(n):
                R[k, c] = 0.0


def _active_set(P, q, A, l, u, L, max_iter, tol=1e-10):
    """Goldfarb-Idnani dual method on the one-sided rows ``C x >= d``.

    ``L`` is the Cholesky factor of ``P``. Returns ``(x, y, status, iterations)``
    with ``y`` in the sign convention of :func:`solve`.
    """
    n, m = q.size, A.shape[0]
    lo_rows = np.flatnonzero(np.isfinite(l))
    hi_rows = np.flatnonzero(np.isfinite(u))
    C = np.vstack([A[lo_rows], -A[hi_rows]])
    d = np.concatenate([l[lo_rows], -u[hi_rows]])
    src = np.concatenate([lo_rows, hi_rows])
    sign = np.concatenate([-np.ones(lo_rows.size), np.ones(hi_rows.size)])
    norms = np.linalg.norm(C, axis=1)
    keep = norms > 0.0
    # rows with a zero coefficient vector are either vacuous or infeasible
    if np.any(~keep & (d > tol)):
        return np.zeros(n), np.zeros(m), INFEASIBLE, 0
    C, d, src, sign, norms = C[keep], d[keep], src[keep], sign[keep], norms[keep]
    C = np.ascontiguousarray(C / norms[:, None])
    d = d / norms
    L = np.ascontiguousarray(L)
    Ct = np.ascontiguousarray(np.linalg.solve(L, C.T))  # L^{-1} C', one column per row
    x0 = -np.linalg.solve(L.T, np.linalg.solve(L, q))
    feas_tol = tol * (1.0 + float(np.max(np.abs(d), initial=0.0)))
    x, act, lam, code, it = _dual_active_set(C, d, Ct, L, x0, max_iter, feas_tol)
    y = np.zeros(m)
    np.add.at(y, src[act], sign[act] * lam / norms[act])
    return x, y, _STATUS[code], int(it)


def solve(P, q, A, l, u, settings: Optional[QpSettings] = None, warm: Optional[tuple] = None) -> QpResult:
    """Solve ``min 0.5 x'Px + q'x  s.t.  l <= Ax <= u`` (``A`` may have zero rows)."""
    s = settings or QpSettings()
    P = np.ascontiguousarray(P, dtype=float)
    q = np.ascontiguousarray(q, dtype=float)
    n = q.size
    A = np.ascontiguousarray(np.asarray(A, dtype=float).reshape(-1, n))
    l = np.ascontiguousarray(l, dtype=float).reshape(-1)
    u = np.ascontiguousarray(u, dtype=float).reshape(-1)
    m = A.shape[0]
    if m == 0:
        x = np.linalg.lstsq(P, -q, rcond=None)[0]
        rp, rd = _residuals(P, q, A, l, u, x, np.zeros(0))
        return QpResult(x=x, y=np.zeros(0), status=SOLVED, iterations=0, prim_res=rp, dual_res=rd,
                        objective=_objective(P, q, x))

    if s.method != "admm":
        try:
            L = np.linalg.cholesky(0.5 * (P + P.T))
        except np.linalg.LinAlgError:
            L = None
            if s.method == "active_set":
                raise ValueError("the active-set method needs a positive definite P")
        if L is not None:
            x, y, status, it = _active_set(P, q, A, l, u, L, max_iter=s.max_iter)
            rp, rd = _residuals(P, q, A, l, u, x, y)
            return QpResult(x=x, y=y, status=status, iterations=int(it), prim_res=rp, dual_res=rd,
                            objective=_objective(P, q, x))

    Ps, qs, As, D, E, c = _ruiz(P, q, A, s.scaling_iters)
    ls, us = E * l, E * u
    if warm is not None:
        x0, y0 = warm
        xs = np.asarray(x0, dtype=float) / D
        ys = np.asarray(y0, dtype=float) * c / E if y0 is not None else np.zeros(m)
    else:
        xs, ys = np.zeros(n), np.zeros(m)
    zs = np.clip(As @ xs, ls, us)
    As = np.ascontiguousarray(As)
    rho_base = s.rho
    done = 0
    chunk = s.polish_start if s.polish else s.max_iter
    code = 0
    polished = False
    while done < s.max_iter:
        budget = min(chunk, s.max_iter - done)
        xs, zs, ys, code, iters, _, _, rho_base = _admm(
            Ps, qs, As, ls, us, xs, zs, ys,
            rho_base, s.sigma, s.alpha, s.eps_abs, s.eps_rel, s.eps_infeas, budget, s.check_every,
        )
        done += iters
        if code != 0 or done >= s.max_iter:
            break
        # try to finish early: an exact KKT point on the guessed active set ends the iteration
        out = _try_polish(P, q, A, l, u, D * xs, zs / E, E * ys / c, strict=True)
        if out is not None:
            x, y, rp, rd = out
            return QpResult(x=x, y=y, status=SOLVED, iterations=int(done), prim_res=rp, dual_res=rd,
                            objective=_objective(P, q, x), polished=True)
        chunk *= 2
    iters = done
    x = D * xs
    y = E * ys / c
    z = zs / E
    status = _STATUS[code]
    rp, rd = _residuals(P, q, A, l, u, x, y)
    if s.polish and status != INFEASIBLE:
        out = _try_polish(P, q, A, l, u, x, z, y, strict=False, current=(rp, rd))
        if out is not None:
            x, y, rp, rd = out
            polished = True
            status = SOLVED
    return QpResult(x=x, y=y, status=status, iterations=int(iters), prim_res=rp, dual_res=rd,
                    objective=_objective(P, q, x), polished=polished)
