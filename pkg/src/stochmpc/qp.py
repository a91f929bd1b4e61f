"""Dense convex QP solver: primal active-set with a phase-1 feasibility stage.

    minimize    1/2 x'Px + q'x + offset
    subject to  G x <= h,  Aeq x = beq,  lb <= x <= ub

Equality constraints are eliminated once per solve through an SVD null-space
basis. Phase 1 minimises the maximum inequality violation (a single slack)
starting from the trivially feasible point; a positive optimum certifies
infeasibility. Phase 2 is a textbook primal active-set method on the reduced
problem. A 1e-10 ridge keeps every KKT system nonsingular when P is only
semi-definite; the reported objective uses the unmodified P.

The numeric kernels are compiled with numba so the closed-loop simulator can
call them a few million times.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numba import njit

OPTIMAL = 0
INFEASIBLE = 1
MAX_ITER = 2

FEAS_TOL = 1e-8
RIDGE = 1e-10
DEFAULT_MAX_ITER = 100_000


class QpStatus(enum.Enum):
    OPTIMAL = OPTIMAL
    INFEASIBLE = INFEASIBLE
    MAX_ITER = MAX_ITER


@njit(cache=True)
def _kkt_step(H, A, W, nw, grad):
    r = H.shape[0]
    sz = r + nw
    M = np.zeros((sz, sz))
    rhs = np.zeros(sz)
    M[:r, :r] = H
    for j in range(nw):
        for c in range(r):
            M[c, r + j] = A[W[j], c]
            M[r + j, c] = A[W[j], c]
    for c in range(r):
        rhs[c] = -grad[c]
    sol = np.linalg.solve(M, rhs)
    return sol[:r].copy(), sol[r:].copy()


@njit(cache=True)
def _active_set(H, g, A, b, y0, skip, max_iter):
    """min 1/2 y'Hy + g'y  s.t.  A y <= b, from a feasible y0 (H positive definite).

    Returns (status, y, working set, multipliers, iterations).
    """
    m = A.shape[0]
    r = H.shape[0]
    y = y0.copy()
    W = np.empty(r + 1, np.int64)
    nw = 0
    active = np.zeros(m, np.bool_)
    mu = np.zeros(0)
    if r == 0:
        return OPTIMAL, y, W[:0].copy(), mu, 0
    rownorm = np.zeros(m)
    for i in range(m):
        rownorm[i] = np.sqrt(np.sum(A[i] * A[i]))
    gscale_base = 1.0 + np.max(np.abs(g))
    it = 0
    while it < max_iter:
        it += 1
        grad = H @ y + g
        p, mu = _kkt_step(H, A, W, nw, grad)
        Hp = H @ p
        gscale = max(gscale_base, 1.0 + np.max(np.abs(grad)))
        # a full working set leaves p at round-off level, which must not count as a move
        if np.max(np.abs(Hp)) <= 1e-13 * gscale or np.max(np.abs(p)) <= 1e-11 * (1.0 + np.max(np.abs(y))):
            # stationary on the current face: drop the most negative multiplier
            jmin = -1
            vmin = -1e-10 * gscale
            for j in range(nw):
                if mu[j] < vmin or (jmin >= 0 and mu[j] == vmin and W[j] < W[jmin]):
                    vmin = mu[j]
                    jmin = j
            if jmin < 0:
                return OPTIMAL, y, W[:nw].copy(), mu, it
            active[W[jmin]] = False
            for j in range(jmin, nw - 1):
                W[j] = W[j + 1]
            nw -= 1
            continue
        alpha = 1.0
        block = -1
        pn = np.max(np.abs(p))
        for i in range(m):
            if active[i] or skip[i]:
                continue
            ap = A[i] @ p
            if ap > 1e-12 * pn * rownorm[i]:
                slack = b[i] - A[i] @ y
                if slack < 0.0:
                    slack = 0.0
                t = slack / ap
                if t < alpha:
                    alpha = t
                    block = i
        y = y + alpha * p
        if block >= 0:
            active[block] = True
            W[nw] = block
            nw += 1
    return MAX_ITER, y, W[:nw].copy(), mu, it


@njit(cache=True)
def _solve_dense(P, q, G, h, Aeq, beq, max_iter, phase1_only):
    """Returns (status, x, ineq multipliers, eq multipliers, iterations, phase-1 violation)."""
    d = q.shape[0]
    me = Aeq.shape[0]
    mi = G.shape[0]
    lam = np.zeros(mi)
    nu = np.zeros(me)

    rank = 0
    xp = np.zeros(d)
    if me > 0:
        U, s, Vt = np.linalg.svd(Aeq)
        smax = s[0] if s.shape[0] > 0 else 0.0
        for i in range(s.shape[0]):
            if s[i] > 1e-12 * max(1.0, smax):
                rank += 1
        if rank > 0:
            coef = (np.ascontiguousarray(U[:, :rank].T) @ beq) / s[:rank]
            xp = np.ascontiguousarray(Vt[:rank].T) @ coef
        eq_res = np.max(np.abs(Aeq @ xp - beq))
        if eq_res > FEAS_TOL * (1.0 + np.max(np.abs(beq))):
            return INFEASIBLE, xp, lam, nu, 0, eq_res
        Z = np.ascontiguousarray(Vt[rank:].T)
    else:
        U = np.zeros((0, 0))
        s = np.zeros(0)
        Vt = np.zeros((0, d))
        Z = np.eye(d)
    r = d - rank

    Gr = G @ Z
    hr = h - G @ xp
    skip = np.zeros(mi, np.bool_)
    viol0 = 0.0
    for i in range(mi):
        if np.max(np.abs(Gr[i])) <= 1e-12 * max(1.0, np.max(np.abs(G[i]))):
            skip[i] = True
            if hr[i] < -FEAS_TOL:
                return INFEASIBLE, xp, lam, nu, 0, -hr[i]
        elif -hr[i] > viol0:
            viol0 = -hr[i]

    y = np.zeros(r)
    iters = 0
    if viol0 > FEAS_TOL:
        H1 = RIDGE * np.eye(r + 1)
        g1 = np.zeros(r + 1)
        g1[r] = 1.0
        A1 = np.zeros((mi + 1, r + 1))
        A1[:mi, :r] = Gr
        A1[:mi, r] = -1.0
        A1[mi, r] = -1.0
        b1 = np.zeros(mi + 1)
        b1[:mi] = hr
        skip1 = np.zeros(mi + 1, np.bool_)
        skip1[:mi] = skip
        y1 = np.zeros(r + 1)
        y1[r] = viol0
        st, y1, _, _, it1 = _active_set(H1, g1, A1, b1, y1, skip1, max_iter)
        iters += it1
        if st != OPTIMAL:
            return MAX_ITER, xp + Z @ y1[:r], lam, nu, iters, y1[r]
        y = y1[:r].copy()
    viol = 0.0
    if mi > 0:
        res = Gr @ y - hr
        for i in range(mi):
            if not skip[i] and res[i] > viol:
                viol = res[i]
    if viol > FEAS_TOL:
        return INFEASIBLE, xp + Z @ y, lam, nu, iters, viol
    if phase1_only:
        return OPTIMAL, xp + Z @ y, lam, nu, iters, viol

    ZT = np.ascontiguousarray(Z.T)
    Hr = ZT @ P @ Z
    Hr = 0.5 * (Hr + Hr.T)
    scale = 1.0
    for i in range(r):
        scale = max(scale, abs(Hr[i, i]))
    for i in range(r):
        Hr[i, i] += RIDGE * scale
    gr = ZT @ (P @ xp + q)
    st, y, W, mu, it2 = _active_set(Hr, gr, Gr, hr, y, skip, max_iter)
    iters += it2
    x = xp + Z @ y
    for j in range(W.shape[0]):
        lam[W[j]] = mu[j]
    if me > 0 and rank > 0:
        rvec = -(P @ x + q + np.ascontiguousarray(G.T) @ lam)
        nu = np.ascontiguousarray(U[:, :rank]) @ ((np.ascontiguousarray(Vt[:rank]) @ rvec) / s[:rank])
    return st, x, lam, nu, iters, viol


def _as2d(a, cols: int) -> np.ndarray:
    if a is None:
        return np.zeros((0, cols))
    return np.ascontiguousarray(np.atleast_2d(np.asarray(a, dtype=float)).reshape(-1, cols))


def _as1d(a, size: int | None = None, fill: float = 0.0) -> np.ndarray:
    if a is None:
        return np.full(size or 0, fill)
    return np.ascontiguousarray(np.atleast_1d(np.asarray(a, dtype=float)).ravel())


@dataclass(frozen=True)
class QuadraticProgram:
    P: np.ndarray
    qvec: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        qvec = _as1d(self.qvec)
        d = qvec.shape[0]
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.shape != (d, d):
            raise ValueError(f"P must be {d}x{d}, got {P.shape}")
        P = np.ascontiguousarray(0.5 * (P + P.T))
        if d and np.min(np.linalg.eigvalsh(P)) < -1e-9:
            raise ValueError("P must be positive semi-definite")
        G = _as2d(self.G, d)
        h = _as1d(self.h, 0)
        Aeq = _as2d(self.Aeq, d)
        beq = _as1d(self.beq, 0)
        lb = _as1d(self.lb, d, -np.inf)
        ub = _as1d(self.ub, d, np.inf)
        if G.shape[0] != h.shape[0]:
            raise ValueError("G and h row counts differ")
        if Aeq.shape[0] != beq.shape[0]:
            raise ValueError("Aeq and beq row counts differ")
        if lb.shape[0] != d or ub.shape[0] != d:
            raise ValueError("bounds must have one entry per variable")
        for name, val in (("P", P), ("qvec", qvec), ("G", G), ("h", h), ("Aeq", Aeq), ("beq", beq)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def dim(self) -> int:
        return self.qvec.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.qvec @ x + self.offset)

    def inequality_form(self) -> tuple[np.ndarray, np.ndarray]:
        """G and h with finite bounds appended as rows."""
        eye = np.eye(self.dim)
        up = np.isfinite(self.ub)
        lo = np.isfinite(self.lb)
        G = np.vstack([self.G, eye[up], -eye[lo]])
        h = np.concatenate([self.h, self.ub[up], -self.lb[lo]])
        return np.ascontiguousarray(G), np.ascontiguousarray(h)

    def violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        G, h = self.inequality_form()
        v = 0.0
        if G.shape[0]:
            v = max(v, float(np.max(G @ x - h)))
        if self.Aeq.shape[0]:
            v = max(v, float(np.max(np.abs(self.Aeq @ x - self.beq))))
        return max(v, 0.0)


@dataclass
class QpSolution:
    status: QpStatus
    x: np.ndarray
    objective: float
    max_primal_violation: float
    kkt_residual: float
    iterations: int = 0
    multipliers_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    multipliers_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def kkt_residual(qp: QuadraticProgram, x, lam_ineq, nu_eq) -> float:
    """Scaled stationarity residual ||Px + q + G'lam + Aeq'nu||_inf / (1 + ||q||_inf)."""
    G, _ = qp.inequality_form()
    r = qp.P @ x + qp.qvec
    if G.shape[0]:
        r = r + G.T @ lam_ineq
    if qp.Aeq.shape[0]:
        r = r + qp.Aeq.T @ nu_eq
    return float(np.max(np.abs(r), initial=0.0) / (1.0 + np.max(np.abs(qp.qvec), initial=0.0)))


def solve_qp(qp: QuadraticProgram, tol: float = 1e-6, max_iter: int = DEFAULT_MAX_ITER) -> QpSolution:
    """Solve ``qp``. Identical inputs always give bit-identical outputs.

    ``tol`` is the documented bound on the scaled KKT residual of an optimal
    solution; the residual itself is returned for callers that verify it.
    """
    G, h = qp.inequality_form()
    st, x, lam, nu, iters, viol = _solve_dense(
        qp.P, qp.qvec, G, h, qp.Aeq, qp.beq, max_iter, False
    )
    status = QpStatus(int(st))
    if status is QpStatus.INFEASIBLE:
        return QpSolution(status, x, np.inf, float(viol), np.inf, int(iters))
    res = kkt_residual(qp, x, lam, nu)
    return QpSolution(status, x, qp.objective(x), qp.violation(x), res, int(iters), lam, nu)


def phase1_violation(qp: QuadraticProgram, max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Minimum over x of the largest constraint violation (0 for feasible problems)."""
    G, h = qp.inequality_form()
    st, x, _, _, _, viol = _solve_dense(qp.P, qp.qvec, G, h, qp.Aeq, qp.beq, max_iter, True)
    if st == MAX_ITER:
        raise RuntimeError("phase-1 iteration cap reached")
    return float(viol)


def check_feasible(qp: QuadraticProgram, max_iter: int = DEFAULT_MAX_ITER) -> bool:
    return phase1_violation(qp, max_iter) <= FEAS_TOL
