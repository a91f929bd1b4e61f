"""Per-step SMPC problem with an interpolated initial nominal state.

Decision vector layout (``theta``)::

    [ z_0 .. z_N | v_0 .. v_{N-1} | lam ]      sizes n(N+1), mN, 1

Equalities: z_0 - lam (x - z_prev) = z_prev, nominal dynamics, terminal
equality rows. Inequalities: tightened stage constraints, terminal half-spaces,
0 <= lam <= 1. The objective is the expected cost conditioned on the measured
state, written in terms of the mean trajectory xbar, ubar and expanded as an
affine function of theta; the trace terms are added back by
``expected_cost_constant``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit

from . import qp as qpmod
from .model import (
    ChanceConstraintSpec,
    LtiSystem,
    Polytope,
    QuadraticStageCost,
    TerminalIngredients,
    check_terminal_admissibility,
    terminal_cost_from_lyapunov,
    validate_closed_loop_stability,
)
from .prs import PrsSpec, TightenedConstraints, VarianceSequence, propagate_variance, tighten


class ControllerVariant(enum.Enum):
    PROPOSED = "proposed"
    CASE_MIN = "case-min"
    CASE_RESET = "case-reset"
    INDIRECT = "indirect"
    NOMINAL = "nominal"
    FIXED_GAIN = "fixed-gain"
    LQR = "lqr"

    @property
    def code(self) -> int:
        return _VARIANT_CODES[self]

    @property
    def uses_qp(self) -> bool:
        return self not in (ControllerVariant.FIXED_GAIN, ControllerVariant.LQR)


_VARIANT_CODES = {v: i for i, v in enumerate(ControllerVariant)}
V_PROPOSED, V_CASE_MIN, V_CASE_RESET, V_INDIRECT, V_NOMINAL, V_FIXED, V_LQR = range(7)

STEP_OK = 0
STEP_INFEASIBLE = 1
STEP_MAX_ITER = 2


class SmpcError(RuntimeError):
    """Base class for closed-loop failures."""


class InfeasibleStartError(SmpcError):
    pass


class InvariantViolation(SmpcError):
    pass


class SolverError(SmpcError):
    pass


class TerminalKind(enum.Enum):
    ORIGIN = "origin"
    HALFSPACE_FROM_TIGHTENING = "halfspace-from-tightening"


@dataclass(frozen=True)
class SmpcConfig:
    sys: LtiSystem
    cost: QuadraticStageCost
    chance: ChanceConstraintSpec
    K: np.ndarray
    term: TerminalIngredients
    N: int
    tightened: TightenedConstraints
    prs: PrsSpec
    variances: VarianceSequence
    lambda_penalty: float = 0.0
    variant: ControllerVariant = ControllerVariant.PROPOSED
    gain: np.ndarray | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")
        if self.lambda_penalty < 0:
            raise ValueError("lambda_penalty must be non-negative")
        object.__setattr__(self, "variant", ControllerVariant(self.variant))
        if not self.variant.uses_qp and self.gain is None:
            raise ValueError(f"variant {self.variant.value} needs a feedback gain")

    @property
    def n(self) -> int:
        return self.sys.n

    @property
    def m(self) -> int:
        return self.sys.m

    @property
    def dim(self) -> int:
        return self.n * (self.N + 1) + self.m * self.N + 1

    def z_index(self, i: int) -> slice:
        return slice(i * self.n, (i + 1) * self.n)

    def v_index(self, i: int) -> slice:
        base = self.n * (self.N + 1)
        return slice(base + i * self.m, base + (i + 1) * self.m)

    @property
    def lam_index(self) -> int:
        return self.dim - 1

    @cached_property
    def template(self) -> tuple:
        return _build_template(self)

    @cached_property
    def trace_constant(self) -> float:
        return expected_cost_constant(self)


def make_config(
    sys: LtiSystem,
    cost: QuadraticStageCost,
    chance: ChanceConstraintSpec,
    K,
    N: int,
    prs: PrsSpec = PrsSpec(),
    terminal: TerminalKind | str = TerminalKind.ORIGIN,
    Kf=None,
    variant: ControllerVariant | str = ControllerVariant.PROPOSED,
    lambda_penalty: float = 0.0,
    K_lqr=None,
) -> SmpcConfig:
    """Assemble variances, tightening and terminal ingredients for one controller.

    The nominal-MPC variant runs the same machinery with K = 0. When that makes
    A + BK non-Schur the terminal weights fall back to the ones of the given
    tube gain.
    """
    variant = ControllerVariant(variant)
    terminal = TerminalKind(terminal)
    K_tube = np.atleast_2d(np.asarray(K, dtype=float))
    K_eff = np.zeros_like(K_tube) if variant is ControllerVariant.NOMINAL else K_tube
    Kf = K_tube if Kf is None else np.atleast_2d(np.asarray(Kf, dtype=float))

    AK = sys.closed_loop(K_eff)
    schur = validate_closed_loop_stability(sys, K_eff) < 1.0
    variances = propagate_variance(AK, sys.sigma_w, N, stationary=schur)
    if schur and not prs.stationary:
        variances = propagate_variance(AK, sys.sigma_w, max(N, variances.converged_at), stationary=True)
    tightened = tighten(chance, K_eff, variances, prs)

    if schur:
        Pf, pf = terminal_cost_from_lyapunov(sys, K_eff, cost)
    else:
        Pf, pf = terminal_cost_from_lyapunov(sys, K_tube, cost)

    zbar = tightened.limit
    if terminal is TerminalKind.ORIGIN:
        Xf = Polytope.singleton(np.zeros(sys.n))
    else:
        Hz = zbar.H[:, : sys.n] + zbar.H[:, sys.n :] @ Kf
        keep = np.any(Hz != 0.0, axis=1)
        if np.any(zbar.h[~keep] < 0):
            raise ValueError("tightened set excludes (z, Kf z) for every z")
        Xf = Polytope(Hz[keep], zbar.h[keep])
    term = TerminalIngredients(Xf=Xf, Kf=Kf, Pf=Pf, pf=pf, K=K_eff)
    report = check_terminal_admissibility(sys, term, zbar)
    if not report:
        raise ValueError("terminal ingredients not admissible: " + "; ".join(report.failures))

    gain = None
    if variant is ControllerVariant.FIXED_GAIN:
        gain = K_tube
    elif variant is ControllerVariant.LQR:
        if K_lqr is None:
            raise ValueError("LQR variant needs K_lqr")
        gain = np.atleast_2d(np.asarray(K_lqr, dtype=float))
    return SmpcConfig(
        sys=sys,
        cost=cost,
        chance=chance,
        K=K_eff,
        term=term,
        N=N,
        tightened=tightened,
        prs=prs,
        variances=variances,
        lambda_penalty=lambda_penalty,
        variant=variant,
        gain=gain,
    )


def _build_template(cfg: SmpcConfig) -> tuple:
    A, B, K = cfg.sys.A, cfg.sys.B, np.asarray(cfg.K)
    n, m, N, d = cfg.n, cfg.m, cfg.N, cfg.dim
    c = cfg.cost
    Pf, pf = cfg.term.Pf, cfg.term.pf

    Ez = [np.eye(d)[cfg.z_index(i)] for i in range(N + 1)]
    Ev = [np.eye(d)[cfg.v_index(i)] for i in range(N)]

    # xbar_i = Mx[i] theta + Nx[i] x,  ubar_i = Mu[i] theta + Nu[i] x
    Mx, Nx = [np.zeros((n, d))], [np.eye(n)]
    Mu, Nu = [], []
    for i in range(N):
        Mu.append(Ev[i] + K @ (Mx[i] - Ez[i]))
        Nu.append(K @ Nx[i])
        Mx.append(A @ Mx[i] + B @ Mu[i])
        Nx.append(A @ Nx[i] + B @ Nu[i])

    P = np.zeros((d, d))
    q0 = np.zeros(d)
    L = np.zeros((d, n))
    S = np.zeros((n, n))
    s = np.zeros(n)
    for i in range(N):
        P += 2 * (Mx[i].T @ c.Q @ Mx[i] + Mu[i].T @ c.R @ Mu[i])
        q0 += Mx[i].T @ c.q + Mu[i].T @ c.r
        L += 2 * (Mx[i].T @ c.Q @ Nx[i] + Mu[i].T @ c.R @ Nu[i])
        S += Nx[i].T @ c.Q @ Nx[i] + Nu[i].T @ c.R @ Nu[i]
        s += Nx[i].T @ c.q + Nu[i].T @ c.r
    P += 2 * Mx[N].T @ Pf @ Mx[N]
    q0 += Mx[N].T @ pf
    L += 2 * Mx[N].T @ Pf @ Nx[N]
    S += Nx[N].T @ Pf @ Nx[N]
    s += Nx[N].T @ pf
    P[d - 1, d - 1] += 2 * cfg.lambda_penalty
    P = 0.5 * (P + P.T)

    Xf = cfg.term.Xf
    n_teq = Xf.Heq.shape[0]
    Aeq = np.zeros((n + N * n + n_teq + 1, d))
    beq = np.zeros(Aeq.shape[0])
    Aeq[:n] = Ez[0]
    for i in range(N):
        rows = slice(n + i * n, n + (i + 1) * n)
        Aeq[rows] = Ez[i + 1] - A @ Ez[i] - B @ Ev[i]
    r0 = n + N * n
    Aeq[r0 : r0 + n_teq] = Xf.Heq @ Ez[N]
    beq[r0 : r0 + n_teq] = Xf.heq
    Aeq[-1, d - 1] = 1.0  # pin row, used only by fixed-lambda variants

    Z = cfg.tightened.base
    Hx, Hu = Z.H[:, :n], Z.H[:, n:]
    nH = Z.H.shape[0]
    nF = Xf.H.shape[0]
    G = np.zeros((N * nH + nF + 2, d))
    for i in range(N):
        G[i * nH : (i + 1) * nH] = Hx @ Ez[i] + Hu @ Ev[i]
    G[N * nH : N * nH + nF] = Xf.H @ Ez[N]
    G[-2, d - 1] = 1.0
    G[-1, d - 1] = -1.0
    h_table = np.stack([cfg.tightened.offsets(k) for k in range(cfg.tightened.horizon)])
    h_lim = cfg.tightened.offsets(10**9)

    arrs = [P, q0, L, S, s, Aeq, beq, G, h_table, h_lim, np.asarray(Xf.h, dtype=float)]
    arrs = [np.ascontiguousarray(a, dtype=float) for a in arrs]
    return (*arrs, n, m, N, nH, n_teq)


@njit(cache=True)
def _build(tmpl, x, z_prev, k, pin):
    P, q0, L, S, s, Aeq0, beq0, G, h_table, h_lim, hf, n, m, N, nH, n_teq = tmpl
    d = q0.shape[0]
    q = q0 + L @ x
    offset = x @ (S @ x) + s @ x
    me = n + N * n + n_teq
    if pin >= 0.0:
        me += 1
    Aeq = Aeq0[: me].copy()
    beq = beq0[: me].copy()
    for j in range(n):
        Aeq[j, d - 1] = -(x[j] - z_prev[j])
        beq[j] = z_prev[j]
    if pin >= 0.0:
        Aeq[me - 1] = Aeq0[Aeq0.shape[0] - 1]
        beq[me - 1] = pin
    h = np.empty(G.shape[0])
    kt = h_table.shape[0]
    for i in range(N):
        idx = k + i
        for r in range(nH):
            h[i * nH + r] = h_table[idx, r] if idx < kt else h_lim[r]
    nF = hf.shape[0]
    for r in range(nF):
        h[N * nH + r] = hf[r]
    h[N * nH + nF] = 1.0
    h[N * nH + nF + 1] = 0.0
    return P, q, G, h, Aeq, beq, offset


@njit(cache=True)
def _solve_pinned(tmpl, x, z_prev, k, pin, max_iter):
    P, q, G, h, Aeq, beq, offset = _build(tmpl, x, z_prev, k, pin)
    st, th, lam, nu, it, viol = qpmod._solve_dense(P, q, G, h, Aeq, beq, max_iter, False)
    obj = 0.5 * th @ (P @ th) + q @ th + offset
    return st, th, obj


@njit(cache=True)
def _feasible_pinned(tmpl, x, z_prev, k, pin, max_iter):
    P, q, G, h, Aeq, beq, offset = _build(tmpl, x, z_prev, k, pin)
    st, th, lam, nu, it, viol = qpmod._solve_dense(P, q, G, h, Aeq, beq, max_iter, True)
    return st


@njit(cache=True)
def _step(tmpl, variant, x, z_prev, k, max_iter):
    """One controller step for the QP variants: (status, theta, objective)."""
    if variant == V_INDIRECT:
        return _solve_pinned(tmpl, x, z_prev, k, 0.0, max_iter)
    if variant == V_CASE_MIN:
        st0, th0, obj0 = _solve_pinned(tmpl, x, z_prev, k, 0.0, max_iter)
        st1, th1, obj1 = _solve_pinned(tmpl, x, z_prev, k, 1.0, max_iter)
        if st1 == STEP_OK and (st0 != STEP_OK or obj1 < obj0):
            return st1, th1, obj1
        if st0 == STEP_OK or st1 != STEP_MAX_ITER:
            return st0, th0, obj0
        return st1, th1, obj1
    if variant == V_CASE_RESET:
        st1 = _feasible_pinned(tmpl, x, z_prev, k, 1.0, max_iter)
        if st1 == STEP_MAX_ITER:
            return st1, np.zeros(tmpl[1].shape[0]), np.inf
        return _solve_pinned(tmpl, x, z_prev, k, 1.0 if st1 == STEP_OK else 0.0, max_iter)
    return _solve_pinned(tmpl, x, z_prev, k, -1.0, max_iter)


@njit(cache=True)
def _rollout(tmpl, variant, A, B, K, gain, Q, qc, R, rc, Hz, hz, x0, W, max_iter):
    T = W.shape[0]
    n = A.shape[0]
    m = B.shape[1]
    d = tmpl[1].shape[0]
    zoff = n  # z_1 starts right after z_0
    voff = n * (tmpl[13] + 1)
    xs = np.empty((T + 1, n))
    us = np.empty((T, m))
    z0s = np.full((T, n), np.nan)
    lams = np.full(T, np.nan)
    objs = np.full(T, np.nan)
    costs = np.empty(T)
    sat = np.empty(T, np.bool_)
    x = x0.copy()
    z_prev = x0.copy()
    for k in range(T):
        xs[k] = x
        if variant == V_FIXED or variant == V_LQR:
            u = gain @ x
        else:
            st, th, obj = _step(tmpl, variant, x, z_prev, k, max_iter)
            if st != STEP_OK:
                return xs, us, z0s, lams, objs, costs, sat, st, k
            z0 = th[:n].copy()
            u = th[voff : voff + m] + K @ (x - z0)
            z0s[k] = z0
            lams[k] = min(max(th[d - 1], 0.0), 1.0)
            objs[k] = obj
            z_prev = th[zoff : zoff + n].copy()
        us[k] = u
        costs[k] = x @ (Q @ x) + qc @ x + u @ (R @ u) + rc @ u
        w = np.concatenate((x, u))
        sat[k] = np.all(Hz @ w <= hz)
        x = A @ x + B @ u + W[k]
    xs[T] = x
    return xs, us, z0s, lams, objs, costs, sat, STEP_OK, -1


@dataclass
class MpcStepResult:
    v_star: np.ndarray  # (m, N)
    z_star: np.ndarray  # (n, N + 1)
    lambda_star: float
    J_star: float
    u_applied: np.ndarray
    feasible: bool
    theta: np.ndarray | None = None

    @property
    def z_next(self) -> np.ndarray:
        """z*_{1|k}, the z_prev handed to the next step."""
        return self.z_star[:, 1]


def _vec(x, size: int) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if x.shape[0] != size:
        raise ValueError(f"expected a vector of length {size}, got {x.shape[0]}")
    return np.ascontiguousarray(x)


def build_step_qp(cfg: SmpcConfig, x, z_prev, k: int, pin: float | None = None) -> qpmod.QuadraticProgram:
    """The step problem as a standalone QP; ``pin`` fixes lambda via an extra equality row."""
    x = _vec(x, cfg.n)
    z_prev = _vec(z_prev, cfg.n)
    P, q, G, h, Aeq, beq, offset = _build(cfg.template, x, z_prev, int(k), -1.0 if pin is None else float(pin))
    return qpmod.QuadraticProgram(P, q, G=G, h=h, Aeq=Aeq, beq=beq, offset=float(offset))


def expected_cost_constant(cfg: SmpcConfig) -> float:
    """sum_{i<N} tr((Q + K'RK) Sigma_i) + tr(Pf Sigma_N), Sigma from the error recursion."""
    K = np.asarray(cfg.K)
    QK = cfg.cost.Q + K.T @ cfg.cost.R @ K
    sig = cfg.variances.sigmas
    if sig.shape[0] < cfg.N + 1:
        sig = propagate_variance(cfg.sys.closed_loop(K), cfg.sys.sigma_w, cfg.N, stationary=False).sigmas
    total = sum(np.trace(QK @ sig[i]) for i in range(cfg.N))
    return float(total + np.trace(cfg.term.Pf @ sig[cfg.N]))


def _unpack(cfg: SmpcConfig, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    n, m, N = cfg.n, cfg.m, cfg.N
    z = theta[: n * (N + 1)].reshape(N + 1, n).T.copy()
    v = theta[n * (N + 1) : n * (N + 1) + m * N].reshape(N, m).T.copy()
    return z, v, float(theta[-1])


def solve_step(cfg: SmpcConfig, x, z_prev, k: int, max_iter: int = qpmod.DEFAULT_MAX_ITER) -> MpcStepResult:
    """Solve the step problem for ``cfg.variant`` and return the applied input.

    Gain variants skip optimisation: u = gain x, and J_star is the stage cost.
    An infeasible problem yields ``feasible=False``; callers decide whether
    that is a start-up error or an invariant violation.
    """
    x = _vec(x, cfg.n)
    z_prev = _vec(z_prev, cfg.n)
    if not cfg.variant.uses_qp:
        u = cfg.gain @ x
        nan_z = np.full((cfg.n, cfg.N + 1), np.nan)
        nan_v = np.full((cfg.m, cfg.N), np.nan)
        return MpcStepResult(nan_v, nan_z, float("nan"), cfg.cost(x, u), u, True)
    st, theta, obj = _step(cfg.template, cfg.variant.code, x, z_prev, int(k), max_iter)
    if st == STEP_MAX_ITER:
        raise SolverError(f"QP iteration cap reached at k={k}")
    z, v, lam = _unpack(cfg, theta)
    feasible = st == STEP_OK
    u = v[:, 0] + np.asarray(cfg.K) @ (x - z[:, 0])
    J = float(obj) + cfg.trace_constant if feasible else float("inf")
    return MpcStepResult(v, z, lam, J, u, feasible, theta)


def check_step_invariants(res: MpcStepResult, cfg: SmpcConfig, x, z_prev, k: int, tol: float = 1e-7) -> list[str]:
    """Return a description of every violated step invariant (empty when all hold)."""
    x = _vec(x, cfg.n)
    z_prev = _vec(z_prev, cfg.n)
    out = []
    if not res.feasible:
        return ["step problem infeasible"]
    z, v, lam = res.z_star, res.v_star, res.lambda_star
    A, B, K = cfg.sys.A, cfg.sys.B, np.asarray(cfg.K)
    if not -tol <= lam <= 1 + tol:
        out.append(f"lambda {lam} outside [0, 1]")
    if np.max(np.abs(z[:, 0] - ((1 - lam) * z_prev + lam * x))) > tol:
        out.append("initial-state interpolation violated")
    for i in range(cfg.N):
        if np.max(np.abs(z[:, i + 1] - A @ z[:, i] - B @ v[:, i])) > tol:
            out.append(f"nominal dynamics violated at i={i}")
        if not cfg.tightened.set_at(k + i).contains(np.concatenate([z[:, i], v[:, i]]), tol):
            out.append(f"tightened constraint violated at i={i}")
    if not cfg.term.Xf.contains(z[:, cfg.N], tol):
        out.append("terminal constraint violated")
    if np.max(np.abs(res.u_applied - (v[:, 0] + K @ (x - z[:, 0])))) > tol:
        out.append("applied input does not match the tube law")
    return out


@dataclass
class Candidate:
    z: np.ndarray  # (n, N + 1)
    v: np.ndarray  # (m, N)
    lam: float = 0.0

    def theta(self) -> np.ndarray:
        return np.concatenate([self.z.T.ravel(), self.v.T.ravel(), [self.lam]])


def shifted_candidate(prev: MpcStepResult, cfg: SmpcConfig, k: int | None = None) -> Candidate:
    """Disturbance-independent feasible guess for the next step.

    lam = 0, inputs shifted by one, the last input from the terminal gain,
    and nominal states rolled forward from z*_{1|k}. ``k`` is accepted for
    symmetry with the other step functions; the candidate does not depend on it.
    """
    if not prev.feasible:
        raise ValueError("previous step was infeasible")
    A, B, Kf = cfg.sys.A, cfg.sys.B, cfg.term.Kf
    N = cfg.N
    v = np.empty((cfg.m, N))
    z = np.empty((cfg.n, N + 1))
    z[:, 0] = prev.z_star[:, 1]
    for i in range(N):
        v[:, i] = prev.v_star[:, i + 1] if i < N - 1 else Kf @ z[:, i]
        z[:, i + 1] = A @ z[:, i] + B @ v[:, i]
    return Candidate(z, v, 0.0)
