"""Plant, cost, constraint and terminal-ingredient data types.

All containers are frozen dataclasses holding read-only float arrays, so a
single configuration can be shared between concurrent rollouts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

LYAPUNOV_TOL = 1e-12
LYAPUNOV_MAX_ITER = 10**6


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if ndim == 2:
        arr = np.atleast_2d(arr)
    elif ndim == 1:
        arr = np.atleast_1d(arr).ravel()
    if arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: entries must be finite")
    arr.setflags(write=False)
    return arr


class DisturbanceLaw(enum.Enum):
    GAUSSIAN = "gaussian"
    UNIFORM_BOX = "uniform"


@dataclass(frozen=True)
class LtiSystem:
    """x(k+1) = A x(k) + B u(k) + w(k) with i.i.d. zero-mean w of covariance sigma_w."""

    A: np.ndarray
    B: np.ndarray
    sigma_w: np.ndarray
    disturbance: DisturbanceLaw = DisturbanceLaw.GAUSSIAN

    def __post_init__(self):
        A = _frozen(self.A, 2, "A")
        B = _frozen(self.B, 2, "B")
        S = _frozen(self.sigma_w, 2, "sigma_w")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {B.shape}")
        if S.shape != (n, n):
            raise ValueError(f"sigma_w must be {n}x{n}, got {S.shape}")
        if not np.allclose(S, S.T, atol=1e-12):
            raise ValueError("sigma_w must be symmetric")
        if np.min(np.linalg.eigvalsh(S)) <= 0:
            raise ValueError("sigma_w must be positive definite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "sigma_w", S)
        object.__setattr__(self, "disturbance", DisturbanceLaw(self.disturbance))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def closed_loop(self, K) -> np.ndarray:
        K = np.atleast_2d(np.asarray(K, dtype=float))
        if K.shape != (self.m, self.n):
            raise ValueError(f"gain must be {self.m}x{self.n}, got {K.shape}")
        return self.A + self.B @ K


@dataclass(frozen=True)
class QuadraticStageCost:
    """l(x, u) = x'Qx + q'x + u'Ru + r'u."""

    Q: np.ndarray
    q: np.ndarray
    R: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        Q = _frozen(self.Q, 2, "Q")
        R = _frozen(self.R, 2, "R")
        q = _frozen(self.q, 1, "q")
        r = _frozen(self.r, 1, "r")
        for name, M in (("Q", Q), ("R", R)):
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} must be square symmetric")
            if np.min(np.linalg.eigvalsh(M)) < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")
        if q.shape[0] != Q.shape[0] or r.shape[0] != R.shape[0]:
            raise ValueError("linear cost terms do not match Q/R dimensions")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    def __call__(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(x @ self.Q @ x + self.q @ x + u @ self.R @ u + self.r @ u)


@dataclass(frozen=True)
class Polytope:
    """{w : H w <= h, Heq w = heq}.

    Joint state/input sets use w = (x, u); terminal sets live in state space.
    A singleton such as {0} is stored through the equality rows.
    """

    H: np.ndarray
    h: np.ndarray
    Heq: np.ndarray | None = None
    heq: np.ndarray | None = None

    def __post_init__(self):
        H = _frozen(self.H, 2, "H")
        h = _frozen(self.h, 1, "h")
        if H.shape[0] != h.shape[0]:
            raise ValueError(f"H has {H.shape[0]} rows but h has {h.shape[0]} entries")
        dim = H.shape[1]
        if self.Heq is None:
            Heq = np.zeros((0, dim))
            Heq.setflags(write=False)
            heq = np.zeros(0)
            heq.setflags(write=False)
        else:
            Heq = _frozen(self.Heq, 2, "Heq")
            heq = _frozen(self.heq, 1, "heq")
            if Heq.shape[1] != dim or Heq.shape[0] != heq.shape[0]:
                raise ValueError("equality rows inconsistent with H")
        if H.shape[0] + Heq.shape[0] < 1:
            raise ValueError("polytope needs at least one row")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "Heq", Heq)
        object.__setattr__(self, "heq", heq)

    @classmethod
    def singleton(cls, point) -> "Polytope":
        point = np.atleast_1d(np.asarray(point, dtype=float))
        dim = point.shape[0]
        return cls(np.zeros((0, dim)), np.zeros(0), np.eye(dim), point)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def is_singleton(self) -> bool:
        return self.Heq.shape[0] > 0 and np.linalg.matrix_rank(self.Heq) == self.dim

    def contains(self, w, tol: float = 0.0) -> bool:
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if self.H.shape[0] and np.any(self.H @ w > self.h + tol):
            return False
        if self.Heq.shape[0] and np.any(np.abs(self.Heq @ w - self.heq) > tol):
            return False
        return True

    def contains_origin(self) -> bool:
        return bool(np.all(self.h >= 0) and np.all(self.heq == 0))


class Allocation(enum.Enum):
    JOINT = "joint"
    PER_ROW = "per-row"


@dataclass(frozen=True)
class ChanceConstraintSpec:
    """P((x, u) in set) >= level, with an optional per-row risk allocation."""

    set: Polytope
    level: float
    allocation: Allocation = Allocation.JOINT
    row_levels: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"probability level must lie in (0, 1), got {self.level}")
        alloc = Allocation(self.allocation)
        object.__setattr__(self, "allocation", alloc)
        if alloc is Allocation.PER_ROW:
            if self.row_levels is None or len(self.row_levels) != self.set.H.shape[0]:
                raise ValueError("per-row allocation needs one level per constraint row")
            if any(not 0.0 < p < 1.0 for p in self.row_levels):
                raise ValueError("every row level must lie in (0, 1)")
            object.__setattr__(self, "row_levels", tuple(float(p) for p in self.row_levels))

    def levels(self) -> np.ndarray:
        if self.allocation is Allocation.PER_ROW:
            return np.array(self.row_levels)
        return np.full(self.set.H.shape[0], self.level)


@dataclass(frozen=True)
class TerminalIngredients:
    Xf: Polytope
    Kf: np.ndarray
    Pf: np.ndarray
    pf: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        for name, nd in (("Kf", 2), ("Pf", 2), ("pf", 1), ("K", 2)):
            object.__setattr__(self, name, _frozen(getattr(self, name), nd, name))


def validate_closed_loop_stability(sys: LtiSystem, K) -> float:
    """Spectral radius of A + BK. Values >= 1 mean the gain does not stabilise."""
    return float(np.max(np.abs(np.linalg.eigvals(sys.closed_loop(K)))))


def _fixed_point(step, x0, what: str):
    x = x0
    for _ in range(LYAPUNOV_MAX_ITER):
        x_next = step(x)
        if np.max(np.abs(x_next - x), initial=0.0) <= LYAPUNOV_TOL:
            return x_next
        x = x_next
    raise RuntimeError(f"{what} did not converge within {LYAPUNOV_MAX_ITER} iterations")


def terminal_cost_from_lyapunov(sys: LtiSystem, K, cost: QuadraticStageCost):
    """Terminal weights with V_f(A_K x) = V_f(x) - l(x, Kx).

    Solves A_K' Pf A_K + Q + K'RK = Pf and A_K' pf + q + K'r = pf by iterating
    the recursions until successive iterates differ by at most 1e-12.

    Returns:
        (Pf, pf) as a symmetric matrix and a vector.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    AK = sys.closed_loop(K)
    rho = validate_closed_loop_stability(sys, K)
    if rho >= 1.0:
        raise ValueError(f"A+BK is not Schur (spectral radius {rho:.6g})")
    QK = cost.Q + K.T @ cost.R @ K
    qK = cost.q + K.T @ cost.r
    Pf = _fixed_point(lambda P: AK.T @ P @ AK + QK, np.zeros_like(QK), "quadratic Lyapunov recursion")
    Pf = 0.5 * (Pf + Pf.T)
    pf = _fixed_point(lambda p: AK.T @ p + qK, np.zeros_like(qK), "linear Lyapunov recursion")
    return Pf, pf


def lyapunov_residuals(sys: LtiSystem, K, cost: QuadraticStageCost, Pf, pf) -> tuple[float, float]:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    AK = sys.closed_loop(K)
    quad = AK.T @ Pf @ AK + cost.Q + K.T @ cost.R @ K - Pf
    lin = AK.T @ pf + cost.q + K.T @ cost.r - pf
    return float(np.max(np.abs(quad))), float(np.max(np.abs(lin)))


@dataclass
class AdmissibilityReport:
    ok: bool
    failures: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def _support(direction: np.ndarray, X: Polytope) -> float:
    """max direction' z over z in X; raises if unbounded."""
    res = linprog(
        -direction,
        A_ub=X.H if X.H.shape[0] else None,
        b_ub=X.h if X.H.shape[0] else None,
        A_eq=X.Heq if X.Heq.shape[0] else None,
        b_eq=X.heq if X.Heq.shape[0] else None,
        bounds=[(None, None)] * X.dim,
        method="highs",
    )
    if res.status == 3:
        raise ValueError(f"terminal set is unbounded along {direction}; cannot verify row-wise")
    if res.status != 0:
        raise RuntimeError(f"support function LP failed: {res.message}")
    return float(-res.fun)


def check_terminal_admissibility(
    sys: LtiSystem, term: TerminalIngredients, Zbar_inf: Polytope, tol: float = 1e-9
) -> AdmissibilityReport:
    """Check (z, Kf z) in Zbar_inf and (A + B Kf) z in Xf for all z in Xf.

    Singleton sets are checked pointwise. Other sets are checked one row at a
    time by comparing support functions, which also handles unbounded
    half-space sets as long as every support value is finite.
    """
    Xf = term.Xf
    n = sys.n
    if Xf.dim != n or Zbar_inf.dim != n + sys.m:
        raise ValueError("terminal set / constraint set dimensions do not match the system")
    Af = sys.closed_loop(term.Kf)
    # rows of Zbar acting on z through (z, Kf z)
    Hz = Zbar_inf.H[:, :n] + Zbar_inf.H[:, n:] @ term.Kf
    Hz_eq = Zbar_inf.Heq[:, :n] + Zbar_inf.Heq[:, n:] @ term.Kf
    failures = []

    if Xf.is_singleton:
        z = np.linalg.lstsq(Xf.Heq, Xf.heq, rcond=None)[0]
        if not Xf.contains(z, tol):
            return AdmissibilityReport(False, ["singleton equality rows are inconsistent"])
        w = np.concatenate([z, term.Kf @ z])
        if not Zbar_inf.contains(w, tol):
            failures.append(f"(z, Kf z) = {w} not in tightened set")
        if not Xf.contains(Af @ z, tol):
            failures.append("(A + B Kf) z leaves the terminal set")
        return AdmissibilityReport(not failures, failures)

    for i, (row, bound) in enumerate(zip(Hz, Zbar_inf.h)):
        s = _support(row, Xf)
        if s > bound + tol:
            failures.append(f"tightened row {i}: support {s:.6g} > {bound:.6g}")
    for i, (row, bound) in enumerate(zip(Hz_eq, Zbar_inf.heq)):
        if abs(_support(row, Xf) - bound) > tol or abs(_support(-row, Xf) + bound) > tol:
            failures.append(f"tightened equality row {i} not satisfied on the whole terminal set")
    for j, (row, bound) in enumerate(zip(Xf.H, Xf.h)):
        s = _support(row @ Af, Xf)
        if s > bound + tol:
            failures.append(f"invariance row {j}: support {s:.6g} > {bound:.6g}")
    for j, (row, bound) in enumerate(zip(Xf.Heq, Xf.heq)):
        d = row @ Af
        if abs(_support(d, Xf) - bound) > tol or abs(_support(-d, Xf) + bound) > tol:
            failures.append(f"invariance equality row {j} violated")
    return AdmissibilityReport(not failures, failures)


def as_matrix(a: Sequence | np.ndarray | float) -> np.ndarray:
    return np.atleast_2d(np.asarray(a, dtype=float))
