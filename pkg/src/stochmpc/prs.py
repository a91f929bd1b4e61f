"""Error covariance propagation, probabilistic reachable sets and constraint tightening."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np
from scipy.stats import chi2

from .model import ChanceConstraintSpec, Polytope

log = logging.getLogger(__name__)

VARIANCE_TOL = 1e-12
VARIANCE_MAX_ITER = 10**6
_STD_NORMAL = NormalDist()


class PrsMode(enum.Enum):
    GAUSSIAN = "gaussian"
    CHEBYSHEV = "chebyshev"


class PrsShape(enum.Enum):
    SYMMETRIC = "symmetric"
    ONE_SIDED = "one-sided"
    ELLIPSOIDAL = "ellipsoidal"


@dataclass(frozen=True)
class PrsSpec:
    mode: PrsMode = PrsMode.GAUSSIAN
    shape: PrsShape = PrsShape.SYMMETRIC
    stationary: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", PrsMode(self.mode))
        object.__setattr__(self, "shape", PrsShape(self.shape))

    @property
    def symmetric(self) -> bool:
        # one-sided half-space sets break the symmetry the closed-loop guarantee relies on
        return self.shape is not PrsShape.ONE_SIDED


@dataclass(frozen=True)
class VarianceSequence:
    """Sigma_{x,0..k_max} of the predicted error, plus the stationary limit if it exists."""

    sigmas: np.ndarray  # (k_max + 1, n, n)
    sigma_inf: np.ndarray | None
    converged_at: int | None

    def at(self, k: int) -> np.ndarray:
        if k < len(self.sigmas):
            return self.sigmas[k]
        if self.sigma_inf is None:
            raise IndexError(f"step {k} beyond the propagated horizon and no stationary limit")
        return self.sigma_inf


def propagate_variance(A_K, sigma_w, k_max: int, stationary: bool = True) -> VarianceSequence:
    """Iterate Sigma_{k+1} = A_K Sigma_k A_K' + Sigma_w from Sigma_0 = 0.

    With ``stationary`` the recursion is continued until the max-abs increment
    is at most 1e-12; ``converged_at`` is the first step index reaching that.
    Asking for the limit of a non-Schur A_K is an error.
    """
    A_K = np.atleast_2d(np.asarray(A_K, dtype=float))
    W = np.atleast_2d(np.asarray(sigma_w, dtype=float))
    n = A_K.shape[0]
    if k_max < 0:
        raise ValueError("k_max must be non-negative")
    sig = np.zeros((k_max + 1, n, n))
    for k in range(k_max):
        sig[k + 1] = A_K @ sig[k] @ A_K.T + W
    if not stationary:
        return VarianceSequence(sig, None, None)

    rho = float(np.max(np.abs(np.linalg.eigvals(A_K))))
    if rho >= 1.0:
        raise ValueError(f"stationary covariance requested but spectral radius of A_K is {rho:.6g}")
    S = sig[-1]
    for k in range(k_max, k_max + VARIANCE_MAX_ITER):
        S_next = A_K @ S @ A_K.T + W
        if np.max(np.abs(S_next - S)) <= VARIANCE_TOL:
            return VarianceSequence(sig, S_next, k + 1)
        S = S_next
    raise RuntimeError("covariance recursion did not converge")


def standard_normal_quantile(p: float) -> float:
    """z with Phi(z) = p."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    return _STD_NORMAL.inv_cdf(p)


def chebyshev_level(p: float, dim: int) -> float:
    """Level p~ such that {x : x' Sigma^-1 x <= p~} holds mass >= p for any law with covariance Sigma."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    return dim / (1.0 - p)


def chi2_level(p: float, dim: int) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    return float(chi2.ppf(p, dim))


def _output_std(direction: np.ndarray, sigma: np.ndarray) -> float:
    var = float(direction @ sigma @ direction)
    if var < 0.0:
        if var < -1e-12:
            raise ValueError(f"negative output variance {var:.3e}")
        log.warning("clamping output variance %.3e to zero", var)
        var = 0.0
    return float(np.sqrt(var))


def row_tightening(c, d, K, sigma_k, p_row: float, spec: PrsSpec) -> float:
    """Margin delta for one constraint row c'x + d'u <= h.

    The relevant error output is y_e = (c + d K) e with variance
    (c + dK) Sigma_k (c + dK)'.
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    direction = c + d @ K if d.size else c
    std = _output_std(direction, np.atleast_2d(sigma_k))
    if std == 0.0:
        return 0.0
    gaussian = spec.mode is PrsMode.GAUSSIAN
    if spec.shape is PrsShape.SYMMETRIC:
        scale = standard_normal_quantile(0.5 * (1.0 + p_row)) if gaussian else np.sqrt(chebyshev_level(p_row, 1))
    elif spec.shape is PrsShape.ONE_SIDED:
        scale = standard_normal_quantile(p_row) if gaussian else np.sqrt(chebyshev_level(p_row, 1))
    else:
        n = direction.shape[0]
        scale = np.sqrt(chi2_level(p_row, n) if gaussian else chebyshev_level(p_row, n))
    return max(0.0, float(std * scale))


@dataclass(frozen=True)
class TightenedConstraints:
    """Per-row, per-step margins and the tightened sets Zbar_k = {H w <= h - delta_k}."""

    base: Polytope
    margins: np.ndarray  # (rows, k_max + 1)
    margins_inf: np.ndarray | None  # (rows,)

    def margin(self, k: int) -> np.ndarray:
        if k < self.margins.shape[1]:
            return self.margins[:, k]
        if self.margins_inf is None:
            return self.margins[:, -1]
        return self.margins_inf

    def offsets(self, k: int) -> np.ndarray:
        return self.base.h - self.margin(k)

    def set_at(self, k: int) -> Polytope:
        return Polytope(self.base.H, self.offsets(k), self.base.Heq, self.base.heq)

    @property
    def limit(self) -> Polytope:
        return self.set_at(10**9)

    @property
    def horizon(self) -> int:
        """Number of tabulated steps; beyond it the limit margins apply."""
        return self.margins.shape[1]


def _nonempty(H: np.ndarray, h: np.ndarray) -> bool:
    from .qp import QuadraticProgram, check_feasible

    d = H.shape[1]
    qp = QuadraticProgram(np.zeros((d, d)), np.zeros(d), G=H, h=h)
    return check_feasible(qp)


def tighten(chance: ChanceConstraintSpec, K, variances: VarianceSequence, spec: PrsSpec) -> TightenedConstraints:
    """Tighten every row of the chance-constrained set by its PRS margin.

    Stationary specs apply the limit margin at every step. Rows whose error
    direction c + dK vanishes are never tightened, so they need no covariance
    (this is what lets K = 0 on a marginally stable plant work for input rows).
    """
    Z = chance.set
    K = np.atleast_2d(np.asarray(K, dtype=float))
    n = K.shape[1]
    levels = chance.levels()
    rows = Z.H.shape[0]
    directions = Z.H[:, :n] + Z.H[:, n:] @ K

    def margins_for(sigma):
        out = np.zeros(rows)
        for i in range(rows):
            if not np.any(directions[i]):
                continue
            if sigma is None:
                raise ValueError(
                    f"row {i} depends on the error but no stationary covariance exists (A+BK not Schur)"
                )
            out[i] = row_tightening(Z.H[i, :n], Z.H[i, n:], K, sigma, levels[i], spec)
        return out

    m_inf = margins_for(variances.sigma_inf) if (variances.sigma_inf is not None or spec.stationary) else None
    if spec.stationary:
        margins = m_inf[:, None].copy()
    else:
        margins = np.stack([margins_for(S) for S in variances.sigmas], axis=1)
    margins.setflags(write=False)
    if m_inf is not None:
        m_inf.setflags(write=False)
    out = TightenedConstraints(Z, margins, m_inf)

    H_all = np.vstack([Z.H, Z.Heq, -Z.Heq])
    for k in range(out.horizon):
        if not _nonempty(H_all, np.concatenate([out.offsets(k), Z.heq, -Z.heq])):
            raise ValueError(f"tightened constraint set at step {k} is empty")
    return out
