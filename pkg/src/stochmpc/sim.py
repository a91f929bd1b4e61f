"""Closed-loop rollouts and Monte Carlo statistics."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from scipy.stats import chi2

from . import qp as qpmod
from .model import DisturbanceLaw, LtiSystem
from .prs import propagate_variance
from .smpc import (
    STEP_INFEASIBLE,
    STEP_OK,
    InfeasibleStartError,
    InvariantViolation,
    SmpcConfig,
    SolverError,
    _rollout,
    check_step_invariants,
    shifted_candidate,
    solve_step,
    build_step_qp,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RngSpec:
    """Per-rollout streams derived from (master_seed, rollout index).

    The pair is hashed by numpy's SeedSequence into a PCG64 state, so any
    rollout can be regenerated on its own, in any process, in any order.
    """

    master_seed: int

    def generator(self, index: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(self.master_seed), int(index)])))


def sample_disturbances(sys: LtiSystem, rng: np.random.Generator, T: int) -> np.ndarray:
    """T draws of w with covariance sigma_w, shape (T, n)."""
    L = np.linalg.cholesky(sys.sigma_w)
    if sys.disturbance is DisturbanceLaw.GAUSSIAN:
        xi = rng.standard_normal((T, sys.n))
    else:
        # unit-variance uniform on [-sqrt(3), sqrt(3)] per component
        xi = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), (T, sys.n))
    return xi @ L.T


@dataclass
class RolloutRecord:
    x: np.ndarray  # (T + 1, n), includes the final state
    u: np.ndarray  # (T, m)
    lam: np.ndarray  # (T,)
    z0: np.ndarray  # (T, n)
    cost: np.ndarray  # (T,)
    satisfied: np.ndarray  # (T,) bool
    J: np.ndarray  # (T,) optimal expected cost incl. trace terms
    w: np.ndarray  # (T, n)

    @property
    def e(self) -> np.ndarray:
        return self.x[:-1] - self.z0

    @property
    def T(self) -> int:
        return self.u.shape[0]


def _gain_arrays(cfg: SmpcConfig):
    gain = cfg.gain if cfg.gain is not None else np.zeros((cfg.m, cfg.n))
    c = cfg.cost
    Z = cfg.chance.set
    return (
        np.ascontiguousarray(cfg.K, dtype=float),
        np.ascontiguousarray(gain, dtype=float),
        c.Q,
        c.q,
        c.R,
        c.r,
        np.ascontiguousarray(Z.H),
        # same slack the QP solver grants, so saturated inputs count as inside
        np.ascontiguousarray(Z.h + qpmod.FEAS_TOL),
    )


def _raise_for(status: int, k: int, cfg: SmpcConfig):
    if status == STEP_INFEASIBLE:
        if k == 0:
            raise InfeasibleStartError(f"{cfg.variant.value}: step problem infeasible at k=0")
        raise InvariantViolation(
            f"{cfg.variant.value}: step problem infeasible at k={k} after a feasible start"
        )
    raise SolverError(f"{cfg.variant.value}: QP iteration cap reached at k={k}")


def rollout(cfg: SmpcConfig, x0, T: int, rng: np.random.Generator | None = None, w_seq=None,
            verify: bool = False) -> RolloutRecord:
    """Simulate the closed loop for T steps starting with z_prev = x0.

    Either ``rng`` or an explicit ``w_seq`` of shape (T, n) must be supplied.
    With ``verify`` the loop runs step by step in Python and checks every
    step invariant plus feasibility of the shifted candidate, which is slow
    and meant for tests.
    """
    x0 = np.ascontiguousarray(np.atleast_1d(np.asarray(x0, dtype=float)))
    if w_seq is None:
        if rng is None:
            raise ValueError("rollout needs either rng or w_seq")
        w_seq = sample_disturbances(cfg.sys, rng, T)
    W = np.ascontiguousarray(np.asarray(w_seq, dtype=float).reshape(T, cfg.n))
    if verify:
        return _rollout_verified(cfg, x0, W)
    K, gain, Q, q, R, r, Hz, hz = _gain_arrays(cfg)
    xs, us, z0s, lams, objs, costs, sat, status, k_fail = _rollout(
        cfg.template, cfg.variant.code, cfg.sys.A, cfg.sys.B, K, gain, Q, q, R, r, Hz, hz, x0, W,
        qpmod.DEFAULT_MAX_ITER,
    )
    if status != STEP_OK:
        _raise_for(status, k_fail, cfg)
    J = objs + cfg.trace_constant if cfg.variant.uses_qp else costs.copy()
    return RolloutRecord(xs, us, lams, z0s, costs, sat, J, W)


def _rollout_verified(cfg: SmpcConfig, x0: np.ndarray, W: np.ndarray) -> RolloutRecord:
    T = W.shape[0]
    n, m = cfg.n, cfg.m
    xs = np.empty((T + 1, n))
    us = np.empty((T, m))
    z0s = np.full((T, n), np.nan)
    lams = np.full(T, np.nan)
    J = np.empty(T)
    costs = np.empty(T)
    sat = np.empty(T, bool)
    x, z_prev, prev = x0.copy(), x0.copy(), None
    Z = cfg.chance.set
    for k in range(T):
        xs[k] = x
        if prev is not None and cfg.variant.uses_qp:
            cand = shifted_candidate(prev, cfg, k)
            viol = build_step_qp(cfg, x, z_prev, k).violation(cand.theta())
            if viol > 1e-7:
                raise InvariantViolation(f"shifted candidate infeasible at k={k} (violation {viol:.3e})")
        res = solve_step(cfg, x, z_prev, k)
        if not res.feasible:
            _raise_for(STEP_INFEASIBLE, k, cfg)
        if cfg.variant.uses_qp:
            bad = check_step_invariants(res, cfg, x, z_prev, k)
            if bad:
                raise InvariantViolation(f"k={k}: " + "; ".join(bad))
            z0s[k] = res.z_star[:, 0]
            lams[k] = res.lambda_star
            z_prev = res.z_next.copy()
            prev = res
        u = res.u_applied
        us[k] = u
        J[k] = res.J_star
        costs[k] = cfg.cost(x, u)
        sat[k] = Z.contains(np.concatenate([x, u]), qpmod.FEAS_TOL)
        x = cfg.sys.A @ x + cfg.sys.B @ u + W[k]
    xs[T] = x
    return RolloutRecord(xs, us, lams, z0s, costs, sat, J, W)


@dataclass
class MonteCarloStats:
    n_rollouts: int
    p_hat: np.ndarray  # (T,)
    p_stderr: np.ndarray
    mean_cost: np.ndarray
    mean_u: np.ndarray  # (T, m)
    mean_x: np.ndarray  # (T, n)
    mean_lambda: np.ndarray  # (T,), nan for gain controllers
    avg_cost: float
    avg_cost_stderr: float
    avg_satisfaction: float
    min_satisfaction: float
    lambda_mean: float
    records: list[RolloutRecord] = field(default_factory=list)
    cost_ratio: float | None = None

    @property
    def T(self) -> int:
        return self.p_hat.shape[0]

    def ratio_to(self, baseline: "MonteCarloStats") -> float | None:
        if baseline.avg_cost == 0.0:
            return None
        return self.avg_cost / baseline.avg_cost


def _run_chunk(cfg: SmpcConfig, x0, T: int, seed: int, indices: range, keep: int):
    rng_spec = RngSpec(seed)
    sat = np.empty((len(indices), T), bool)
    cost = np.empty((len(indices), T))
    u = np.empty((len(indices), T, cfg.m))
    x = np.empty((len(indices), T, cfg.n))
    lam = np.empty((len(indices), T))
    kept = []
    for j, i in enumerate(indices):
        try:
            rec = rollout(cfg, x0, T, rng=rng_spec.generator(i))
        except Exception as exc:
            raise type(exc)(f"rollout {i}: {exc}") from exc
        sat[j] = rec.satisfied
        cost[j] = rec.cost
        u[j] = rec.u
        x[j] = rec.x[:-1]
        lam[j] = rec.lam
        if i < keep:
            kept.append(rec)
    return sat, cost, u, x, lam, kept


def _nanmean0(a: np.ndarray) -> np.ndarray:
    if np.all(np.isnan(a)):
        return np.full(a.shape[1:], np.nan)
    return np.nanmean(a, axis=0)


def monte_carlo(cfg: SmpcConfig, x0, T: int, n: int, rng: RngSpec, threads: int = 1, keep: int = 0) -> MonteCarloStats:
    """Aggregate ``n`` independent rollouts.

    Rollout i always uses the stream ``rng.generator(i)`` and results are
    reduced in index order, so the statistics do not depend on ``threads``
    (0 means one worker per CPU).
    """
    if n < 1:
        raise ValueError("need at least one rollout")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if threads == 0:
        threads = os.cpu_count() or 1
    threads = max(1, min(threads, n))
    if threads == 1:
        parts = [_run_chunk(cfg, x0, T, rng.master_seed, range(n), keep)]
    else:
        bounds = np.linspace(0, n, threads + 1).astype(int)
        chunks = [range(bounds[i], bounds[i + 1]) for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as ex:
            futures = [ex.submit(_run_chunk, cfg, x0, T, rng.master_seed, c, keep) for c in chunks]
            parts = [f.result() for f in futures]
    sat = np.concatenate([p[0] for p in parts])
    cost = np.concatenate([p[1] for p in parts])
    u = np.concatenate([p[2] for p in parts])
    x = np.concatenate([p[3] for p in parts])
    lam = np.concatenate([p[4] for p in parts])
    kept = [r for p in parts for r in p[5]]

    p_hat = sat.mean(axis=0)
    per_rollout_cost = cost.mean(axis=1)
    stderr = float(per_rollout_cost.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    lam_mean = float(np.nanmean(lam)) if not np.all(np.isnan(lam)) else float("nan")
    return MonteCarloStats(
        n_rollouts=n,
        p_hat=p_hat,
        p_stderr=np.sqrt(p_hat * (1 - p_hat) / n),
        mean_cost=cost.mean(axis=0),
        mean_u=u.mean(axis=0),
        mean_x=x.mean(axis=0),
        mean_lambda=_nanmean0(lam),
        avg_cost=float(per_rollout_cost.mean()),
        avg_cost_stderr=stderr,
        avg_satisfaction=float(p_hat.mean()),
        min_satisfaction=float(p_hat.min()),
        lambda_mean=lam_mean,
        records=kept,
    )


@dataclass
class NestednessResult:
    empirical: float
    analytic: float
    stderr: float

    @property
    def holds(self) -> bool:
        return self.empirical >= self.analytic - 3 * self.stderr


def nestedness_check(cfg: SmpcConfig, radius: float, k: int, n: int, rng: RngSpec, kind: str = "interval",
                     direction=None) -> NestednessResult:
    """Compare P(e(k) in R) in closed loop with P(e_{k|0} in R) for the open-loop prediction.

    ``kind`` selects R: "interval" {|a'e| <= r}, "halfspace" {a'e <= r}
    (not symmetric, so nestedness may fail) or "ellipsoid"
    {e' Sigma_k^-1 e <= r^2}. ``direction`` defaults to the first unit vector.
    Only Gaussian disturbances have a closed-form open-loop side.
    """
    if cfg.sys.disturbance is not DisturbanceLaw.GAUSSIAN:
        raise ValueError("analytic containment probability requires Gaussian disturbances")
    a = np.zeros(cfg.n)
    a[0] = 1.0
    if direction is not None:
        a = np.atleast_1d(np.asarray(direction, dtype=float))
    sig = propagate_variance(cfg.sys.closed_loop(cfg.K), cfg.sys.sigma_w, k, stationary=False).sigmas[k]

    e = np.empty((n, cfg.n))
    for i in range(n):
        rec = rollout(cfg, np.zeros(cfg.n), k + 1, rng=rng.generator(i))
        e[i] = rec.e[k]

    std = float(np.sqrt(max(a @ sig @ a, 0.0)))
    std_normal = NormalDist()
    if kind == "interval":
        inside = np.abs(e @ a) <= radius
        analytic = 1.0 if std == 0.0 else 2 * std_normal.cdf(radius / std) - 1
    elif kind == "halfspace":
        inside = e @ a <= radius
        analytic = (1.0 if radius >= 0 else 0.0) if std == 0.0 else std_normal.cdf(radius / std)
    elif kind == "ellipsoid":
        if np.allclose(sig, 0):
            inside = np.all(np.abs(e) <= 1e-9, axis=1)
            analytic = 1.0
        else:
            inside = np.einsum("ij,jk,ik->i", e, np.linalg.inv(sig), e) <= radius**2
            analytic = float(chi2.cdf(radius**2, cfg.n))
    else:
        raise ValueError(f"unknown set kind {kind!r}")
    p = float(inside.mean())
    return NestednessResult(p, float(analytic), float(np.sqrt(max(p * (1 - p), 1e-300) / n)))
