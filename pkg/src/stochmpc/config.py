"""JSON experiment configuration, presets and conversion to controller configs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .model import ChanceConstraintSpec, LtiSystem, Polytope, QuadraticStageCost
from .prs import PrsSpec
from .smpc import ControllerVariant, SmpcConfig, make_config

Matrix = list[list[float]]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message carries JSON paths."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(_Section):
    A: Matrix
    B: Matrix
    sigma_w: Matrix
    disturbance: Literal["gaussian", "uniform"] = "gaussian"


class CostSection(_Section):
    Q: Matrix
    q: Optional[list[float]] = None
    R: Matrix
    r: Optional[list[float]] = None


class ConstraintsSection(_Section):
    H: Matrix
    h: list[float]
    p: float = Field(gt=0.0, lt=1.0)
    allocation: Literal["joint", "per-row"] = "joint"
    row_levels: Optional[list[float]] = None


class ControllerSection(_Section):
    variant: Union[str, list[str]] = "proposed"
    K: Matrix
    K_lqr: Optional[Matrix] = None
    N: int = Field(ge=1)
    lambda_penalty: float = Field(default=0.0, ge=0.0)

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, v):
        for name in [v] if isinstance(v, str) else v:
            ControllerVariant(name)
        return v


class PrsSection(_Section):
    mode: Literal["gaussian", "chebyshev"] = "gaussian"
    shape: Literal["symmetric", "one-sided", "ellipsoidal"] = "symmetric"
    stationary: bool = True


class TerminalSection(_Section):
    type: Literal["origin", "halfspace-from-tightening"] = "origin"
    Kf: Optional[Matrix] = None


class SimulationSection(_Section):
    T: int = Field(default=40, ge=1)
    rollouts: int = Field(default=10_000, ge=1)
    seed: int = Field(default=1, ge=0, lt=2**64)
    x0: Optional[list[float]] = None


class OutputSection(_Section):
    directory: str = "out"


class ExperimentConfig(_Section):
    system: SystemSection
    cost: CostSection
    constraints: ConstraintsSection
    controller: ControllerSection
    prs: PrsSection = PrsSection()
    terminal: TerminalSection = TerminalSection()
    simulation: SimulationSection = SimulationSection()
    output: OutputSection = OutputSection()

    @property
    def variants(self) -> list[ControllerVariant]:
        v = self.controller.variant
        return [ControllerVariant(x) for x in ([v] if isinstance(v, str) else v)]

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


def _fmt_loc(loc) -> str:
    out = ""
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def parse_config(data: Union[str, bytes, dict]) -> ExperimentConfig:
    try:
        if isinstance(data, dict):
            return ExperimentConfig.model_validate(data)
        return ExperimentConfig.model_validate_json(data)
    except ValidationError as exc:
        lines = [f"{_fmt_loc(e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid experiment config:\n  " + "\n  ".join(lines)) from None


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


_ALL_VARIANTS = ["lqr", "proposed", "case-min", "indirect", "nominal", "fixed-gain", "case-reset"]


def preset(name: str) -> ExperimentConfig:
    """Built-in experiments: "table1" (integrator) and "appendixB" (half-space example)."""
    if name == "table1":
        data = {
            "system": {"A": [[1.0]], "B": [[1.0]], "sigma_w": [[1.0]]},
            "cost": {"Q": [[1.0]], "R": [[0.0]]},
            "constraints": {"H": [[0.0, 1.0], [0.0, -1.0]], "h": [1.0, 1.0], "p": 0.8061},
            "controller": {"variant": list(_ALL_VARIANTS), "K": [[-0.5]], "K_lqr": [[-1.0]], "N": 10},
            "prs": {"shape": "symmetric"},
            "terminal": {"type": "origin"},
            "simulation": {"T": 40, "rollouts": 10_000, "seed": 1, "x0": [0.0]},
        }
    elif name == "appendixB":
        data = {
            "system": {"A": [[0.75]], "B": [[1.0]], "sigma_w": [[1.0]]},
            "cost": {"Q": [[0.0]], "R": [[0.0]], "r": [1.0]},
            "constraints": {"H": [[-1.0, 0.0]], "h": [2.0], "p": 0.814},
            "controller": {"variant": ["proposed", "indirect"], "K": [[0.0]], "N": 10},
            "prs": {"shape": "symmetric"},
            "terminal": {"type": "halfspace-from-tightening", "Kf": [[0.0]]},
            "simulation": {"T": 40, "rollouts": 10_000, "seed": 1, "x0": [0.0]},
        }
    else:
        raise ConfigError(f"unknown preset {name!r} (known: table1, appendixB)")
    return parse_config(data)


def build_problem(cfg: ExperimentConfig):
    """(system, stage cost, chance constraint) from a parsed config."""
    s, c, z = cfg.system, cfg.cost, cfg.constraints
    try:
        sys = LtiSystem(np.array(s.A), np.array(s.B), np.array(s.sigma_w), s.disturbance)
        n, m = sys.n, sys.m
        cost = QuadraticStageCost(
            np.array(c.Q),
            np.array(c.q) if c.q is not None else np.zeros(n),
            np.array(c.R),
            np.array(c.r) if c.r is not None else np.zeros(m),
        )
        H = np.array(z.H, dtype=float)
        if H.ndim != 2 or H.shape[1] != n + m:
            raise ValueError(f"constraints.H must have {n + m} columns")
        chance = ChanceConstraintSpec(
            Polytope(H, np.array(z.h, dtype=float)),
            z.p,
            z.allocation,
            tuple(z.row_levels) if z.row_levels is not None else None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return sys, cost, chance


def build_controller(cfg: ExperimentConfig, variant: ControllerVariant | str) -> SmpcConfig:
    sys, cost, chance = build_problem(cfg)
    ctl = cfg.controller
    return make_config(
        sys,
        cost,
        chance,
        np.array(ctl.K, dtype=float),
        ctl.N,
        prs=PrsSpec(cfg.prs.mode, cfg.prs.shape, cfg.prs.stationary),
        terminal=cfg.terminal.type,
        Kf=np.array(cfg.terminal.Kf, dtype=float) if cfg.terminal.Kf is not None else None,
        variant=variant,
        lambda_penalty=ctl.lambda_penalty,
        K_lqr=np.array(ctl.K_lqr, dtype=float) if ctl.K_lqr is not None else None,
    )


def initial_state(cfg: ExperimentConfig) -> np.ndarray:
    n = len(cfg.system.A)
    x0 = cfg.simulation.x0
    if x0 is None:
        return np.zeros(n)
    if len(x0) != n:
        raise ConfigError(f"simulation.x0 must have length {n}")
    return np.array(x0, dtype=float)


def dump_json(cfg: ExperimentConfig) -> dict:
    return json.loads(cfg.to_json())
