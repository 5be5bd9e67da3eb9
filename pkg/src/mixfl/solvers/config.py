"""Solver configuration and validation."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = ["Variant", "JacobianRule", "SolverConfig", "ConfigError", "NumericalError", "SolverWarning"]


class ConfigError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class SolverWarning(UserWarning):
    pass


class Variant(str, enum.Enum):
    L2GD = "L2GD"
    L2SGD_PLUS = "L2SGD_PLUS"
    L2SGD_PLUS_EFFICIENT = "L2SGD_PLUS_EFFICIENT"
    VR_LOCAL_GD = "VR_LOCAL_GD"
    L2SGD = "L2SGD"
    L2SGD2 = "L2SGD2"
    L2SGDPP = "L2SGDPP"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper().replace("-", "_").replace("+", "_PLUS")
        key = {"L2SGD_PLUS_PLUS": "L2SGDPP", "L2SGD++": "L2SGDPP"}.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown variant {name!r}") from None


class JacobianRule(str, enum.Enum):
    SAGA = "SAGA"
    LSVRG = "LSVRG"


@dataclass
class SolverConfig:
    variant: Variant
    alpha: float
    p: float
    seed: int
    max_iters: int = 10_000
    lam: float | None = None  # None: take lambda from the problem
    record_every: int | None = None  # None: about one data pass
    target: float | None = None  # stop once rel_subopt <= target
    # general method only
    participation: object = None  # None: full participation
    samplings: list | None = None  # None: uniform single index per device
    jacobian_rule: JacobianRule = JacobianRule.SAGA
    lsvrg_probs: np.ndarray | None = None
    eso_v: list | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.jacobian_rule = JacobianRule(str(self.jacobian_rule).upper().split(".")[-1])
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 < self.p < 1.0:
            raise ConfigError(f"p must lie in (0, 1), got {self.p}")
        if self.lam is not None and (not np.isfinite(self.lam) or self.lam < 0):
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if self.record_every is not None and self.record_every < 1:
            raise ConfigError("record_every must be >= 1")
        if self.target is not None and not 0.0 < self.target < 1.0:
            raise ConfigError("target must lie in (0, 1)")
        if self.seed is None:
            raise ConfigError("a seed is required")
        self.seed = int(self.seed)
        if self.lsvrg_probs is not None:
            rho = np.asarray(self.lsvrg_probs, dtype=float).ravel()
            if np.any(rho <= 0) or np.any(rho > 1):
                raise ConfigError("LSVRG probabilities must lie in (0, 1]")
            self.lsvrg_probs = rho

    def with_(self, **kw) -> "SolverConfig":
        return replace(self, **kw)

    def check_against(self, n: int, lam: float):
        """Warn (never clip) on stepsizes outside the safe range."""
        coef = self.alpha * lam / (n * self.p)
        if coef > 1.0 and self.variant == Variant.L2GD:
            raise ConfigError(f"aggregation weight alpha*lam/(n p) = {coef:.4g} exceeds 1")
        if coef > 0.5:
            warnings.warn(f"aggregation weight alpha*lam/(n p) = {coef:.4g} exceeds 1/2", SolverWarning, stacklevel=3)
