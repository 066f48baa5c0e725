"""Gaussian-mechanism privacy: clipping, noise calibration and budget accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

BUDGET_MODES = ("sqrt", "fixed")


@dataclass(frozen=True)
class PrivacySpec:
    """Privacy parameters for one experiment.

    ``epsilon_total = inf`` disables noise and ``clip_norm = inf`` disables
    clipping. ``budget_mode="fixed"`` spends ``epsilon_total`` every round
    instead of the square-root split. ``sensitivity_divisor`` scales the
    sensitivity down (20 reproduces the clip_norm/20 variant).
    """

    epsilon_total: float = 0.8
    delta: float = 1e-5
    clip_norm: float = 1.5
    rounds: int = 10
    budget_mode: str = "sqrt"
    sensitivity_divisor: float = 1.0

    def errors(self) -> list[str]:
        errs = []
        if not self.epsilon_total > 0:
            errs.append(f"epsilon_total must be > 0, got {self.epsilon_total}")
        if not 0 < self.delta < 1:
            errs.append(f"delta must lie in (0, 1), got {self.delta}")
        if not self.clip_norm > 0:
            errs.append(f"clip_norm must be > 0, got {self.clip_norm}")
        if int(self.rounds) != self.rounds or self.rounds < 1:
            errs.append(f"rounds must be an integer >= 1, got {self.rounds}")
        if self.budget_mode not in BUDGET_MODES:
            errs.append(f"budget_mode must be one of {BUDGET_MODES}, got {self.budget_mode!r}")
        if not self.sensitivity_divisor > 0:
            errs.append(f"sensitivity_divisor must be > 0, got {self.sensitivity_divisor}")
        return errs

    def validate(self) -> None:
        errs = self.errors()
        if errs:
            raise ConfigError("; ".join(errs))

    @property
    def noise_enabled(self) -> bool:
        return math.isfinite(self.epsilon_total)


def clip_gradient(g: np.ndarray, clip_norm: float) -> tuple[np.ndarray, bool, float]:
    """Scale ``g`` by ``min(1, C / ||g||)``; returns (clipped, was_clipped, scale)."""
    if not clip_norm > 0:
        raise ConfigError(f"clip_norm must be > 0, got {clip_norm}")
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NumericError("gradient contains non-finite values")
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm:
        return g.copy(), False, 1.0
    scale = clip_norm / norm
    return g * scale, True, scale


def noise_scale(clip_norm: float, epsilon: float, delta: float) -> float:
    """Gaussian-mechanism standard deviation ``C * sqrt(2 ln(1.25/delta)) / epsilon``.

    An infinite epsilon means no noise.
    """
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    if not clip_norm > 0:
        raise ConfigError(f"clip_norm must be > 0, got {clip_norm}")
    if math.isinf(epsilon):
        return 0.0
    if math.isinf(clip_norm):
        raise ConfigError("finite epsilon with unbounded clip_norm gives unbounded noise")
    return clip_norm * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def add_noise(g: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    g = np.asarray(g, dtype=np.float64)
    if sigma == 0:
        return g.copy()
    return g + sigma * rng.standard_normal(g.shape)


def allocate_budget(spec: PrivacySpec) -> float:
    """Per-round epsilon: ``epsilon_total / sqrt(T)``, or ``epsilon_total`` in fixed mode."""
    if int(spec.rounds) != spec.rounds or spec.rounds < 1:
        raise ConfigError(f"rounds must be an integer >= 1, got {spec.rounds}")
    if spec.budget_mode == "fixed":
        return spec.epsilon_total
    return spec.epsilon_total / math.sqrt(spec.rounds)


@dataclass
class PrivacyLedger:
    """Per-round epsilon spends; the cumulative total is an exactly rounded sum."""

    spends: list[float] = field(default_factory=list)

    @property
    def cumulative(self) -> float:
        return math.fsum(self.spends)

    @property
    def rounds(self) -> int:
        return len(self.spends)

    def record_spend(self, epsilon_round: float) -> PrivacyLedger:
        if not epsilon_round >= 0:
            raise ConfigError(f"spend must be >= 0, got {epsilon_round}")
        self.spends.append(float(epsilon_round))
        return self


def record_spend(ledger: PrivacyLedger, epsilon_round: float) -> PrivacyLedger:
    return ledger.record_spend(epsilon_round)


@dataclass(frozen=True)
class PrivatizeDiagnostics:
    was_clipped: bool
    sigma: float
    scale: float


def privatize_update(
    g: np.ndarray, spec: PrivacySpec, epsilon_round: float, rng: np.random.Generator
) -> tuple[np.ndarray, PrivatizeDiagnostics]:
    """Clip to ``spec.clip_norm`` then add Gaussian noise calibrated to ``epsilon_round``."""
    spec.validate()
    if math.isinf(spec.clip_norm):
        g = np.asarray(g, dtype=np.float64)
        if not np.isfinite(g).all():
            raise NumericError("gradient contains non-finite values")
        clipped, was_clipped, scale = g.copy(), False, 1.0
    else:
        clipped, was_clipped, scale = clip_gradient(g, spec.clip_norm)
    sensitivity = spec.clip_norm / spec.sensitivity_divisor
    sigma = noise_scale(sensitivity, epsilon_round, spec.delta)
    return add_noise(clipped, sigma, rng), PrivatizeDiagnostics(was_clipped, sigma, scale)
