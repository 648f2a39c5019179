"""Forward-process variance schedule and derived diffusion coefficients.

Timesteps are 1-based throughout the public API: ``t`` ranges over
``{1, ..., T}``, and ``alpha_bar(0) == 1`` by convention so that the
first-step posterior variance is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "make_linear_schedule"]

# Standard DDPM convention; desk-scale runs typically use T=100 with a
# larger beta_end so the terminal signal-to-noise is still near zero.
DEFAULT_TIMESTEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable container for beta_t, alpha_t = 1 - beta_t and their cumulative product.

    Arrays are float64 of length T, stored 0-indexed; use the accessor
    methods for 1-based timestep lookups.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.shape[0] != self.T:
            raise ValueError(f"betas must be a length-{self.T} vector, got shape {betas.shape}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ValueError("all betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if not np.all((alpha_bars > 0.0) & (alpha_bars < 1.0)):
            raise ValueError("alpha_bars left (0, 1); schedule too long or betas too large")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        self.betas.setflags(write=False)
        self.alphas.setflags(write=False)
        self.alpha_bars.setflags(write=False)

    def _check_t(self, t, allow_zero=False):
        t = np.asarray(t)
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")
        return t

    def beta(self, t):
        """beta_t for 1-based t (scalar or array)."""
        t = self._check_t(t)
        return self.betas[t - 1]

    def alpha(self, t):
        """alpha_t = 1 - beta_t for 1-based t."""
        t = self._check_t(t)
        return self.alphas[t - 1]

    def alpha_bar(self, t):
        """Cumulative product of alphas up to t, with alpha_bar(0) = 1."""
        t = self._check_t(t, allow_zero=True)
        padded = np.concatenate(([1.0], self.alpha_bars))
        return padded[t]

    def to_dict(self):
        """Serializable form, echoed into checkpoints and run configs."""
        return {"T": self.T, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(T=int(d["T"]), betas=np.asarray(d["betas"], dtype=np.float64))


def make_linear_schedule(
    T: int = DEFAULT_TIMESTEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly interpolated beta schedule from beta_start to beta_end inclusive.

    For T == 1 the single beta equals beta_start.
    """
    if T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta_start and beta_end must lie strictly inside (0, 1)")
    if beta_start > beta_end:
        raise ValueError(f"beta_start must not exceed beta_end ({beta_start} > {beta_end})")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(T=T, betas=betas)
