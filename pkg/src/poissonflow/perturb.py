"""Training-point perturbation and the hyper-parameter rules derived from
dataset moments.

A data point x is pushed into the upper half space by

    y = x + |eps_x| (1+tau)^m u,    z = |eps_z| (1+tau)^m,

with eps = (eps_x, eps_z) ~ N(0, sigma^2 I_(N+1)), u a uniform direction in
data space, and m uniform on [0, M].  The exponent m is treated as a
continuous variable; with fixed eps and u the noise grows geometrically in m,
so large m places points far out where the field is nearly radial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import AugmentedPoint
from .geometry import sample_unit_vector
from .rng import RngState

DEFAULT_SIGMA = 0.01
DEFAULT_TAU = 0.03
DEFAULT_Z_MIN = 1e-3


@dataclass(frozen=True)
class PerturbConfig:
    """Noise schedule hyper-parameters (M, sigma, tau) plus the field stabilizer."""

    M: int
    sigma: float = DEFAULT_SIGMA
    tau: float = DEFAULT_TAU
    gamma: float = 0.0
    # Optional cap on m for draws whose initial |eps_z| is very small; off by
    # default for toy data (image-scale heuristic awaiting a better fix).
    small_eps_z_threshold: float | None = None
    capped_M: int | None = None

    def __post_init__(self) -> None:
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if (self.small_eps_z_threshold is None) != (self.capped_M is None):
            raise ValueError("small_eps_z_threshold and capped_M must be set together")


@dataclass(frozen=True)
class DerivedSchedule:
    """Sampling-side quantities implied by the perturbation schedule."""

    z_max: float
    z_min: float
    norm_clip: float

    def __post_init__(self) -> None:
        if not (0 < self.z_min < self.z_max):
            raise ValueError(f"need 0 < z_min < z_max, got {self.z_min}, {self.z_max}")
        if not self.norm_clip > 0:
            raise ValueError(f"norm_clip must be positive, got {self.norm_clip}")


def perturb_batch(
    x: np.ndarray, cfg: PerturbConfig, rng: RngState, m: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Perturb each row of ``x``; returns (y, z) arrays.

    ``m`` overrides the uniform draw of the exponents (used by tests and by
    diagnostics that slice the schedule at a fixed noise level).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    count, n = x.shape
    gen = rng.generator()
    if m is None:
        m = gen.uniform(0.0, cfg.M, count)
    else:
        m = np.broadcast_to(np.asarray(m, dtype=float), (count,)).copy()
    eps = gen.normal(0.0, cfg.sigma, (count, n + 1))
    eps_x_norm = np.linalg.norm(eps[:, :n], axis=1)
    eps_z = np.abs(eps[:, n])
    if cfg.small_eps_z_threshold is not None:
        small = eps_z < cfg.small_eps_z_threshold
        # Confine the exponent range to [0, capped_M] for these draws.
        m[small] *= cfg.capped_M / cfg.M
    u = sample_unit_vector(n, rng.child(1), count)
    growth = (1.0 + cfg.tau) ** m
    y = x + (eps_x_norm * growth)[:, None] * u
    z = eps_z * growth
    return y, z


def perturb(x: np.ndarray, cfg: PerturbConfig, rng: RngState) -> AugmentedPoint:
    """Perturbed augmented version of a single data point."""
    y, z = perturb_batch(np.asarray(x, dtype=float)[None, :], cfg, rng)
    return AugmentedPoint(x=y[0], z=float(z[0]))


def rule_of_thumb_M(mean_sq_norm: float, n: int, sigma: float, tau: float) -> int:
    """Smallest exponent ceiling that pushes m = M perturbations into the far
    zone of the field:

        M = (3/4) ln( E|x|^2 / (2 sqrt(N) sigma^2) ) / ln(1 + tau),

    rounded up to an integer.
    """
    if mean_sq_norm <= 0 or n < 1 or sigma <= 0 or tau <= 0:
        raise ValueError("all rule-of-thumb arguments must be positive")
    value = 0.75 * math.log(mean_sq_norm / (2.0 * math.sqrt(n) * sigma**2)) / math.log1p(tau)
    return max(1, math.ceil(value))


def rule_of_thumb_schedule(
    mean_sq_norm: float, n: int, sigma: float, tau: float, M: int,
    z_min: float = DEFAULT_Z_MIN,
) -> DerivedSchedule:
    """Starting height and norm clip matched to the perturbation reach:

        z_max     = E[|eps_z|] (1+tau)^M = sqrt(2/pi) sigma (1+tau)^M
        norm_clip = E[|eps_x|] (1+tau)^M ~ sqrt(N) sigma (1+tau)^M
    """
    if mean_sq_norm <= 0 or n < 1 or sigma <= 0 or tau <= 0 or M < 1:
        raise ValueError("all rule-of-thumb arguments must be positive")
    growth = (1.0 + tau) ** M
    return DerivedSchedule(
        z_max=math.sqrt(2.0 / math.pi) * sigma * growth,
        z_min=z_min,
        norm_clip=math.sqrt(n) * sigma * growth,
    )
