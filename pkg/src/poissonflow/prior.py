"""The analytic starting distribution on the z = z_max hyperplane.

Radially projecting the uniform distribution on the upper hemisphere of
radius z_max onto the plane z = z_max gives the heavy-tailed density

    p(x) = 2 z_max / ( S_N(1) (|x|^2 + z_max^2)^((N+1)/2) ),   x in R^N.

It is sampled exactly by drawing the squared radius in units of z_max^2 from
a beta-prime distribution: R1 ~ Beta(N/2, 1/2), R2 = R1/(1-R1),
radius = z_max sqrt(R2), direction uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import log_surface_area_unit_sphere, sample_unit_vector
from .rng import RngState


@dataclass(frozen=True)
class PriorSpec:
    """Hyperplane height z_max, data dimension, and optional norm clipping."""

    z_max: float
    n: int
    norm_clip: float | None = None

    def __post_init__(self) -> None:
        if not self.z_max > 0:
            raise ValueError(f"z_max must be positive, got {self.z_max}")
        if self.n < 1:
            raise ValueError(f"data dimension must be >= 1, got {self.n}")
        if self.norm_clip is not None and not self.norm_clip > 0:
            raise ValueError(f"norm_clip must be positive, got {self.norm_clip}")


def prior_log_density(x: np.ndarray, spec: PriorSpec) -> float | np.ndarray:
    """Natural-log density of the hyperplane prior at x (row-wise if 2D)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[1] != spec.n:
        raise ValueError(f"points must have {spec.n} components, got {xs.shape[1]}")
    sq = np.sum(xs**2, axis=1)
    out = (
        math.log(2.0)
        + math.log(spec.z_max)
        - log_surface_area_unit_sphere(spec.n)
        - ((spec.n + 1) / 2.0) * np.log(sq + spec.z_max**2)
    )
    return float(out[0]) if single else out


def sample_beta(alpha: float, beta: float, rng: RngState, count: int | None = None):
    """Beta(alpha, beta) variates via the two-gamma construction."""
    if alpha <= 0 or beta <= 0:
        raise ValueError(f"shape parameters must be positive, got {alpha}, {beta}")
    gen = rng.generator()
    shape = () if count is None else (count,)
    g1 = gen.standard_gamma(alpha, shape)
    g2 = gen.standard_gamma(beta, shape)
    out = g1 / (g1 + g2)
    return float(out) if count is None else out


def sample_radius(spec: PriorSpec, rng: RngState, count: int) -> np.ndarray:
    """Radii |x| distributed as R^(N-1) / (R^2 + z_max^2)^((N+1)/2) (unnormalized)."""
    r1 = sample_beta(spec.n / 2.0, 0.5, rng, count)
    # Guard the measure-zero r1 == 1 draw that the float division would blow up.
    r1 = np.minimum(np.asarray(r1), 1.0 - 1e-16)
    r2 = r1 / (1.0 - r1)
    return spec.z_max * np.sqrt(r2)


def sample_prior(spec: PriorSpec, rng: RngState, count: int | None = None) -> np.ndarray:
    """Exact prior draws on the z = z_max hyperplane; shape (count, N).

    When ``norm_clip`` is set, draws with |x| outside (0, norm_clip) are
    rejected and redrawn, restricting the support without reshaping the
    interior of the distribution.
    """
    single = count is None
    m = 1 if single else count
    radii = sample_radius(spec, rng, m)
    if spec.norm_clip is not None:
        attempt = 1
        bad = radii >= spec.norm_clip
        while np.any(bad):
            radii[bad] = sample_radius(spec, rng.child(attempt), int(bad.sum()))
            bad = radii >= spec.norm_clip
            attempt += 1
            if attempt > 10_000:
                raise RuntimeError("norm_clip rejection loop failed to terminate")
    directions = sample_unit_vector(spec.n, rng.child(0), m)
    out = radii[:, None] * directions
    return out[0] if single else out
