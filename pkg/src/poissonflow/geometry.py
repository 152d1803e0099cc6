"""Dimension-generic sphere constants, Coulomb-type kernels, and base samplers.

Conventions: ``surface_area_unit_sphere(n)`` measures the n-sphere
S_n = {x in R^(n+1) : |x| = 1}, so the unit circle is S_1 and the ordinary
sphere is S_2.  The potential/gradient kernels live in ambient dimension
``n >= 3``; data in 2 dimensions is only ever queried through the augmented
space where the ambient dimension is at least 3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import RngState


@dataclass(frozen=True)
class Dim:
    """Data dimension N together with the augmented dimension N + 1."""

    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"data dimension must be >= 1, got {self.n}")

    @property
    def aug(self) -> int:
        return self.n + 1


class DomainError(ValueError):
    """Arguments outside the mathematical domain of an operation."""


class SingularityError(ValueError):
    """A kernel or field was evaluated exactly at one of its sources."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


def surface_area_unit_sphere(n: int) -> float:
    """Surface area of S_n(1), the unit sphere in R^(n+1).

    S_n(1) = 2 pi^((n+1)/2) / Gamma((n+1)/2); e.g. S_1 = 2*pi, S_2 = 4*pi.
    """
    if n < 1:
        raise DomainError(f"sphere dimension must be >= 1, got {n}")
    return 2.0 * math.pi ** ((n + 1) / 2) / math.gamma((n + 1) / 2)


def log_surface_area_unit_sphere(n: int) -> float:
    """log S_n(1), stable for large n where S_n itself underflows."""
    if n < 1:
        raise DomainError(f"sphere dimension must be >= 1, got {n}")
    return math.log(2.0) + ((n + 1) / 2) * math.log(math.pi) - math.lgamma((n + 1) / 2)


def _check_pair(x: np.ndarray, y: np.ndarray, n: int) -> float:
    if n < 3:
        raise DomainError(f"kernel requires ambient dimension >= 3, got {n}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (n,) or y.shape != (n,):
        raise DomainError(f"expected two vectors of length {n}, got {x.shape} and {y.shape}")
    dist = float(np.linalg.norm(x - y))
    if dist == 0.0:
        raise SingularityError("kernel evaluated at its own source point")
    return dist


def greens_potential(x: np.ndarray, y: np.ndarray, n: int) -> float:
    """Free-space potential kernel G(x, y) = 1 / ((n-2) S_{n-1}(1) |x-y|^(n-2)).

    This is the fundamental solution of the n-dimensional Laplacian with zero
    boundary condition at infinity (n >= 3; the planar log kernel is out of
    scope here).
    """
    dist = _check_pair(x, y, n)
    return 1.0 / ((n - 2) * surface_area_unit_sphere(n - 1) * dist ** (n - 2))


def greens_gradient(x: np.ndarray, y: np.ndarray, n: int) -> np.ndarray:
    """Gradient of the potential kernel with respect to x.

    grad_x G(x, y) = -(1 / S_{n-1}(1)) (x - y) / |x-y|^n, antiparallel to x - y.
    """
    dist = _check_pair(x, y, n)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return -(x - y) / (surface_area_unit_sphere(n - 1) * dist**n)


def sample_unit_vector(dim: int, rng: RngState, count: int | None = None) -> np.ndarray:
    """Uniform direction(s) on the unit sphere of R^dim, via normalized Gaussians."""
    if dim < 1:
        raise DomainError(f"need dim >= 1, got {dim}")
    gen = rng.generator()
    shape = (dim,) if count is None else (count, dim)
    g = gen.standard_normal(shape)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    # A zero draw has probability 0; regenerate defensively if it ever happens.
    while np.any(norms == 0.0):
        bad = np.nonzero(norms[..., 0] == 0.0)
        g[bad] = gen.standard_normal((len(bad[0]), dim))
        norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norms


def sample_unit_sphere(n: int, rng: RngState, count: int | None = None) -> np.ndarray:
    """Uniform point(s) on S_n(1), i.e. unit vectors in R^(n+1)."""
    if n < 1:
        raise DomainError(f"sphere dimension must be >= 1, got {n}")
    return sample_unit_vector(n + 1, rng, count)


def sample_gaussian(
    dim: int, sigma: float, rng: RngState, count: int | None = None
) -> np.ndarray:
    """I.i.d. N(0, sigma^2) vector(s) of length dim."""
    if dim < 1:
        raise DomainError(f"need dim >= 1, got {dim}")
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    shape = (dim,) if count is None else (count, dim)
    return rng.generator().normal(0.0, sigma, shape)
