"""Empirical source fields in the augmented space.

Data points x_i in R^N are lifted to x~_i = (x_i, 0) in R^(N+1).  The
empirical field at a query x~ is the stabilized sum

    E^(x~) = c(x~) * sum_i q_i (x~ - x~_i) / |x~ - x~_i|^(N+1),
    c(x~)  = 1 / sum_i q_i |x~ - x~_i|^(-(N+1)),

i.e. a convex combination sum_i w_i (x~ - x~_i) with weights
w_i ∝ q_i |x~ - x~_i|^(-(N+1)).  Its z-component therefore equals z exactly
whenever the sources sit on the z = 0 plane.  The regression target for the
neural approximator is the negative normalized field

    v(x~) = -sqrt(N) E^(x~) / (|E^(x~)| + gamma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .geometry import SingularityError

# Queries closer than this to a source are a caller bug, not a near-field case.
COINCIDENCE_TOL = 1e-12

# Cap on the number of query-source distance entries held in memory at once.
_CHUNK_BUDGET = 4_000_000


@dataclass(frozen=True)
class AugmentedPoint:
    """A data-space vector x paired with the augmentation coordinate z."""

    x: np.ndarray
    z: float

    def __post_init__(self) -> None:
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if x.ndim != 1:
            raise ValueError(f"x must be a vector, got shape {x.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", float(self.z))

    def vector(self) -> np.ndarray:
        """The point as a single (N+1)-vector (x, z)."""
        return np.append(self.x, self.z)


@dataclass(frozen=True)
class FieldEstimate:
    """Raw empirical field and its negative normalized form at one query."""

    e_hat: np.ndarray
    v: np.ndarray
    stabilizer: float


def augment(points: np.ndarray) -> np.ndarray:
    """Lift (count, N) data points onto the z = 0 plane of R^(N+1)."""
    points = np.asarray(points, dtype=float)
    return np.concatenate([points, np.zeros((points.shape[0], 1))], axis=1)


def _query_matrix(queries: np.ndarray, aug: int) -> tuple[np.ndarray, bool]:
    q = np.asarray(queries, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != aug:
        raise ValueError(f"queries must have {aug} components, got {q.shape[1]}")
    return q, single


def _half_power(t: np.ndarray, p: int) -> np.ndarray:
    """t ** (p / 2) for integer p, staying on fast integer/sqrt paths."""
    if p % 2 == 0:
        return t ** (p // 2)
    return t ** ((p - 1) // 2) * np.sqrt(t)


def _pairwise_sq_dists(q: np.ndarray, sources: np.ndarray) -> np.ndarray:
    # |q - s|^2 via the expanded form; one GEMM instead of an (m, n, aug) cube.
    d2 = np.sum(q**2, axis=1)[:, None] - 2.0 * (q @ sources.T) + np.sum(sources**2, axis=1)
    return np.maximum(d2, 0.0)


def empirical_field_batch(queries: np.ndarray, d: Dataset) -> np.ndarray:
    """Empirical field E^ at each row of ``queries`` (shape (m, N+1))."""
    aug = d.dim.aug
    queries, single = _query_matrix(queries, aug)
    sources = augment(d.points)
    charges = d.effective_charges()
    out = np.empty_like(queries)
    chunk = max(1, _CHUNK_BUDGET // sources.shape[0])
    for lo in range(0, queries.shape[0], chunk):
        out[lo : lo + chunk] = _empirical_chunk(queries[lo : lo + chunk], sources, charges, lo)
    return out[0] if single else out


def _empirical_chunk(
    q: np.ndarray, sources: np.ndarray, charges: np.ndarray, row_offset: int
) -> np.ndarray:
    aug = sources.shape[1]
    d2 = _pairwise_sq_dists(q, sources)  # (m, n)
    d2min = d2.min(axis=1)
    hit = d2min < COINCIDENCE_TOL**2
    if np.any(hit):
        row = int(np.nonzero(hit)[0][0])
        idx = int(d2[row].argmin())
        raise SingularityError(
            f"query {row_offset + row} coincides with source {idx}", index=idx
        )
    # Scale each row by its nearest distance so the kernel powers stay finite.
    kern = _half_power(d2min[:, None] / d2, aug)
    if charges is not None:
        kern = kern * charges[None, :]
    weights = kern / kern.sum(axis=1, keepdims=True)
    # sum_i w_i (q - s_i) = q - W S since the weights sum to one.
    return q - weights @ sources


def empirical_field(q: AugmentedPoint, d: Dataset) -> np.ndarray:
    """Empirical field E^(x~) at a single augmented query."""
    return empirical_field_batch(q.vector(), d)


def normalize_field(e_hat: np.ndarray, n: int, gamma: float) -> np.ndarray:
    """Negative normalized field v = -sqrt(N) e^ / (|e^| + gamma), batched."""
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    e = np.atleast_2d(np.asarray(e_hat, dtype=float))
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if gamma == 0.0 and np.any(norms == 0.0):
        raise ZeroDivisionError("cannot normalize a zero field with gamma = 0")
    v = -np.sqrt(n) * e / (norms + gamma)
    return v[0] if np.asarray(e_hat).ndim == 1 else v


def normalized_field(q: AugmentedPoint, d: Dataset, gamma: float) -> FieldEstimate:
    """Empirical field and its negative normalized form at one query."""
    e_hat = empirical_field(q, d)
    v = normalize_field(e_hat, d.dim.n, gamma)
    return FieldEstimate(e_hat=e_hat, v=v, stabilizer=float(gamma))


def normalized_field_batch(queries: np.ndarray, d: Dataset, gamma: float) -> np.ndarray:
    """Negative normalized field at each row of ``queries``."""
    return normalize_field(empirical_field_batch(queries, d), d.dim.n, gamma)


def unnormalized_field_sum(queries: np.ndarray, d: Dataset) -> np.ndarray:
    """Plain kernel sum sum_i q_i (x~ - x~_i)/|x~ - x~_i|^(N+1), no stabilizer.

    This is the quantity the tree code approximates; it differs from E^ by
    the positive scalar c(x~), so both have the same direction.
    """
    aug = d.dim.aug
    queries, single = _query_matrix(queries, aug)
    sources = augment(d.points)
    charges = d.effective_charges()
    out = np.empty_like(queries)
    chunk = max(1, _CHUNK_BUDGET // sources.shape[0])
    for lo in range(0, queries.shape[0], chunk):
        q = queries[lo : lo + chunk]
        d2 = _pairwise_sq_dists(q, sources)
        if np.any(d2 < COINCIDENCE_TOL**2):
            row, idx = np.unravel_index(int(np.argmin(d2)), d2.shape)
            raise SingularityError(f"query {lo + row} coincides with source {idx}", index=int(idx))
        kern = charges[None, :] / _half_power(d2, aug)
        out[lo : lo + chunk] = kern.sum(axis=1)[:, None] * q - kern @ sources
    return out[0] if single else out


def discrete_charge_field(y: np.ndarray, d: Dataset, sign: float = 1.0) -> np.ndarray:
    """Superposition field of discrete charges in their ambient dimension n:

    E(y) = sign * sum_i q_i (y - x_i) / |y - x_i|^n.
    """
    n = d.dim.n
    if n < 3:
        raise ValueError(f"discrete charge field needs ambient dimension >= 3, got {n}")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    ys = np.atleast_2d(y)
    if ys.shape[1] != n:
        raise ValueError(f"query must have {n} components, got {ys.shape[1]}")
    diff = ys[:, None, :] - d.points[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    if np.any(dist < COINCIDENCE_TOL):
        row, idx = np.unravel_index(int(np.argmin(dist)), dist.shape)
        raise SingularityError(f"query {row} coincides with charge {idx}", index=int(idx))
    kern = d.effective_charges()[None, :] * dist**-n
    out = sign * np.einsum("mn,mnk->mk", kern, diff)
    return out[0] if single else out
