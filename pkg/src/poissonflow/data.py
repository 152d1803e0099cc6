"""Toy datasets, CSV persistence, and the summary moments used by the
hyper-parameter rules.

All generators produce bounded supports (Gaussian mixtures are truncated at
three standard deviations), since the field theory behind the sampler assumes
compactly supported sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Dim
from .rng import RngState

TOY_NAMES = ("heart", "disk", "gaussians", "checkerboard")


class CsvFormatError(ValueError):
    """Malformed dataset CSV; carries the 1-based offending row."""

    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of N-dimensional source points.

    ``charges`` are optional positive weights (default: every point carries
    unit charge); ``centered`` records that the per-coordinate mean has been
    removed.
    """

    points: np.ndarray
    charges: np.ndarray | None = None
    centered: bool = False

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise ValueError(f"points must be a nonempty (count, dim) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.charges is not None:
            ch = np.asarray(self.charges, dtype=float)
            if ch.shape != (pts.shape[0],):
                raise ValueError(
                    f"charges must have one entry per point, got {ch.shape} for {pts.shape[0]} points"
                )
            if not np.all(ch > 0):
                raise ValueError("charges must be strictly positive")
            ch = ch.copy()
            ch.setflags(write=False)
            object.__setattr__(self, "charges", ch)
        if self.centered:
            mean = np.abs(pts.mean(axis=0)).max()
            if mean > 1e-9:
                raise ValueError(f"dataset marked centered but coordinate mean is {mean:.3e}")

    @property
    def dim(self) -> Dim:
        return Dim(self.points.shape[1])

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def effective_charges(self) -> np.ndarray:
        if self.charges is not None:
            return self.charges
        return np.ones(self.count)


@dataclass(frozen=True)
class DatasetStats:
    """Sample moments consumed by the rule-of-thumb hyper-parameter formulas."""

    mean_sq_norm: float
    max_norm: float
    count: int

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.mean_sq_norm < 0 or self.max_norm < 0:
            raise ValueError("moments must be nonnegative")
        if self.mean_sq_norm > self.max_norm**2 * (1 + 1e-12):
            raise ValueError("mean_sq_norm cannot exceed max_norm^2")


def stats(d: Dataset) -> DatasetStats:
    norms_sq = np.sum(d.points**2, axis=1)
    return DatasetStats(
        mean_sq_norm=float(norms_sq.mean()),
        max_norm=float(np.sqrt(norms_sq.max())),
        count=d.count,
    )


def center(d: Dataset) -> Dataset:
    """Shift the points so every coordinate has zero mean; charges are kept."""
    shifted = d.points - d.points.mean(axis=0)
    # One more pass kills the O(eps * |mean|) residue of the first subtraction.
    shifted = shifted - shifted.mean(axis=0)
    return Dataset(points=shifted, charges=d.charges, centered=True)


# --- toy generators (all 2-dimensional, all bounded) ---


def _disk(count: int, gen: np.random.Generator, radius: float = 1.0) -> np.ndarray:
    r = radius * np.sqrt(gen.uniform(0.0, 1.0, count))
    theta = gen.uniform(0.0, 2.0 * np.pi, count)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def heart_region(xy: np.ndarray) -> np.ndarray:
    """Boolean mask of the implicit heart region x^2 + (y - |x|^(2/3))^2 <= 1."""
    x, y = xy[:, 0], xy[:, 1]
    return x**2 + (y - np.abs(x) ** (2.0 / 3.0)) ** 2 <= 1.0

HEART_BOX = ((-1.0, 1.0), (-1.0, 2.0))  # bounding box of the region above


def _heart(count: int, gen: np.random.Generator) -> np.ndarray:
    (x_lo, x_hi), (y_lo, y_hi) = HEART_BOX
    out = np.empty((0, 2))
    while out.shape[0] < count:
        cand = np.stack(
            [gen.uniform(x_lo, x_hi, 2 * count), gen.uniform(y_lo, y_hi, 2 * count)], axis=1
        )
        out = np.concatenate([out, cand[heart_region(cand)]])
    return out[:count]


GAUSSIANS_CENTERS = np.array([[1.5, 1.5], [-1.5, 1.5], [-1.5, -1.5], [1.5, -1.5]])
GAUSSIANS_SIGMA = 0.3


def _gaussians(count: int, gen: np.random.Generator) -> np.ndarray:
    comp = gen.integers(0, len(GAUSSIANS_CENTERS), count)
    # Truncate each component at 3 sigma so the support stays compact.
    eps = gen.standard_normal((count, 2))
    norms = np.linalg.norm(eps, axis=1)
    while np.any(norms > 3.0):
        bad = norms > 3.0
        eps[bad] = gen.standard_normal((int(bad.sum()), 2))
        norms = np.linalg.norm(eps, axis=1)
    return GAUSSIANS_CENTERS[comp] + GAUSSIANS_SIGMA * eps


def _checkerboard(count: int, gen: np.random.Generator) -> np.ndarray:
    # Uniform over the black cells of a 4x4 board covering [-2, 2]^2.
    pts = np.empty((count, 2))
    filled = 0
    while filled < count:
        cand = gen.uniform(-2.0, 2.0, (2 * count, 2))
        ij = np.floor(cand + 2.0).astype(int)
        keep = (ij[:, 0] + ij[:, 1]) % 2 == 0
        take = min(count - filled, int(keep.sum()))
        pts[filled : filled + take] = cand[keep][:take]
        filled += take
    return pts


def generate_toy(name: str, count: int, rng: RngState, radius: float = 1.0) -> Dataset:
    """Draw ``count`` points from one of the built-in 2D toy distributions."""
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    gen = rng.generator()
    if name == "disk":
        pts = _disk(count, gen, radius)
    elif name == "heart":
        pts = _heart(count, gen)
    elif name == "gaussians":
        pts = _gaussians(count, gen)
    elif name == "checkerboard":
        pts = _checkerboard(count, gen)
    else:
        raise ValueError(f"unknown toy dataset {name!r}; choose from {TOY_NAMES}")
    return Dataset(points=pts)


# --- CSV wire format: one point per row, '.' decimals, optional charge column ---


def save_csv(d: Dataset, path: str, with_charges: bool = False, header: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            cols = [f"x{i}" for i in range(d.dim.n)]
            if with_charges:
                cols.append("charge")
            fh.write(",".join(cols) + "\n")
        charges = d.effective_charges() if with_charges else None
        for i, row in enumerate(d.points):
            cells = [repr(float(v)) for v in row]
            if charges is not None:
                cells.append(repr(float(charges[i])))
            fh.write(",".join(cells) + "\n")


def load_csv(path: str, with_charges: bool = False, header: bool = False) -> Dataset:
    rows: list[list[float]] = []
    width: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if header and lineno == 1:
                continue
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
                min_width = 2 if with_charges else 1
                if width < min_width:
                    raise CsvFormatError(f"expected at least {min_width} columns", lineno)
            elif len(cells) != width:
                raise CsvFormatError(
                    f"expected {width} columns, found {len(cells)}", lineno
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise CsvFormatError(f"non-numeric field in {cells!r}", lineno) from None
    if not rows:
        raise CsvFormatError("file contains no data rows", 1)
    arr = np.asarray(rows)
    if with_charges:
        charges = arr[:, -1]
        if np.any(charges <= 0):
            bad = int(np.nonzero(charges <= 0)[0][0]) + 1 + (1 if header else 0)
            raise CsvFormatError(f"charge must be positive, got {charges.min()}", bad)
        return Dataset(points=arr[:, :-1], charges=charges)
    return Dataset(points=arr)
