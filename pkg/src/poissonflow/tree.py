"""Hierarchical far-field acceleration of the augmented kernel sum.

Sources are bucketed in a 2^(N+1)-ary space partition.  A node far enough
from the query (cell diagonal / distance < opening angle) is collapsed onto
its charge-weighted centroid; because the centroid kills the dipole moment,
the node's second-moment matrix supplies the next nonvanishing correction,
which keeps the relative error of accepted nodes a couple of orders below
the bare point-source approximation.  With opening angle 0 every node is
refused and the evaluation degenerates to the exact sum over leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .field import COINCIDENCE_TOL, augment
from .geometry import SingularityError

_MAX_DEPTH = 48


@dataclass
class _Node:
    center: np.ndarray          # cube center
    half: float                 # half side length
    charge: float = 0.0
    centroid: np.ndarray | None = None
    second_moment: np.ndarray | None = None  # sum_i q_i (x_i - centroid)(x_i - centroid)^T
    children: list["_Node"] = field(default_factory=list)
    leaf_indices: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def diameter(self) -> float:
        return 2.0 * self.half * np.sqrt(self.center.shape[0])


@dataclass
class TreeCode:
    """Immutable spatial index over the augmented sources of one dataset."""

    root: _Node
    sources: np.ndarray
    charges: np.ndarray
    opening_angle: float
    leaf_capacity: int
    kernel_power: int  # N+1 for the augmented kernel


def _build_node(
    pts: np.ndarray, charges: np.ndarray, idx: np.ndarray,
    center: np.ndarray, half: float, leaf_capacity: int, depth: int,
) -> _Node:
    node = _Node(center=center, half=half)
    sub = pts[idx]
    q = charges[idx]
    node.charge = float(q.sum())
    centroid = (q[:, None] * sub).sum(axis=0) / node.charge
    node.centroid = centroid
    delta = sub - centroid
    node.second_moment = (q[:, None] * delta).T @ delta
    if len(idx) <= leaf_capacity or depth >= _MAX_DEPTH:
        node.leaf_indices = idx
        return node
    dim = pts.shape[1]
    # Octant index of each point: one bit per axis.
    above = sub > center
    codes = above @ (1 << np.arange(dim))
    for code in np.unique(codes):
        child_idx = idx[codes == code]
        offsets = np.array([(code >> a) & 1 for a in range(dim)], dtype=float)
        child_center = center + (offsets - 0.5) * half
        node.children.append(
            _build_node(pts, charges, child_idx, child_center, half / 2.0,
                        leaf_capacity, depth + 1)
        )
    return node


def build_tree(d: Dataset, leaf_capacity: int = 16, theta: float = 0.5) -> TreeCode:
    """Index the augmented sources of ``d`` for evaluation at opening angle theta."""
    if theta < 0:
        raise ValueError(f"opening angle must be nonnegative, got {theta}")
    if leaf_capacity < 1:
        raise ValueError(f"leaf capacity must be >= 1, got {leaf_capacity}")
    sources = augment(d.points)
    charges = d.effective_charges()
    lo = sources.min(axis=0)
    hi = sources.max(axis=0)
    center = (lo + hi) / 2.0
    half = float(max((hi - lo).max() / 2.0, COINCIDENCE_TOL))
    root = _build_node(
        sources, charges, np.arange(sources.shape[0]), center, half, leaf_capacity, 0
    )
    return TreeCode(
        root=root, sources=sources, charges=charges,
        opening_angle=theta, leaf_capacity=leaf_capacity, kernel_power=d.dim.aug,
    )


def _node_far_field(node: _Node, rvec: np.ndarray, r2: float, p: int) -> np.ndarray:
    """Centroid monopole plus second-moment correction for one accepted node."""
    r = np.sqrt(r2)
    mono = node.charge * rvec / r**p
    s = node.second_moment
    sr = s @ rvec
    quad = 0.5 * (
        -p * (2.0 * sr + np.trace(s) * rvec) / r ** (p + 2)
        + p * (p + 2) * (rvec @ sr) * rvec / r ** (p + 4)
    )
    return mono + quad


def tree_field(query: np.ndarray, tree: TreeCode, theta: float | None = None) -> np.ndarray:
    """Approximate sum_i q_i (x~ - x~_i)/|x~ - x~_i|^(N+1) at one augmented query."""
    theta = tree.opening_angle if theta is None else theta
    q = np.asarray(query, dtype=float)
    if q.shape != (tree.sources.shape[1],):
        raise ValueError(f"query must have {tree.sources.shape[1]} components, got {q.shape}")
    p = tree.kernel_power
    total = np.zeros_like(q)
    stack = [tree.root]
    while stack:
        node = stack.pop()
        rvec = q - node.centroid
        r2 = float(rvec @ rvec)
        if node.is_leaf:
            diff = q - tree.sources[node.leaf_indices]
            dist = np.linalg.norm(diff, axis=1)
            if np.any(dist < COINCIDENCE_TOL):
                local = int(dist.argmin())
                raise SingularityError(
                    "query coincides with a source",
                    index=int(node.leaf_indices[local]),
                )
            kern = tree.charges[node.leaf_indices] * dist ** (-p)
            total += kern @ diff
        elif node.diameter**2 < theta**2 * r2:
            total += _node_far_field(node, rvec, r2, p)
        else:
            stack.extend(node.children)
    return total


def tree_field_batch(queries: np.ndarray, tree: TreeCode, theta: float | None = None) -> np.ndarray:
    """Row-wise :func:`tree_field`; intended for moderate query counts."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    return np.stack([tree_field(q, tree, theta) for q in queries])
