"""Statistical end-to-end checks of the flow's defining properties.

These procedures drive the exact empirical field (no training involved unless
a model is passed in) and reduce each physics claim to a scalar statistic
with an explicit threshold: forward escape directions must be uniform on the
far hemisphere, backward samples must recover the source distribution, far
test particles must hit discrete charges in proportion to their charge, and
so on.  Each check returns a serializable :class:`TestReport`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, stats
from .model import ExactEmpiricalField
from .ode import (
    BatchResult,
    OdeConfig,
    OdeRun,
    escape_to_radius_batch,
    forward_latents_batch,
    integrate_backward,
    integrate_forward,
    sample_backward_batch,
)
from .prior import PriorSpec, sample_prior
from .rng import RngState


@dataclass
class TestReport:
    """One verification outcome: statistic vs threshold plus context."""

    name: str
    statistic: float
    threshold: float
    passed: bool
    samples_used: int
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "pass": self.passed,
            "samples_used": self.samples_used,
            "details": _jsonable(self.details),
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# --- scalar statistics ---


def ks_statistic(samples: np.ndarray, cdf) -> float:
    """One-sample Kolmogorov-Smirnov distance sup |F_emp - F|."""
    s = np.sort(np.asarray(samples, dtype=float))
    n = s.size
    if n == 0:
        raise ValueError("need at least one sample")
    f = np.asarray(cdf(s), dtype=float)
    upper = np.max(np.arange(1, n + 1) / n - f)
    lower = np.max(f - np.arange(0, n) / n)
    return float(max(upper, lower))


def ks_uniformity_threshold(count: int, alpha_factor: float = 1.63) -> float:
    """Critical KS value c/sqrt(n); the default factor is the ~1% level."""
    return alpha_factor / math.sqrt(count)


def _mean_cross_distance(x: np.ndarray, y: np.ndarray, chunk: int = 512) -> float:
    total = 0.0
    for lo in range(0, x.shape[0], chunk):
        d = np.linalg.norm(x[lo : lo + chunk, None, :] - y[None, :, :], axis=2)
        total += d.sum()
    return total / (x.shape[0] * y.shape[0])


def _mean_within_distance(x: np.ndarray, chunk: int = 512) -> float:
    n = x.shape[0]
    total = 0.0
    for lo in range(0, n, chunk):
        d = np.linalg.norm(x[lo : lo + chunk, None, :] - x[None, :, :], axis=2)
        total += d.sum()
    return total / (n * (n - 1))  # off-diagonal mean


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased two-sample energy statistic 2 E|X-Y| - E|X-X'| - E|Y-Y'|.

    Zero in expectation when both samples share a distribution; positive
    otherwise (it is the square of a metric between distributions).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    return float(
        2.0 * _mean_cross_distance(x, y) - _mean_within_distance(x) - _mean_within_distance(y)
    )


def w2_1d(a: np.ndarray, b: np.ndarray, grid: int = 2000) -> float:
    """Wasserstein-2 distance between 1-D samples via quantile matching."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == b.size:
        return float(np.sqrt(np.mean((a - b) ** 2)))
    q = (np.arange(grid) + 0.5) / grid
    qa = np.quantile(a, q)
    qb = np.quantile(b, q)
    return float(np.sqrt(np.mean((qa - qb) ** 2)))


def calibrate_two_subset_threshold(
    pool: np.ndarray, size_a: int, size_b: int, reps: int, rng: RngState,
    quantile: float = 0.99,
) -> float:
    """Null scale of the energy statistic: ``quantile`` of its distribution
    over disjoint same-source subsets of the given sizes."""
    pool = np.asarray(pool, dtype=float)
    if size_a + size_b > pool.shape[0]:
        raise ValueError("pool too small for disjoint subsets of the requested sizes")
    gen = rng.generator()
    vals = np.empty(reps)
    for r in range(reps):
        idx = gen.choice(pool.shape[0], size=size_a + size_b, replace=False)
        vals[r] = energy_distance(pool[idx[:size_a]], pool[idx[size_a:]])
    return float(np.quantile(vals, quantile))


# --- multipole validity ratio ---


def kappa(q_norm: float, mean_sq_norm: float, n: int) -> float:
    """Point-source validity ratio 2 |y|^2 / (sqrt(N) E|x|^2)."""
    if mean_sq_norm <= 0 or n < 1:
        raise ValueError("mean_sq_norm must be positive and n >= 1")
    return 2.0 * q_norm**2 / (math.sqrt(n) * mean_sq_norm)


def kappa_zone(k: float) -> str:
    """far / intermediate / near classification for the ratio kappa."""
    if k > 100.0:
        return "far"
    if k < 0.01:
        return "near"
    return "intermediate"


# --- hemisphere crossing uniformity (forward direction of the main theorem) ---


def polar_cos_cdf(c: np.ndarray, n: int) -> np.ndarray:
    """CDF of cos(polar angle) under the uniform law on the upper hemisphere
    of S^N in R^(N+1); density proportional to (1 - c^2)^((N-2)/2) on [0, 1]."""
    c = np.clip(np.asarray(c, dtype=float), 0.0, 1.0)
    if n == 2:
        return c
    if n == 3:
        return (c * np.sqrt(1.0 - c**2) + np.arcsin(c)) / (math.pi / 2.0)
    raise ValueError(f"analytic polar CDF available for N in (2, 3), got {n}")


def typical_spacing(d: Dataset, rng: RngState, probes: int = 512) -> float:
    """Median nearest-neighbor distance, estimated from a probe subset."""
    gen = rng.generator()
    k = min(probes, d.count)
    idx = gen.choice(d.count, size=k, replace=False)
    nn = np.empty(k)
    for j, i in enumerate(idx):
        dist = np.linalg.norm(d.points - d.points[i], axis=1)
        dist[i] = np.inf
        nn[j] = dist.min()
    return float(np.median(nn))


def theorem1_uniformity(
    d: Dataset,
    r: float,
    count: int,
    rng: RngState,
    threshold: float | None = None,
    start_delta: float | None = None,
    rk45_tol: float = 1e-6,
) -> TestReport:
    """Forward-escape uniformity: release particles just off the sources,
    follow the exact field to the sphere of radius r, and KS-test the
    crossings against the uniform hemisphere law (polar cosine marginal and
    azimuth).

    The starts are isotropic upper-half-sphere displacements of radius
    ``start_delta`` around data points, i.e. a small perturbation of the
    source distribution itself.
    """
    ds = stats(d)
    if r < 1e3 * ds.max_norm:
        k = kappa(r, ds.mean_sq_norm, d.dim.n)
        raise ValueError(
            f"crossing radius {r} is not in the deep far zone "
            f"(need r >= 1000 * max_norm = {1e3 * ds.max_norm:.3g}; kappa={k:.3g})"
        )
    n = d.dim.n
    if threshold is None:
        threshold = ks_uniformity_threshold(count)
    if start_delta is None:
        start_delta = 0.25 * typical_spacing(d, rng.child(17))
    gen = rng.generator()
    src = gen.integers(0, d.count, count)
    omega = gen.standard_normal((count, n + 1))
    omega[:, -1] = np.abs(omega[:, -1])
    omega /= np.linalg.norm(omega, axis=1, keepdims=True)
    starts_x = d.points[src] + start_delta * omega[:, :n]
    starts_z = start_delta * omega[:, n]
    model = ExactEmpiricalField(d, gamma=0.0)
    cfg = OdeConfig(
        z_max=2.0 * r, z_min=1e-12, solver="rk45",
        rk45_atol=rk45_tol, rk45_rtol=rk45_tol, z_sub_threshold=0.0,
    )
    crossings, batch = escape_to_radius_batch(starts_x, starts_z, model, cfg, r)
    ok = batch.ok
    cross = crossings[ok]
    cos_polar = cross[:, n] / r
    azimuth = np.arctan2(cross[:, 1], cross[:, 0])
    ks_polar = ks_statistic(cos_polar, lambda c: polar_cos_cdf(c, n))
    ks_azimuth = ks_statistic(azimuth, lambda p: (p + math.pi) / (2.0 * math.pi))
    statistic = max(ks_polar, ks_azimuth)
    return TestReport(
        name="theorem1_uniformity",
        statistic=statistic,
        threshold=threshold,
        passed=bool(statistic < threshold and ok.all()),
        samples_used=int(ok.sum()),
        details={
            "ks_polar": ks_polar,
            "ks_azimuth": ks_azimuth,
            "radius": r,
            "start_delta": start_delta,
            "failed_trajectories": int((~ok).sum()),
            "mean_nfe": float(batch.nfe.mean()),
        },
    )


def backward_recovery(
    d: Dataset,
    cfg: OdeConfig,
    count: int,
    rng: RngState,
    holdout: Dataset | None = None,
    model=None,
    calibration_reps: int = 60,
    threshold: float | None = None,
    norm_clip: float | None = None,
) -> TestReport:
    """Generative check: prior draws integrated backward must be statistically
    indistinguishable (energy distance) from held-out source data.

    Without an explicit ``holdout``, the dataset is split in half: the first
    half powers the exact field, the second is the comparison set.  The pass
    threshold defaults to the 99th percentile of the statistic between
    disjoint true-data subsets of the same sizes.
    """
    if holdout is None:
        half = d.count // 2
        field_data = Dataset(points=d.points[:half])
        holdout = Dataset(points=d.points[half:])
    else:
        field_data = d
    if model is None:
        model = ExactEmpiricalField(field_data, gamma=cfg.gamma)
    spec = PriorSpec(z_max=cfg.z_max, n=d.dim.n, norm_clip=norm_clip)
    x0 = sample_prior(spec, rng.child(0), count)
    result = sample_backward_batch(x0, model, cfg)
    generated = result.x[result.ok]
    m = min(generated.shape[0], holdout.count)
    statistic = energy_distance(generated[:m], holdout.points[:m])
    if threshold is None:
        pool = np.concatenate([field_data.points, holdout.points])
        threshold = calibrate_two_subset_threshold(
            pool, m, m, calibration_reps, rng.child(1)
        )
    return TestReport(
        name="backward_recovery",
        statistic=statistic,
        threshold=threshold,
        passed=bool(statistic < threshold and result.ok.all()),
        samples_used=int(m),
        details={
            "failed_trajectories": int((~result.ok).sum()),
            "mean_nfe": float(result.nfe.mean()),
            "solver": cfg.solver,
            "z_max": cfg.z_max,
            "z_min": cfg.z_min,
        },
    )


def hit_probability_report(
    charges: Dataset,
    count: int,
    r_start: float,
    eps_hit: float,
    rng: RngState,
    tolerance: float | None = None,
) -> TestReport:
    """Monte-Carlo check of the |q_i| / |Q| hit law for discrete charges."""
    from .ode import hit_particles

    report = hit_particles(charges, count, r_start, eps_hit, rng)
    q = charges.effective_charges()
    expected = q / q.sum()
    freq = report.frequencies
    statistic = float(np.max(np.abs(freq - expected)))
    if tolerance is None:
        # three-sigma binomial noise on the largest-variance component
        p = float(expected.max())
        tolerance = 3.0 * math.sqrt(p * (1 - p) / count)
    lost_ok = report.lost < 0.001 * count
    return TestReport(
        name="hit_probability",
        statistic=statistic,
        threshold=tolerance,
        passed=bool(statistic < tolerance and lost_ok),
        samples_used=count,
        details={
            "frequencies": freq,
            "expected": expected,
            "lost": report.lost,
            "counts": report.counts,
        },
    )


def norm_z_diagnostic(runs: list[OdeRun], bins: int = 20) -> TestReport:
    """Collect the (|x|, z) relation across trajectories into log-z bins.

    The pass criterion is structural only: every bin between the global z
    extremes is populated and the per-bin spread is finite.  The bin table
    (for plotting or CSV export) is returned in the details.
    """
    if not runs:
        raise ValueError("need at least one trajectory")
    zs = np.concatenate([run.trajectory[:, -2] for run in runs])
    norms = np.concatenate([run.trajectory[:, -1] for run in runs])
    monotone = all(
        np.all(np.diff(run.trajectory[:, 0]) > 0) or np.all(np.diff(run.trajectory[:, 0]) < 0)
        for run in runs
        if run.trajectory.shape[0] > 1
    )
    edges = np.exp(np.linspace(np.log(zs.min()), np.log(zs.max()), bins + 1))
    edges[-1] *= 1.0 + 1e-12
    idx = np.clip(np.digitize(zs, edges) - 1, 0, bins - 1)
    mean = np.zeros(bins)
    std = np.zeros(bins)
    count = np.zeros(bins, dtype=int)
    for b in range(bins):
        sel = idx == b
        count[b] = int(sel.sum())
        if count[b]:
            mean[b] = norms[sel].mean()
            std[b] = norms[sel].std()
    populated = bool(np.all(count > 0))
    finite = bool(np.all(np.isfinite(mean)) and np.all(np.isfinite(std)))
    passed = populated and finite and monotone
    return TestReport(
        name="norm_z_diagnostic",
        statistic=float(count.min()),
        threshold=1.0,
        passed=passed,
        samples_used=int(zs.size),
        details={
            "z_bin_low": edges[:-1],
            "z_bin_high": edges[1:],
            "norm_mean": mean,
            "norm_std": std,
            "bin_count": count,
            "monotone_time": monotone,
        },
    )


def interpolate(
    a: np.ndarray, b: np.ndarray, steps: int, model, cfg: OdeConfig
) -> list[np.ndarray]:
    """Spherical path between two points through the latent hyperplane.

    Both endpoints are forward-mapped to z = z_max; the latent direction is
    slerped, the latent norm blended linearly (the prior is isotropic, so the
    direction carries the geometry and the norm the scale), and every
    interpolant is mapped back through the backward ODE.
    """
    if steps < 2:
        raise ValueError("need at least the two endpoints")
    latents = forward_latents_batch(np.stack([a, b]), model, cfg)
    if not latents.ok.all():
        raise RuntimeError(f"forward map failed: {latents.errors}")
    la, lb = latents.x
    na, nb = np.linalg.norm(la), np.linalg.norm(lb)
    ua, ub = la / na, lb / nb
    cos_angle = float(np.clip(ua @ ub, -1.0, 1.0))
    angle = math.acos(cos_angle)
    ws = np.linspace(0.0, 1.0, steps)
    dirs = []
    for w in ws:
        if angle < 1e-12:
            direction = ua
        else:
            direction = (
                math.sin((1 - w) * angle) * ua + math.sin(w * angle) * ub
            ) / math.sin(angle)
        dirs.append(direction / np.linalg.norm(direction))
    norms = (1 - ws) * na + ws * nb
    way = np.stack([n * u for n, u in zip(norms, dirs)])
    back = sample_backward_batch(way, model, cfg)
    if not back.ok.all():
        raise RuntimeError(f"backward map failed: {back.errors}")
    return [row for row in back.x]
