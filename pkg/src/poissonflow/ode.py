"""Anchored forward/backward integration of the field flow.

The sampling ODE evolves (x, z) with the log-height time t' = log z:

    dx/dt' = v_x(x, z) z / v_z(x, z),      dz/dt' = z,  so  z = e^t'.

The z coordinate is never integrated numerically; it is recomputed from t'
analytically, and the Euler scheme uses the exact z increment over each step
(x <- x + (v_x / v_z) (z_next - z_prev)) to cut discretization error.  The
adaptive RK45 (Dormand-Prince 5(4), FSAL) applies its error control to the
x block only, since z is known in closed form.

Backward runs go from t' = log z_max down to log z_min starting at prior
samples; forward runs invert that map, producing the latent representation
on the z = z_max hyperplane.  Because v is a negative multiple of the raw
field, the ratio v_x / v_z is direction-neutral and the same drift serves
both directions.

All batch integrators advance every unfinished trajectory once per round
with its own step size, so the field model always sees large query batches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .field import AugmentedPoint, discrete_charge_field
from .geometry import sample_unit_vector
from .rng import RngState

logger = logging.getLogger(__name__)

SOLVERS = ("euler", "rk45")


class DegenerateFieldError(RuntimeError):
    """The z component of the model field vanished where the drift needs it."""

    def __init__(self, position: np.ndarray, z: float, vx_norm: float):
        super().__init__(
            f"|v_z| below floor at z={z:.3e}, |x|={np.linalg.norm(position):.3e}, "
            f"|v_x|={vx_norm:.3e}"
        )
        self.position = np.asarray(position)
        self.z = z
        self.vx_norm = vx_norm


@dataclass(frozen=True)
class OdeConfig:
    z_max: float
    z_min: float = 1e-3
    solver: str = "rk45"
    euler_steps: int = 100
    rk45_atol: float = 1e-4
    rk45_rtol: float = 1e-4
    z_sub_threshold: float = 0.1
    gamma: float = 0.0
    v_z_floor: float = 1e-8
    max_steps: int = 100_000

    def __post_init__(self) -> None:
        if not (0 < self.z_min < self.z_max):
            raise ValueError(f"need 0 < z_min < z_max, got {self.z_min}, {self.z_max}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.euler_steps < 1:
            raise ValueError("euler_steps must be >= 1")
        if self.rk45_atol <= 0 or self.rk45_rtol <= 0:
            raise ValueError("rk45 tolerances must be positive")
        if self.z_sub_threshold < 0 or self.gamma < 0:
            raise ValueError("z_sub_threshold and gamma must be nonnegative")


@dataclass
class OdeRun:
    """Trajectory record of one integration.

    ``trajectory`` rows are (t', x_1..x_N, z, |x|) at accepted steps; ``nfe``
    counts every field-model evaluation, including rejected RK45 trials.
    """

    trajectory: np.ndarray
    nfe: int
    terminal: AugmentedPoint
    ok: bool = True
    error: str | None = None

    @property
    def n(self) -> int:
        return self.trajectory.shape[1] - 3


@dataclass
class BatchResult:
    """Terminal states of a batch integration, with per-trajectory accounting."""

    x: np.ndarray
    z: np.ndarray
    nfe: np.ndarray
    ok: np.ndarray
    errors: dict[int, str]
    runs: list[OdeRun] | None = None


def substitute_z_direction(v: np.ndarray, z, gamma: float, n: int) -> np.ndarray:
    """Replace the model's predicted v_z by the reconstruction from |v_x|.

    Exploits the identity E^_z = z for plane sources: |E^_x| is recovered from
    the normalized output as gamma (|f_x|/sqrt(N)) / (1 - |f_x|/sqrt(N)), and
    v_z is re-derived as -sqrt(N) z / (sqrt(|E^_x|^2 + z^2) + gamma).  Rows
    with |f_x| >= sqrt(N) are left untouched (logged), since the
    reconstruction denominator would be nonpositive there.
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    out = np.atleast_2d(v).copy()
    zs = np.broadcast_to(np.asarray(z, dtype=float), (out.shape[0],))
    root_n = math.sqrt(n)
    fx_norm = np.linalg.norm(out[:, :-1], axis=1)
    valid = fx_norm < root_n
    if not np.all(valid):
        logger.warning(
            "z-substitution skipped for %d points with |f_x| >= sqrt(N)",
            int((~valid).sum()),
        )
    frac = fx_norm[valid] / root_n
    ex_norm = gamma * frac / (1.0 - frac)
    out[valid, -1] = -root_n * zs[valid] / (np.sqrt(ex_norm**2 + zs[valid] ** 2) + gamma)
    return out[0] if single else out


class _FieldEvaluator:
    """Batched v / drift evaluation with per-row NFE accounting."""

    def __init__(self, model, cfg: OdeConfig, count: int):
        self.model = model
        self.cfg = cfg
        self.gamma = getattr(model, "gamma", cfg.gamma)
        self.substitute = cfg.z_sub_threshold > 0 and not getattr(model, "exact_z", False)
        self.nfe = np.zeros(count, dtype=np.int64)

    def v(self, x: np.ndarray, z: np.ndarray, rows: np.ndarray) -> np.ndarray:
        queries = np.concatenate([x, np.asarray(z, dtype=float)[:, None]], axis=1)
        out = np.asarray(self.model.evaluate_batch(queries), dtype=float)
        np.add.at(self.nfe, rows, 1)  # rows may repeat (finite-difference stencils)
        if self.substitute:
            low = np.asarray(z) < self.cfg.z_sub_threshold
            if np.any(low):
                out[low] = substitute_z_direction(
                    out[low], np.asarray(z)[low], self.gamma, x.shape[1]
                )
        return out

    def ratio(self, x: np.ndarray, z: np.ndarray, rows: np.ndarray):
        """(v_x / v_z, bad_mask): bad rows have |v_z| below floor or non-finite v."""
        v = self.v(x, z, rows)
        vz = v[:, -1]
        bad = (np.abs(vz) < self.cfg.v_z_floor) | ~np.all(np.isfinite(v), axis=1)
        safe_vz = np.where(bad, 1.0, vz)
        return v[:, :-1] / safe_vz[:, None], bad

    def x_rate(self, x: np.ndarray, z: np.ndarray, rows: np.ndarray):
        """(dx/dt' = (v_x/v_z) z, bad_mask)."""
        ratio, bad = self.ratio(x, z, rows)
        return ratio * np.asarray(z)[:, None], bad


def drift(q: AugmentedPoint, model, cfg: OdeConfig | None = None) -> np.ndarray:
    """Instantaneous (dx/dt', dz/dt') at an augmented point; dz/dt' = z exactly."""
    if cfg is None:
        cfg = OdeConfig(z_max=max(2.0 * q.z, 1.0))
    ev = _FieldEvaluator(model, cfg, 1)
    rate, bad = ev.x_rate(q.x[None, :], np.array([q.z]), np.array([0]))
    if bad[0]:
        v = ev.v(q.x[None, :], np.array([q.z]), np.array([0]))[0]
        raise DegenerateFieldError(q.x, q.z, float(np.linalg.norm(v[:-1])))
    return np.append(rate[0], q.z)


# --- Dormand-Prince 5(4) tableau (FSAL) ---

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_ERR = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)


def _chord_norm_crossing(a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    """Point of |p| = radius on the segment a -> b (requires |a| <= radius <= |b|)."""
    d = b - a
    A = float(d @ d)
    if A == 0.0:
        return b
    B = float(a @ d)
    C = float(a @ a) - radius**2
    disc = max(B * B - A * C, 0.0)
    s = (-B + math.sqrt(disc)) / A
    return a + min(max(s, 0.0), 1.0) * d


def _rk45_batch(
    rate_fn,
    x0: np.ndarray,
    t0: np.ndarray,
    t_end: np.ndarray,
    atol: float,
    rtol: float,
    max_steps: int,
    stop_radius: float | None = None,
    record: bool = False,
):
    """Lockstep adaptive RK45 on dx/dt = rate_fn(rows, x, t).

    ``rate_fn`` returns (rates, bad_mask) for the requested rows.  Returns
    (x, t, done, failed, errors, crossings, trajectories).  A flagged or
    non-finite stage evaluation rejects the step (the retry shrinks it);
    trajectories whose step size underflows are marked failed.
    """
    m, n = x0.shape
    x = x0.astype(float).copy()
    t = np.asarray(t0, dtype=float).copy()
    t_end = np.asarray(t_end, dtype=float)
    direction = np.where(t_end >= t, 1.0, -1.0)
    span = float(np.max(np.abs(t_end - t))) or 1.0
    h = direction * np.minimum(0.05, np.abs(t_end - t))
    h_min = 1e-13 * span
    done = np.abs(t_end - t) == 0.0
    failed = np.zeros(m, dtype=bool)
    errors: dict[int, str] = {}
    crossings = np.full((m, n + 1), np.nan) if stop_radius is not None else None
    k1 = np.zeros((m, n))
    have_k1 = np.zeros(m, dtype=bool)
    traj: list[list] | None = None
    if record:
        traj = [[(t[i], x[i].copy())] for i in range(m)]

    rounds = 0
    while True:
        active = np.nonzero(~(done | failed))[0]
        if active.size == 0:
            break
        rounds += 1
        if rounds > max_steps:
            for i in active:
                failed[i] = True
                errors[int(i)] = "step budget exhausted"
            break
        need = active[~have_k1[active]]
        if need.size:
            rate, bad = rate_fn(need, x[need], t[need])
            k1[need] = rate
            have_k1[need] = True
            if np.any(bad):
                for i in need[bad]:
                    failed[i] = True
                    errors[int(i)] = "degenerate field at current state"
                active = np.nonzero(~(done | failed))[0]
                if active.size == 0:
                    continue
        a = active
        h_a = h[a]
        overshoot = (t[a] + h_a - t_end[a]) * direction[a] > 0
        h_a = np.where(overshoot, t_end[a] - t[a], h_a)
        ks = np.zeros((7, a.size, n))
        ks[0] = k1[a]
        stage_ok = np.ones(a.size, dtype=bool)
        for s in range(1, 7):
            xs = x[a] + h_a[:, None] * np.tensordot(_DP_A[s], ks[:s], axes=(0, 0))
            ts = t[a] + _DP_C[s] * h_a
            stage_ok &= np.all(np.isfinite(xs), axis=1)
            rows = np.nonzero(stage_ok)[0]
            if rows.size == 0:
                break
            rate, bad = rate_fn(a[rows], xs[rows], ts[rows])
            ks[s][rows] = rate
            stage_ok[rows[bad]] = False
        x_new = x[a] + h_a[:, None] * np.tensordot(_DP_B5, ks, axes=(0, 0))
        err_vec = h_a[:, None] * np.tensordot(_DP_ERR, ks, axes=(0, 0))
        scale = atol + rtol * np.maximum(np.abs(x[a]), np.abs(x_new))
        with np.errstate(invalid="ignore", divide="ignore"):
            err = np.sqrt(np.mean((err_vec / scale) ** 2, axis=1))
        err = np.where(stage_ok & np.isfinite(err) & np.all(np.isfinite(x_new), axis=1), err, np.inf)
        accept = err <= 1.0
        with np.errstate(divide="ignore"):
            factor = np.where(err > 0, 0.9 * err**-0.2, 5.0)
        factor = np.clip(np.where(np.isfinite(factor), factor, 0.2), 0.2, 5.0)

        acc = np.nonzero(accept)[0]
        if acc.size:
            idx = a[acc]
            x_prev = x[idx].copy()
            t_prev = t[idx].copy()
            x[idx] = x_new[acc]
            t[idx] = t_prev + h_a[acc]
            k1[idx] = ks[6][acc]  # FSAL: last stage is the derivative at the new state
            if record:
                for i in idx:
                    traj[i].append((t[i], x[i].copy()))
            if stop_radius is not None:
                aug_new = np.concatenate([x[idx], np.exp(t[idx])[:, None]], axis=1)
                norms = np.linalg.norm(aug_new, axis=1)
                for j, i in enumerate(idx):
                    if norms[j] >= stop_radius:
                        aug_prev = np.append(x_prev[j], math.exp(t_prev[j]))
                        crossings[i] = _chord_norm_crossing(aug_prev, aug_new[j], stop_radius)
                        done[i] = True
            at_end = np.abs(t[idx] - t_end[idx]) <= 1e-14 * span
            done[idx] |= at_end
        h[a] = np.abs(h_a) * factor * direction[a]
        stuck = (np.abs(h[a]) < h_min) & ~done[a] & ~failed[a]
        for i in a[stuck]:
            failed[i] = True
            errors[int(i)] = "step size underflow"
    return x, t, done, failed, errors, crossings, traj


def _euler_batch(
    ev: _FieldEvaluator, x0: np.ndarray, t_grid: np.ndarray, record: bool = False
):
    """Fixed-grid Euler with the exact z increment per step."""
    m, n = x0.shape
    x = x0.astype(float).copy()
    z_grid = np.exp(t_grid)
    failed = np.zeros(m, dtype=bool)
    errors: dict[int, str] = {}
    all_rows = np.arange(m)
    traj = None
    if record:
        traj = [[(t_grid[0], x[i].copy())] for i in range(m)]
    for k in range(len(t_grid) - 1):
        live = np.nonzero(~failed)[0]
        if live.size == 0:
            break
        z_now = np.full(live.size, z_grid[k])
        ratio, bad = ev.ratio(x[live], z_now, live)
        if np.any(bad):
            for i in live[bad]:
                failed[i] = True
                errors[int(i)] = "degenerate field during Euler step"
            live = live[~bad]
            ratio = ratio[~bad]
        x[live] += ratio * (z_grid[k + 1] - z_grid[k])
        nonfin = ~np.all(np.isfinite(x[live]), axis=1)
        if np.any(nonfin):
            for i in live[nonfin]:
                failed[i] = True
                errors[int(i)] = "non-finite state during Euler step"
        if record:
            for i in live:
                traj[i].append((t_grid[k + 1], x[i].copy()))
    t_fin = np.where(failed, t_grid[0], t_grid[-1])
    return x, t_fin, ~failed, failed, errors, traj


def _make_runs(traj, nfe, ok, errors) -> list[OdeRun]:
    runs = []
    for i, rows in enumerate(traj):
        arr = np.array(
            [np.concatenate(([tv], xv, [math.exp(tv)], [np.linalg.norm(xv)])) for tv, xv in rows]
        )
        t_last, x_last = rows[-1]
        runs.append(
            OdeRun(
                trajectory=arr,
                nfe=int(nfe[i]),
                terminal=AugmentedPoint(x=x_last, z=math.exp(t_last)),
                ok=bool(ok[i]),
                error=errors.get(i),
            )
        )
    return runs


def _integrate_batch(
    x0: np.ndarray, model, cfg: OdeConfig, t_start: float, t_stop: float,
    record: bool = False,
) -> BatchResult:
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    m = x0.shape[0]
    ev = _FieldEvaluator(model, cfg, m)
    if cfg.solver == "euler":
        t_grid = np.linspace(t_start, t_stop, cfg.euler_steps + 1)
        x, t_fin, okmask, failed, errors, traj = _euler_batch(ev, x0, t_grid, record)
    else:
        rate_fn = lambda rows, xs, ts: ev.x_rate(xs, np.exp(ts), rows)
        x, t_fin, done, failed, errors, _, traj = _rk45_batch(
            rate_fn, x0, np.full(m, t_start), np.full(m, t_stop),
            cfg.rk45_atol, cfg.rk45_rtol, cfg.max_steps, None, record,
        )
        okmask = done & ~failed
    runs = _make_runs(traj, ev.nfe, okmask, errors) if record else None
    return BatchResult(
        x=x, z=np.exp(t_fin), nfe=ev.nfe, ok=okmask, errors=errors, runs=runs
    )


def integrate_backward(x0: np.ndarray, model, cfg: OdeConfig) -> OdeRun:
    """Generate one sample: integrate from (x0, z_max) down to z = z_min."""
    res = _integrate_batch(
        np.asarray(x0, dtype=float)[None, :], model, cfg,
        math.log(cfg.z_max), math.log(cfg.z_min), record=True,
    )
    return res.runs[0]


def integrate_forward(x: np.ndarray, model, cfg: OdeConfig) -> OdeRun:
    """Map one data point to its latent on the z = z_max hyperplane."""
    res = _integrate_batch(
        np.asarray(x, dtype=float)[None, :], model, cfg,
        math.log(cfg.z_min), math.log(cfg.z_max), record=True,
    )
    return res.runs[0]


def sample_backward_batch(
    x0: np.ndarray, model, cfg: OdeConfig, record: bool = False
) -> BatchResult:
    """Backward integration of many prior samples at once."""
    return _integrate_batch(x0, model, cfg, math.log(cfg.z_max), math.log(cfg.z_min), record)


def forward_latents_batch(
    x: np.ndarray, model, cfg: OdeConfig, record: bool = False
) -> BatchResult:
    """Forward integration of many data points to the z = z_max hyperplane."""
    return _integrate_batch(x, model, cfg, math.log(cfg.z_min), math.log(cfg.z_max), record)


def escape_to_radius_batch(
    x: np.ndarray, z0: np.ndarray, model, cfg: OdeConfig, radius: float
) -> tuple[np.ndarray, BatchResult]:
    """Forward-integrate augmented starts until |(x, z)| crosses ``radius``.

    Returns the (m, N+1) crossing points (chord-interpolated within the
    accepted step) alongside the batch accounting.  Used by the escape /
    uniformity diagnostics.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z0 = np.asarray(z0, dtype=float)
    if np.any(z0 <= 0):
        raise ValueError("escape starts must have z > 0")
    m = x.shape[0]
    ev = _FieldEvaluator(model, cfg, m)
    t0 = np.log(z0)
    # Generous cap: z alone cannot exceed the crossing radius by much.
    t_end = np.full(m, math.log(2.0 * radius))
    rate_fn = lambda rows, xs, ts: ev.x_rate(xs, np.exp(ts), rows)
    xf, tf, done, failed, errors, crossings, _ = _rk45_batch(
        rate_fn, x, t0, t_end, cfg.rk45_atol, cfg.rk45_rtol, cfg.max_steps,
        stop_radius=radius, record=False,
    )
    no_cross = done & np.isnan(crossings).any(axis=1)
    for i in np.nonzero(no_cross)[0]:
        failed[i] = True
        errors[int(i)] = "reached time cap without crossing the stop radius"
    ok = done & ~failed
    return crossings, BatchResult(
        x=xf, z=np.exp(tf), nfe=ev.nfe, ok=ok, errors=errors
    )


@dataclass
class HitReport:
    """Outcome of releasing far test particles into a discrete charge field."""

    counts: np.ndarray
    lost: int
    total: int

    @property
    def frequencies(self) -> np.ndarray:
        hits = self.total - self.lost
        return self.counts / max(hits, 1)


def hit_particles(
    charges: Dataset,
    count: int,
    r_start: float,
    eps_hit: float,
    rng: RngState,
    step_frac: float = 0.05,
    max_rounds: int = 20_000,
) -> HitReport:
    """Release ``count`` particles uniformly on the sphere of radius r_start
    and follow dy/dt = -E(y) (unit-speed reparameterization) until each lands
    within ``eps_hit`` of a point charge.

    The descent direction is integrated with RK4 using per-particle steps
    proportional to the distance to the nearest charge, which resolves both
    the slow far zone and the stiff near zone on a logarithmic number of
    steps.  Particles that exhaust the round budget are reported lost.
    """
    if charges.charges is None:
        raise ValueError("hit_particles needs a dataset with explicit charges")
    n = charges.dim.n
    if n < 3:
        raise ValueError(f"discrete charge dynamics needs dimension >= 3, got {n}")
    max_src_norm = float(np.linalg.norm(charges.points, axis=1).max())
    if r_start < 10.0 * (max_src_norm + 1.0):
        raise ValueError("r_start must be far outside the charge configuration")
    y = r_start * sample_unit_vector(n, rng, count)
    hit_index = np.full(count, -1, dtype=int)
    active = np.arange(count)

    def descent(pos: np.ndarray) -> np.ndarray:
        e = discrete_charge_field(pos, charges)
        norms = np.linalg.norm(e, axis=1, keepdims=True)
        return -e / np.maximum(norms, 1e-300)

    for _ in range(max_rounds):
        if active.size == 0:
            break
        pos = y[active]
        dists = np.linalg.norm(pos[:, None, :] - charges.points[None, :, :], axis=2)
        nearest = dists.min(axis=1)
        landed = nearest <= eps_hit
        if np.any(landed):
            rows = active[landed]
            hit_index[rows] = dists[landed].argmin(axis=1)
            active = active[~landed]
            pos = y[active]
            nearest = nearest[~landed]
            if active.size == 0:
                break
        h = (step_frac * nearest)[:, None]
        k1 = descent(pos)
        k2 = descent(pos + 0.5 * h * k1)
        k3 = descent(pos + 0.5 * h * k2)
        k4 = descent(pos + h * k3)
        y[active] = pos + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    counts = np.bincount(hit_index[hit_index >= 0], minlength=charges.count)
    lost = int((hit_index < 0).sum())
    return HitReport(counts=counts.astype(float), lost=lost, total=count)
