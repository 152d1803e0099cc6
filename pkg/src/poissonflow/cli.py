"""Command-line front end: reproducible runs driven by a flat config file.

Config files are plain ``key = value`` lines (``#`` comments allowed); every
value is typed by the schema below, and any key can be overridden by the
matching command-line flag (precedence: flags > file > defaults).  Each
command writes its outputs plus a ``manifest.json`` that embeds the fully
resolved configuration, its hash, the derived schedule quantities, and NFE
accounting, so a run directory is self-describing.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, generate_toy, load_csv, save_csv, stats, TOY_NAMES
from .field import empirical_field_batch, normalized_field_batch
from .model import ExactEmpiricalField, TrainConfig, load_checkpoint, save_checkpoint, train
from .ode import OdeConfig, sample_backward_batch
from .perturb import PerturbConfig, rule_of_thumb_M, rule_of_thumb_schedule
from .prior import PriorSpec, sample_prior
from .likelihood import log_likelihood_batch
from .rng import RngState
from .tree import build_tree, tree_field
from .verify import (
    backward_recovery,
    hit_probability_report,
    norm_z_diagnostic,
    theorem1_uniformity,
    interpolate as latent_interpolate,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BAD_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_DIMENSION = 4


class CliError(Exception):
    def __init__(self, code: int, message: str, **info):
        super().__init__(message)
        self.code = code
        self.payload = {"error": message, "code": code, **info}


@dataclass
class RunConfig:
    """Flat, fully typed run configuration (see module docstring)."""

    generator: str = "disk"
    count: int = 10000
    seed: int = 0
    sigma: float = 0.01
    tau: float = 0.03
    gamma: float = 0.1
    M: int = 0                  # 0 = derive via the rule of thumb
    iterations: int = 6000
    batch: int = 128
    batch_large: int = 2048
    lr: float = 1e-3
    ema_decay: float = 0.999
    hidden: str = "64,64,64"
    z_min: float = 1e-3
    z_max: float = 0.0          # 0 = derive via the rule of thumb
    norm_clip: float = 0.0      # 0 = derive via the rule of thumb
    solver: str = "rk45"
    euler_steps: int = 100
    atol: float = 1e-4
    rtol: float = 1e-4
    z_sub_threshold: float = 0.1

    def hidden_widths(self) -> tuple[int, ...]:
        try:
            return tuple(int(w) for w in self.hidden.split(",") if w.strip())
        except ValueError:
            raise CliError(EXIT_BAD_CONFIG, f"bad hidden widths {self.hidden!r}") from None


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def load_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise CliError(EXIT_MISSING_INPUT, f"config file not found: {path}")
        for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(EXIT_BAD_CONFIG, f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in _CONFIG_TYPES:
                raise CliError(EXIT_BAD_CONFIG, f"{path}:{lineno}: unknown key {key!r}")
            values[key] = val
    values.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for key, val in values.items():
        typ = _CONFIG_TYPES[key]
        try:
            if typ in ("int", int):
                kwargs[key] = int(val)
            elif typ in ("float", float):
                kwargs[key] = float(val)
            else:
                kwargs[key] = str(val)
        except ValueError:
            raise CliError(EXIT_BAD_CONFIG, f"bad value for {key}: {val!r}") from None
    return RunConfig(**kwargs)


def resolve_schedule(cfg: RunConfig, d: Dataset) -> tuple[PerturbConfig, OdeConfig, float]:
    """Fill in M / z_max / norm_clip from the dataset moments where requested."""
    ds = stats(d)
    m_steps = cfg.M if cfg.M > 0 else rule_of_thumb_M(ds.mean_sq_norm, d.dim.n, cfg.sigma, cfg.tau)
    schedule = rule_of_thumb_schedule(
        ds.mean_sq_norm, d.dim.n, cfg.sigma, cfg.tau, m_steps, z_min=cfg.z_min
    )
    z_max = cfg.z_max if cfg.z_max > 0 else schedule.z_max
    norm_clip = cfg.norm_clip if cfg.norm_clip > 0 else schedule.norm_clip
    perturb_cfg = PerturbConfig(M=m_steps, sigma=cfg.sigma, tau=cfg.tau, gamma=cfg.gamma)
    ode_cfg = OdeConfig(
        z_max=z_max, z_min=cfg.z_min, solver=cfg.solver, euler_steps=cfg.euler_steps,
        rk45_atol=cfg.atol, rk45_rtol=cfg.rtol, z_sub_threshold=cfg.z_sub_threshold,
        gamma=cfg.gamma,
    )
    return perturb_cfg, ode_cfg, norm_clip


def write_manifest(out: Path, command: str, cfg: RunConfig, started: float, **extra) -> None:
    payload = asdict(cfg)
    blob = json.dumps(payload, sort_keys=True).encode()
    manifest = {
        "command": command,
        "config": payload,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": cfg.seed,
        "version": __version__,
        "numpy_version": np.__version__,
        "wall_time_s": round(time.monotonic() - started, 3),
        **extra,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _load_dataset(path: str | None, cfg: RunConfig, charges: bool = False) -> Dataset:
    if path is None:
        return generate_toy(cfg.generator, cfg.count, RngState(cfg.seed))
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING_INPUT, f"dataset file not found: {path}")
    return load_csv(str(p), with_charges=charges)


def _load_model(args, cfg: RunConfig, d: Dataset | None):
    if getattr(args, "exact", False):
        if d is None:
            raise CliError(EXIT_MISSING_INPUT, "--exact requires --dataset")
        return ExactEmpiricalField(d, gamma=cfg.gamma)
    ckpt = getattr(args, "checkpoint", None)
    if ckpt is None:
        raise CliError(EXIT_MISSING_INPUT, "need --checkpoint or --exact")
    if not Path(ckpt).exists():
        raise CliError(EXIT_MISSING_INPUT, f"checkpoint not found: {ckpt}")
    return load_checkpoint(ckpt)


def _write_samples_csv(path: Path, rows: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.atleast_2d(rows):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# --- commands ---


def cmd_gen_data(args) -> int:
    started = time.monotonic()
    cfg = load_config(args.config, {"generator": args.name, "count": args.count, "seed": args.seed})
    if cfg.generator not in TOY_NAMES:
        raise CliError(EXIT_BAD_CONFIG, f"unknown generator {cfg.generator!r}")
    d = generate_toy(cfg.generator, cfg.count, RngState(cfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(d, str(out / "data.csv"))
    ds = stats(d)
    write_manifest(
        out, "gen-data", cfg, started,
        dataset={"count": d.count, "dim": d.dim.n,
                 "mean_sq_norm": ds.mean_sq_norm, "max_norm": ds.max_norm},
    )
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.monotonic()
    cfg = load_config(args.config, {"seed": args.seed, "iterations": args.iterations})
    d = _load_dataset(args.dataset, cfg)
    if cfg.batch_large > d.count:
        raise CliError(EXIT_BAD_CONFIG,
                       f"batch_large={cfg.batch_large} exceeds dataset size {d.count}")
    perturb_cfg, _, norm_clip = resolve_schedule(cfg, d)
    train_cfg = TrainConfig(
        iterations=cfg.iterations, batch=cfg.batch, batch_large=cfg.batch_large,
        lr=cfg.lr, ema_decay=cfg.ema_decay, hidden=cfg.hidden_widths(),
    )
    model, state = train(d, perturb_cfg, train_cfg, RngState(cfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(str(out / "checkpoint.npz"), model)
    _write_samples_csv(out / "loss.csv", np.array(state.loss_history)[:, None])
    write_manifest(
        out, "train", cfg, started,
        derived={"M": perturb_cfg.M, "norm_clip": norm_clip},
        final_loss=state.loss_history[-1] if state.loss_history else None,
        parameters=model.mlp.n_params,
    )
    return EXIT_OK


def cmd_sample(args) -> int:
    started = time.monotonic()
    cfg = load_config(args.config, {
        "seed": args.seed, "count": args.count, "solver": args.solver,
        "euler_steps": args.steps,
    })
    d = _load_dataset(args.dataset, cfg) if args.dataset else None
    model = _load_model(args, cfg, d)
    if d is not None:
        perturb_cfg, ode_cfg, norm_clip = resolve_schedule(cfg, d)
    else:
        if cfg.z_max <= 0:
            raise CliError(EXIT_BAD_CONFIG, "z_max must be set when sampling without a dataset")
        ode_cfg = OdeConfig(
            z_max=cfg.z_max, z_min=cfg.z_min, solver=cfg.solver,
            euler_steps=cfg.euler_steps, rk45_atol=cfg.atol, rk45_rtol=cfg.rtol,
            z_sub_threshold=cfg.z_sub_threshold, gamma=cfg.gamma,
        )
        norm_clip = cfg.norm_clip if cfg.norm_clip > 0 else None
    n = model.dim.n
    spec = PriorSpec(z_max=ode_cfg.z_max, n=n, norm_clip=norm_clip or None)
    x0 = sample_prior(spec, RngState(cfg.seed, 1), cfg.count)
    result = sample_backward_batch(x0, model, ode_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_samples_csv(out / "samples.csv", result.x[result.ok])
    write_manifest(
        out, "sample", cfg, started,
        nfe={"mean": float(result.nfe.mean()), "total": int(result.nfe.sum()),
             "max": int(result.nfe.max())},
        generated=int(result.ok.sum()),
        failed=int((~result.ok).sum()),
        prior={"z_max": ode_cfg.z_max, "norm_clip": norm_clip},
    )
    return EXIT_OK


def cmd_likelihood(args) -> int:
    started = time.monotonic()
    cfg = load_config(args.config, {"seed": args.seed})
    d = _load_dataset(args.dataset, cfg) if args.dataset else None
    model = _load_model(args, cfg, d)
    points = _load_dataset(args.points, cfg)
    if points.dim.n != model.dim.n:
        raise CliError(
            EXIT_DIMENSION,
            f"points have dimension {points.dim.n}, model expects {model.dim.n}",
        )
    if d is not None:
        _, ode_cfg, _ = resolve_schedule(cfg, d)
    else:
        ode_cfg = OdeConfig(
            z_max=cfg.z_max, z_min=cfg.z_min, solver=cfg.solver,
            rk45_atol=cfg.atol, rk45_rtol=cfg.rtol,
            z_sub_threshold=cfg.z_sub_threshold, gamma=cfg.gamma,
        )
    results = log_likelihood_batch(
        points.points, model, ode_cfg, method=args.method, rng=RngState(cfg.seed, 7)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "likelihood.csv", "w", encoding="utf-8") as fh:
        for x, r in zip(points.points, results):
            cells = [repr(float(v)) for v in x]
            cells += [repr(r.log_density), repr(r.bits_per_dim), str(r.nfe)]
            fh.write(",".join(cells) + "\n")
    bpd = np.array([r.bits_per_dim for r in results])
    good = np.isfinite(bpd)
    summary = {
        "mean_bits_per_dim": float(bpd[good].mean()) if good.any() else None,
        "std_bits_per_dim": float(bpd[good].std()) if good.any() else None,
        "count": int(good.sum()),
        "failed": int((~good).sum()),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_manifest(
        out, "likelihood", cfg, started,
        nfe={"mean": float(np.mean([r.nfe for r in results]))},
        summary=summary, method=args.method,
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    started = time.monotonic()
    cfg = load_config(args.config, {"seed": args.seed, "count": args.count})
    d = _load_dataset(args.dataset, cfg)
    perturb_cfg, ode_cfg, norm_clip = resolve_schedule(cfg, d)
    rng = RngState(cfg.seed, 42)
    reports = []
    suites = ("theorem1", "backward", "hit", "norm-z") if args.suite == "all" else (args.suite,)
    if "theorem1" in suites:
        count = min(cfg.count, 10000)
        reports.append(theorem1_uniformity(d, 1e3 * stats(d).max_norm + 1e3, count, rng.child(1)))
    if "backward" in suites:
        count = min(cfg.count, d.count // 2)
        reports.append(backward_recovery(d, ode_cfg, count, rng.child(2), norm_clip=norm_clip))
    if "hit" in suites:
        charges = Dataset(
            points=np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
            charges=np.array([1.0, 3.0]),
        )
        reports.append(
            hit_probability_report(charges, min(cfg.count, 10000), 1e3, 1e-2, rng.child(3))
        )
    if "norm-z" in suites:
        spec = PriorSpec(z_max=ode_cfg.z_max, n=d.dim.n, norm_clip=norm_clip)
        x0 = sample_prior(spec, rng.child(4), 100)
        model = ExactEmpiricalField(d, gamma=cfg.gamma)
        result = sample_backward_batch(x0, model, ode_cfg, record=True)
        reports.append(norm_z_diagnostic(result.runs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = [r.to_dict() for r in reports]
    (out / "reports.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "verify", cfg, started,
                   reports={r.name: r.passed for r in reports})
    ok = all(r.passed for r in reports)
    for r in reports:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: "
              f"statistic={r.statistic:.5g} threshold={r.threshold:.5g}")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_interpolate(args) -> int:
    started = time.monotonic()
    cfg = load_config(args.config, {"seed": args.seed})
    d = _load_dataset(args.dataset, cfg) if args.dataset else None
    model = _load_model(args, cfg, d)
    try:
        a = np.array([float(v) for v in args.a.split(",")])
        b = np.array([float(v) for v in args.b.split(",")])
    except ValueError:
        raise CliError(EXIT_BAD_CONFIG, "endpoints must be comma-separated reals") from None
    if a.shape != b.shape or a.shape[0] != model.dim.n:
        raise CliError(EXIT_DIMENSION,
                       f"endpoints must both have dimension {model.dim.n}")
    if d is not None:
        _, ode_cfg, _ = resolve_schedule(cfg, d)
    else:
        ode_cfg = OdeConfig(
            z_max=cfg.z_max, z_min=cfg.z_min, solver=cfg.solver,
            rk45_atol=cfg.atol, rk45_rtol=cfg.rtol,
            z_sub_threshold=cfg.z_sub_threshold, gamma=cfg.gamma,
        )
    path_points = latent_interpolate(a, b, args.steps, model, ode_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_samples_csv(out / "interpolation.csv", np.stack(path_points))
    write_manifest(out, "interpolate", cfg, started, steps=args.steps)
    return EXIT_OK


def cmd_field_eval(args) -> int:
    started = time.monotonic()
    cfg = load_config(args.config, {"seed": args.seed})
    d = _load_dataset(args.dataset, cfg, charges=args.charges)
    try:
        q = np.array([float(v) for v in args.query.split(",")])
    except ValueError:
        raise CliError(EXIT_BAD_CONFIG, "query must be comma-separated reals") from None
    if q.shape[0] != d.dim.aug:
        raise CliError(
            EXIT_DIMENSION,
            f"query must have {d.dim.aug} components (x..., z), got {q.shape[0]}",
        )
    e_hat = empirical_field_batch(q, d)
    v = normalized_field_batch(q, d, cfg.gamma)
    result = {
        "e_hat": [float(t) for t in e_hat],
        "v": [float(t) for t in v],
        "gamma": cfg.gamma,
    }
    if args.tree:
        tree = build_tree(d, theta=args.theta)
        result["tree_sum"] = [float(t) for t in tree_field(q, tree)]
        result["theta"] = args.theta
    print(json.dumps(result, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "field.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
        write_manifest(out, "field-eval", cfg, started)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poissonflow",
        description="Field-flow generative sampling on toy datasets",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="generate a toy dataset CSV")
    common(p)
    p.add_argument("--name", default=None, choices=TOY_NAMES)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the neural field on a dataset")
    common(p)
    p.add_argument("--dataset", default=None, help="CSV dataset (default: generated)")
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples through the backward ODE")
    common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--exact", action="store_true", help="use the exact empirical field")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--solver", default=None, choices=("euler", "rk45"))
    p.add_argument("--steps", type=int, default=None, help="Euler step count")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("likelihood", help="log-density of points under the flow")
    common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--exact", action="store_true")
    p.add_argument("--points", required=True, help="CSV of evaluation points")
    p.add_argument("--method", default="exact_fd", choices=("exact_fd", "hutchinson"))
    p.set_defaults(func=cmd_likelihood)

    p = sub.add_parser("verify", help="run the statistical verification suites")
    common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--suite", default="all",
                   choices=("all", "theorem1", "backward", "hit", "norm-z"))
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("interpolate", help="latent-space path between two points")
    common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--exact", action="store_true")
    p.add_argument("--a", required=True, help="first endpoint, comma-separated")
    p.add_argument("--b", required=True, help="second endpoint, comma-separated")
    p.add_argument("--steps", type=int, default=8)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("field-eval", help="evaluate the empirical field at a query")
    common(p, out_required=False)
    p.add_argument("--dataset", required=True)
    p.add_argument("--charges", action="store_true", help="CSV has a charge column")
    p.add_argument("--query", required=True, help="augmented query x...,z")
    p.add_argument("--tree", action="store_true", help="also evaluate the tree code")
    p.add_argument("--theta", type=float, default=0.5)
    p.set_defaults(func=cmd_field_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps(exc.payload), file=sys.stderr)
        return exc.code
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": str(exc), "code": EXIT_ERROR}), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
