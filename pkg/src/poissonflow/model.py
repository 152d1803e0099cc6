"""Field models: the exact empirical evaluator and a small neural approximator.

Both variants expose the same contract -- ``evaluate_batch`` maps augmented
query rows (x, z) to the negative normalized field v -- so the ODE samplers
and the verification suite are agnostic to which one they drive.

The network is a plain fully connected stack with tanh activations (smooth
everywhere, which the divergence computations downstream rely on), trained
with Adam on the regression loss

    L = (1/|B|) sum_i | f(y~_i) - v_BL(y~_i) |^2,

where the targets are computed from a large reference batch B_L only, never
from the full dataset, and the perturbed inputs come from a small subsample
B of B_L.  An exponential moving average of the weights is kept alongside
the raw parameters and is what the returned model evaluates with.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .field import AugmentedPoint, normalized_field_batch
from .perturb import PerturbConfig, perturb_batch
from .rng import RngState

ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "softplus": (
        lambda a: np.logaddexp(0.0, a),
        lambda a: 1.0 / (1.0 + np.exp(-a)),
    ),
}


class Mlp:
    """Fully connected network R^(N+1) -> R^(N+1) with a smooth activation."""

    def __init__(self, widths: list[int], activation: str = "tanh", rng: RngState | None = None):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        gen = (rng or RngState(0)).generator()
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(gen.normal(0.0, scale, (fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def set_parameters(self, params: list[np.ndarray]) -> None:
        k = len(self.weights)
        self.weights = [np.array(p, dtype=float) for p in params[:k]]
        self.biases = [np.array(p, dtype=float) for p in params[k:]]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.widths[0]:
            raise ValueError(f"input must have {self.widths[0]} components, got {x.shape[1]}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(self._check(x))
        return out

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping pre-activations for the backward pass."""
        act, _ = ACTIVATIONS[self.activation]
        h = x
        cache = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w.T + b
            cache.append(pre)
            h = act(pre) if i < len(self.weights) - 1 else pre
            if i < len(self.weights) - 1:
                cache.append(h)
        return h, cache

    def backward(self, cache: list[np.ndarray], grad_out: np.ndarray):
        """Gradients of sum(grad_out * output) w.r.t. parameters and inputs.

        Returns ``(param_grads, input_grad)`` with param_grads ordered like
        :meth:`parameters`.
        """
        _, dact = ACTIVATIONS[self.activation]
        n_layers = len(self.weights)
        w_grads: list[np.ndarray] = [None] * n_layers
        b_grads: list[np.ndarray] = [None] * n_layers
        g = np.atleast_2d(grad_out)
        for i in range(n_layers - 1, -1, -1):
            h_in = cache[2 * i]
            w_grads[i] = g.T @ h_in
            b_grads[i] = g.sum(axis=0)
            g = g @ self.weights[i]
            if i > 0:
                g = g * dact(cache[2 * i - 1])
        return w_grads + b_grads, g

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Jacobian d output / d input at a single input, shape (out, in)."""
        x = self._check(x)
        out, cache = self.forward_cached(x)
        rows = []
        for j in range(self.widths[-1]):
            seed = np.zeros((x.shape[0], self.widths[-1]))
            seed[:, j] = 1.0
            _, dx = self.backward(cache, seed)
            rows.append(dx[0])
        return np.stack(rows)


def loss_and_grad(mlp: Mlp, inputs: np.ndarray, targets: np.ndarray):
    """Mean squared residual norm and its parameter gradients."""
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets must have equal length")
    out, cache = mlp.forward_cached(mlp._check(inputs))
    resid = out - targets
    value = float(np.sum(resid**2) / inputs.shape[0])
    grads, _ = mlp.backward(cache, 2.0 * resid / inputs.shape[0])
    return value, grads


def loss(mlp: Mlp, inputs: np.ndarray, targets: np.ndarray) -> float:
    return loss_and_grad(mlp, inputs, targets)[0]


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g**2
            m_hat = self.m[i] / (1 - self.b1**self.t)
            v_hat = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


@dataclass
class TrainState:
    """Step counter, EMA shadow, and loss history of one training run."""

    step: int = 0
    ema_decay: float = 0.999
    ema_params: list[np.ndarray] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)

    def update_ema(self, params: list[np.ndarray]) -> None:
        if not self.ema_params:
            self.ema_params = [p.copy() for p in params]
            return
        d = self.ema_decay
        self.ema_params = [d * e + (1 - d) * p for e, p in zip(self.ema_params, params)]


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 6000
    batch: int = 128
    batch_large: int = 2048
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    ema_decay: float = 0.999
    hidden: tuple[int, ...] = (64, 64, 64)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if not (1 <= self.batch <= self.batch_large):
            raise ValueError("need 1 <= batch <= batch_large")


class ExactEmpiricalField:
    """Field model backed directly by the dataset; the no-training oracle."""

    exact_z = True

    def __init__(self, dataset: Dataset, gamma: float = 0.0):
        self.dataset = dataset
        self.gamma = float(gamma)

    @property
    def dim(self):
        return self.dataset.dim

    def evaluate_batch(self, queries: np.ndarray) -> np.ndarray:
        return normalized_field_batch(queries, self.dataset, self.gamma)

    def evaluate(self, q: AugmentedPoint) -> np.ndarray:
        return self.evaluate_batch(q.vector()[None, :])[0]


class NeuralField:
    """Trained approximator of the negative normalized field."""

    exact_z = False

    def __init__(self, mlp: Mlp, gamma: float, perturb_cfg: PerturbConfig | None = None):
        self.mlp = mlp
        self.gamma = float(gamma)
        self.perturb_cfg = perturb_cfg

    @property
    def dim(self):
        from .geometry import Dim

        return Dim(self.mlp.widths[0] - 1)

    def evaluate_batch(self, queries: np.ndarray) -> np.ndarray:
        return self.mlp.forward(queries)

    def evaluate(self, q: AugmentedPoint) -> np.ndarray:
        return self.evaluate_batch(q.vector()[None, :])[0]


def train(
    d: Dataset, cfg: PerturbConfig, train_cfg: TrainConfig, rng: RngState
) -> tuple[NeuralField, TrainState]:
    """Fit the neural field on perturbed points of ``d`` (see module docstring).

    Per iteration: draw a large batch B_L, subsample B, perturb B, regress the
    network on targets computed against B_L alone, then take one Adam step and
    refresh the EMA shadow.  The returned model carries the EMA weights.
    """
    if train_cfg.batch_large > d.count:
        raise ValueError(
            f"batch_large={train_cfg.batch_large} exceeds dataset size {d.count}"
        )
    aug = d.dim.aug
    mlp = Mlp([aug, *train_cfg.hidden, aug], train_cfg.activation, rng.child(0))
    opt = Adam(mlp.parameters(), train_cfg.lr, train_cfg.betas, train_cfg.eps)
    state = TrainState(ema_decay=train_cfg.ema_decay)
    state.update_ema(mlp.parameters())
    index_gen = rng.child(1).generator()
    for step in range(train_cfg.iterations):
        bl_idx = index_gen.choice(d.count, size=train_cfg.batch_large, replace=False)
        b_idx = index_gen.choice(bl_idx, size=train_cfg.batch, replace=False)
        y, z = perturb_batch(d.points[b_idx], cfg, rng.child(2 + step))
        queries = np.concatenate([y, z[:, None]], axis=1)
        large = Dataset(points=d.points[bl_idx])
        targets = normalized_field_batch(queries, large, cfg.gamma)
        value, grads = loss_and_grad(mlp, queries, targets)
        mlp.set_parameters(opt.step(mlp.parameters(), grads))
        state.update_ema(mlp.parameters())
        state.loss_history.append(value)
        state.step = step + 1
    final = Mlp(mlp.widths, mlp.activation)
    final.set_parameters(state.ema_params)
    return NeuralField(final, cfg.gamma, cfg), state


def save_checkpoint(path: str, model: NeuralField) -> None:
    """Versioned npz container: dims, widths, activation, weights, perturb config."""
    meta = {
        "format": 1,
        "widths": model.mlp.widths,
        "activation": model.mlp.activation,
        "gamma": model.gamma,
        "perturb": None
        if model.perturb_cfg is None
        else {
            "M": model.perturb_cfg.M,
            "sigma": model.perturb_cfg.sigma,
            "tau": model.perturb_cfg.tau,
            "gamma": model.perturb_cfg.gamma,
        },
    }
    arrays = {f"param_{i}": p for i, p in enumerate(model.mlp.parameters())}
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path: str) -> NeuralField:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != 1:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        params = [data[f"param_{i}"] for i in range(2 * (len(meta["widths"]) - 1))]
    mlp = Mlp(meta["widths"], meta["activation"])
    mlp.set_parameters(params)
    pcfg = None
    if meta["perturb"] is not None:
        pcfg = PerturbConfig(
            M=meta["perturb"]["M"],
            sigma=meta["perturb"]["sigma"],
            tau=meta["perturb"]["tau"],
            gamma=meta["perturb"]["gamma"],
        )
    return NeuralField(mlp, meta["gamma"], pcfg)
