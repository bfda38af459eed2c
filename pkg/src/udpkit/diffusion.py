"""Denoiser network, forward noising, training loss, and ancestral sampling.

The noise predictor is a time-conditioned MLP: the flattened image is
concatenated with a sinusoidal embedding of the timestep and passed through
silu-activated dense layers. Desk-scale images make a U-Net unnecessary and
the surrounding algorithms never look inside the predictor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ComputationGraph, Tensor, backward, sgd_step
from .binio import Reader, pack_tensor, pack_u32, read_tensor
from .scheduler import (
    DiffusionSchedule,
    decay_coefficient,
    sample_timestep,
    uniform_distribution,
)

CHECKPOINT_MAGIC = b"UDPM"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    eta: float
    batch_size: int
    steps: int
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


def time_embedding(ts, dim: int) -> np.ndarray:
    """Sinusoidal embedding rows for integer timesteps, frequencies 10000^(-2i/dim)."""
    ts = np.asarray(ts, dtype=np.float64).reshape(-1, 1)
    i = np.arange(dim // 2, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * i / dim)
    ang = ts * freqs
    emb = np.empty((ts.size, dim))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb


class DenoiserModel:
    """MLP noise predictor conditioned on the timestep embedding."""

    def __init__(self, layers, input_dim: int, time_embed_dim: int):
        self.layers = layers  # list of (W, b) Tensor pairs
        self.input_dim = input_dim
        self.time_embed_dim = time_embed_dim

    @property
    def hidden_dims(self) -> list:
        return [w.shape[1] for w, _ in self.layers[:-1]]

    def parameters(self) -> list:
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def forward(self, graph: ComputationGraph, x: Tensor, ts) -> Tensor:
        """Graph forward pass on a (n, input_dim) tensor with per-row timesteps."""
        if len(x.shape) != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"expected input of shape (n, {self.input_dim}), got {x.shape}"
            )
        n = x.shape[0]
        ts = [ts] * n if np.isscalar(ts) else list(ts)
        if len(ts) != n:
            raise ValueError(f"got {len(ts)} timesteps for {n} rows")
        emb = Tensor(time_embedding(ts, self.time_embed_dim))
        ones = Tensor(np.ones((n, 1)))  # row-broadcasts the biases via matmul
        h = graph.concat([x, emb])
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            z = graph.add(graph.matmul(h, w), graph.matmul(ones, b))
            h = graph.silu(z) if i < last else z
        return h

    def predict(self, x: np.ndarray, ts) -> np.ndarray:
        """Plain-number forward pass (throwaway graph, no gradients)."""
        g = ComputationGraph()
        return self.forward(g, Tensor(x), ts).array().copy()


def init_denoiser(
    input_dim: int, hidden_dims, time_embed_dim: int, rng: np.random.Generator
) -> DenoiserModel:
    """Seeded uniform(-s, s) init with s = 1/sqrt(fan_in), layer by layer."""
    if input_dim < 1:
        raise ValueError(f"input_dim must be positive, got {input_dim}")
    if time_embed_dim < 2 or time_embed_dim % 2 != 0:
        raise ValueError(f"time_embed_dim must be a positive even number, got {time_embed_dim}")
    if any(d < 1 for d in hidden_dims):
        raise ValueError(f"hidden dims must be positive, got {list(hidden_dims)}")
    dims = [input_dim + time_embed_dim, *hidden_dims, input_dim]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = 1.0 / np.sqrt(fan_in)
        w = Tensor(rng.uniform(-s, s, (fan_in, fan_out)), requires_grad=True)
        b = Tensor(rng.uniform(-s, s, (1, fan_out)), requires_grad=True)
        layers.append((w, b))
    return DenoiserModel(layers, input_dim, time_embed_dim)


def forward_noise(schedule: DiffusionSchedule, x0: Tensor, t: int, eps: Tensor) -> Tensor:
    """Closed-form forward process: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match image shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    return Tensor(np.sqrt(ab) * x0.values + np.sqrt(1.0 - ab) * eps.values, x0.shape)


def simple_loss(
    graph: ComputationGraph,
    model: DenoiserModel,
    schedule: DiffusionSchedule,
    x0: Tensor,
    t: int,
    eps: Tensor,
) -> Tensor:
    """Mean squared error between eps and the model's prediction at the noised input.

    x0 and eps must be single rows of shape (1, input_dim); both enter the
    graph as leaves, so gradients flow to the image as well as the parameters.
    """
    if x0.shape != (1, model.input_dim):
        raise ValueError(f"x0 must have shape (1, {model.input_dim}), got {x0.shape}")
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} does not match image shape {x0.shape}")
    xt = graph.add(
        graph.scale(x0, decay_coefficient(schedule, t)),
        graph.scale(eps, float(np.sqrt(1.0 - schedule.alpha_bar(t)))),
    )
    pred = model.forward(graph, xt, [t])
    return graph.mean(graph.square(graph.sub(eps, pred)))


def train_step(
    model: DenoiserModel,
    batch,
    schedule: DiffusionSchedule,
    eta: float,
    rng: np.random.Generator,
) -> float:
    """One descent step on the batch-averaged loss; returns the pre-step loss.

    Per batch element, draws t uniform over 1..T and fresh standard-normal
    noise; the noised inputs enter the graph as constants since only the
    parameter gradients are needed here.
    """
    if not batch:
        raise ValueError("empty batch")
    d = model.input_dim
    x0 = np.stack([b.values for b in batch])
    if x0.shape[1] != d:
        raise ValueError(f"batch images have {x0.shape[1]} values, model expects {d}")
    udist = uniform_distribution(schedule.T)
    ts = [sample_timestep(udist, rng) for _ in batch]
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bars[ts]
    xt = np.sqrt(ab)[:, None] * x0 + np.sqrt(1.0 - ab)[:, None] * eps

    graph = ComputationGraph()
    pred = model.forward(graph, Tensor(xt), ts)
    loss = graph.mean(graph.square(graph.sub(Tensor(eps), pred)))
    backward(graph)
    sgd_step(model.parameters(), eta)
    return loss.item()


def sample(
    model: DenoiserModel,
    schedule: DiffusionSchedule,
    n: int,
    rng: np.random.Generator,
    deterministic_noise: bool = False,
    init: np.ndarray | None = None,
) -> list:
    """Ancestral reverse process from seeded standard-normal starting states.

    Update rule per step: x <- (x - (beta_t / sqrt(1 - ab_t)) * pred) / sqrt(alpha_t),
    plus sqrt(beta_t) * z fresh noise except at t = 1 or when deterministic.
    Outputs are clamped to [0, 1] once, at the end. `init` overrides the
    starting states (testing hook).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    d = model.input_dim
    x = rng.standard_normal((n, d)) if init is None else np.array(init, dtype=np.float64)
    if x.shape != (n, d):
        raise ValueError(f"init must have shape ({n}, {d}), got {x.shape}")
    for t in range(schedule.T, 0, -1):
        try:
            pred = model.predict(x, t)
        except FloatingPointError as e:
            raise FloatingPointError(f"non-finite sample state at t={t}: {e}") from e
        beta = schedule.beta(t)
        coef = beta / np.sqrt(1.0 - schedule.alpha_bar(t))
        x = (x - coef * pred) / np.sqrt(schedule.alpha(t))
        if not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite sample state at t={t}")
        if t > 1 and not deterministic_noise:
            x = x + np.sqrt(beta) * rng.standard_normal((n, d))
    return [Tensor(np.clip(row, 0.0, 1.0)) for row in x]


def save_checkpoint(model: DenoiserModel, path) -> None:
    params = model.parameters()
    parts = [CHECKPOINT_MAGIC, pack_u32(CHECKPOINT_VERSION), pack_u32(len(params))]
    parts.extend(pack_tensor(p) for p in params)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> DenoiserModel:
    """Rebuild the model from a checkpoint; the layer structure is implied
    by the tensor shapes (weights and biases alternate, last bias fixes the
    output width, first weight fixes input plus embedding width)."""
    with open(path, "rb") as f:
        r = Reader(f.read())
    r.expect_magic(CHECKPOINT_MAGIC)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    count = r.u32("tensor count")
    if count == 0 or count % 2 != 0:
        raise ValueError(f"checkpoint must hold weight/bias pairs, got {count} tensors")
    tensors = [read_tensor(r) for _ in range(count)]
    r.done()

    layers = []
    for i in range(0, count, 2):
        w, b = tensors[i], tensors[i + 1]
        if len(w.shape) != 2 or b.shape != (1, w.shape[1]):
            raise ValueError(f"tensor pair {i // 2} is not a dense layer: {w.shape}, {b.shape}")
        if layers and layers[-1][0].shape[1] != w.shape[0]:
            raise ValueError(f"layer {i // 2} input width does not match previous output")
        w.requires_grad = True
        b.requires_grad = True
        layers.append((w, b))
    input_dim = layers[-1][1].shape[1]
    time_embed_dim = layers[0][0].shape[0] - input_dim
    if time_embed_dim < 2:
        raise ValueError("first layer narrower than the output layer; not a denoiser checkpoint")
    return DenoiserModel(layers, input_dim, time_embed_dim)
