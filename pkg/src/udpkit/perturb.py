"""Bounded protective noise via alternating bi-level optimization.

The generator trains a fresh surrogate denoiser on the perturbed images
(descent on the diffusion loss) and, in alternation, pushes each sample's
perturbation up the loss surface by the sign of the image gradient, clipped
to an L-infinity ball of radius rho after every step. The enhanced variant
draws the perturbation-level timesteps from the scheduler-derived
distribution instead of uniform; the training level always stays uniform.

Perturbations ride through the forward process with the image (delta is
added to x0, then noised). The literal alternative of adding delta to the
already-noised x_t is available behind perturb_at_xt for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ComputationGraph, Tensor, backward, sgd_step
from .binio import FileFormatError, Reader, pack_f64, pack_tensor, pack_u8, pack_u32, read_tensor
from .datakit import LabeledDataset, _apply_deltas
from .diffusion import DenoiserModel, init_denoiser, simple_loss, train_step
from .scheduler import (
    DiffusionSchedule,
    TimestepDistribution,
    eudp_distribution,
    sample_timestep,
    uniform_distribution,
)

PSET_MAGIC = b"UDPN"
PSET_VERSION = 1

METHODS = ("udp", "eudp", "random", "none")
_METHOD_TAGS = {m: i for i, m in enumerate(METHODS)}

SWEEP_BLOCK = 64  # samples per batched sign-ascent update


@dataclass
class PerturbationSet:
    deltas: list  # one Tensor per sample, image-shaped
    rho: float
    method: str

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.method not in METHODS:
            raise ValueError(f"unknown perturbation method {self.method!r}")
        for i, d in enumerate(self.deltas):
            if np.max(np.abs(d.values), initial=0.0) > self.rho:
                raise ValueError(f"delta {i} exceeds the L-infinity bound {self.rho}")

    def __len__(self):
        return len(self.deltas)

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(d.values))) for d in self.deltas), default=0.0)


@dataclass
class PerturbConfig:
    N: int = 20  # outer alternations
    K: int = 50  # training steps per alternation
    M: int = 5  # perturbation sweeps per alternation
    eta: float = 0.02
    lam: float = 16 / 255 / 10  # sign-step size, conventionally rho / 10
    rho: float = 16 / 255
    timestep_dist: str = "eudp"
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if self.N < 0 or self.K < 0 or self.M < 0:
            raise ValueError(f"N, K, M must be >= 0, got {self.N}, {self.K}, {self.M}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.lam > self.rho:
            raise ValueError(f"lambda {self.lam} exceeds rho {self.rho}")
        if self.timestep_dist not in ("uniform", "eudp"):
            raise ValueError(f"unknown timestep_dist {self.timestep_dist!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class PerturbResult:
    pset: PerturbationSet
    surrogate: DenoiserModel
    train_losses: list = field(default_factory=list)


def clip_linf(delta: Tensor, rho: float) -> Tensor:
    """Coordinate-wise clamp to [-rho, rho]."""
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    return Tensor(np.clip(delta.values, -rho, rho), delta.shape)


def perturb_step(
    model: DenoiserModel,
    schedule: DiffusionSchedule,
    x0: Tensor,
    delta: Tensor,
    t: int,
    lam: float,
    rho: float,
    rng: np.random.Generator,
    perturb_at_xt: bool = False,
) -> Tensor:
    """One sign-ascent update of a single sample's perturbation.

    Draws fresh noise, differentiates the loss with respect to the perturbed
    image, and returns clip(delta + lam * sign(grad), rho).
    """
    if x0.shape != delta.shape:
        raise ValueError(f"delta shape {delta.shape} does not match image shape {x0.shape}")
    if np.max(np.abs(delta.values), initial=0.0) > rho:
        raise ValueError(f"delta violates the L-infinity bound {rho} on entry")
    d = model.input_dim
    eps = rng.standard_normal(d)
    graph = ComputationGraph()
    if perturb_at_xt:
        ab = schedule.alpha_bar(t)
        xt = np.sqrt(ab) * x0.values + np.sqrt(1.0 - ab) * eps
        leaf = Tensor((xt + delta.values).reshape(1, d), requires_grad=True)
        pred = model.forward(graph, leaf, [t])
        graph.mean(graph.square(graph.sub(Tensor(eps.reshape(1, d)), pred)))
    else:
        leaf = Tensor((x0.values + delta.values).reshape(1, d), requires_grad=True)
        simple_loss(graph, model, schedule, leaf, t, Tensor(eps.reshape(1, d)))
    backward(graph)
    step = lam * np.sign(leaf.grad)
    return clip_linf(Tensor(delta.values + step, delta.shape), rho)


def _sweep_block_update(
    model, schedule, x0_rows, delta_rows, ts, eps, lam, rho, perturb_at_xt
) -> np.ndarray:
    """Sign-ascent on a block of samples in one graph.

    Row i carries its own timestep: the per-row signal coefficient enters as
    a constant diagonal matmul so the image gradient stays exact. The mean
    over the block rescales every gradient by the same positive factor, which
    the sign discards, so the update equals the per-sample one.
    """
    b, d = x0_rows.shape
    ab = schedule.alpha_bars[ts]
    graph = ComputationGraph()
    if perturb_at_xt:
        xt_clean = np.sqrt(ab)[:, None] * x0_rows + np.sqrt(1.0 - ab)[:, None] * eps
        leaf = Tensor(xt_clean + delta_rows, requires_grad=True)
        xt = leaf
    else:
        leaf = Tensor(x0_rows + delta_rows, requires_grad=True)
        diag = Tensor(np.diag(np.sqrt(ab)))
        noise_part = Tensor(np.sqrt(1.0 - ab)[:, None] * eps)
        xt = graph.add(graph.matmul(diag, leaf), noise_part)
    pred = model.forward(graph, xt, list(ts))
    graph.mean(graph.square(graph.sub(Tensor(eps), pred)))
    backward(graph)
    grad = leaf.grad.reshape(b, d)
    return np.clip(delta_rows + lam * np.sign(grad), -rho, rho)


def _train_step_at_xt(model, x0_rows, delta_rows, schedule, eta, rng) -> float:
    """Training step for the literal reading: delta joins the already-noised input."""
    udist = uniform_distribution(schedule.T)
    ts = [sample_timestep(udist, rng) for _ in range(x0_rows.shape[0])]
    eps = rng.standard_normal(x0_rows.shape)
    ab = schedule.alpha_bars[ts]
    xt = np.sqrt(ab)[:, None] * x0_rows + np.sqrt(1.0 - ab)[:, None] * eps + delta_rows
    graph = ComputationGraph()
    pred = model.forward(graph, Tensor(xt), ts)
    loss = graph.mean(graph.square(graph.sub(Tensor(eps), pred)))
    backward(graph)
    sgd_step(model.parameters(), eta)
    return loss.item()


def generate(
    dataset: LabeledDataset,
    schedule: DiffusionSchedule,
    config: PerturbConfig,
    rng: np.random.Generator,
    *,
    hidden_dims=(128,),
    time_embed_dim: int = 16,
    perturb_at_xt: bool = False,
    delta_dist: TimestepDistribution | None = None,
    delta_monitor=None,
) -> PerturbResult:
    """Alternating generation loop shared by the plain and enhanced variants.

    N outer iterations of (K surrogate training steps on x + delta, then M
    full sign-ascent sweeps over the dataset). The surrogate starts fresh.
    delta_dist overrides the perturbation-level timestep distribution
    (defaults to the one named by the config); delta_monitor, when given, is
    called with each freshly updated block of perturbations.
    """
    if len(dataset) == 0:
        raise ValueError("cannot generate perturbations for an empty dataset")
    H, W = dataset.image_shape
    d = H * W
    n = len(dataset)
    x0 = dataset.pixel_matrix()
    model = init_denoiser(d, list(hidden_dims), time_embed_dim, rng)
    deltas = np.zeros((n, d))
    if delta_dist is None:
        delta_dist = (
            eudp_distribution(schedule)
            if config.timestep_dist == "eudp"
            else uniform_distribution(schedule.T)
        )
    losses = []
    method = "eudp" if config.timestep_dist == "eudp" else "udp"

    for _ in range(config.N):
        for _ in range(config.K):
            idx = rng.integers(0, n, config.batch_size)
            if perturb_at_xt:
                losses.append(
                    _train_step_at_xt(model, x0[idx], deltas[idx], schedule, config.eta, rng)
                )
            else:
                batch = [Tensor(x0[i] + deltas[i]) for i in idx]
                losses.append(train_step(model, batch, schedule, config.eta, rng))
        for _ in range(config.M):
            ts = np.array([sample_timestep(delta_dist, rng) for _ in range(n)])
            eps = rng.standard_normal((n, d))
            for start in range(0, n, SWEEP_BLOCK):
                end = min(start + SWEEP_BLOCK, n)
                deltas[start:end] = _sweep_block_update(
                    model,
                    schedule,
                    x0[start:end],
                    deltas[start:end],
                    ts[start:end],
                    eps[start:end],
                    config.lam,
                    config.rho,
                    perturb_at_xt,
                )
                if delta_monitor is not None:
                    delta_monitor(deltas[start:end])

    pset = PerturbationSet(
        [Tensor(deltas[i], (H, W)) for i in range(n)], config.rho, method
    )
    return PerturbResult(pset, model, losses)


def generate_udp(dataset, schedule, config, rng, **kwargs) -> PerturbResult:
    """Alg.-style generation with uniform perturbation-level timesteps."""
    if config.timestep_dist != "uniform":
        raise ValueError("generate_udp requires timestep_dist='uniform'")
    return generate(dataset, schedule, config, rng, **kwargs)


def generate_eudp(dataset, schedule, config, rng, **kwargs) -> PerturbResult:
    """Enhanced generation: perturbation-level timesteps follow the
    decay-times-noise-scale distribution; the training level stays uniform."""
    if config.timestep_dist != "eudp":
        raise ValueError("generate_eudp requires timestep_dist='eudp'")
    return generate(dataset, schedule, config, rng, **kwargs)


def generate_random(dataset: LabeledDataset, rho: float, rng: np.random.Generator) -> PerturbationSet:
    """Sign-random baseline: every coordinate is +rho or -rho, i.i.d."""
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    deltas = []
    for img in dataset.images:
        signs = rng.integers(0, 2, img.size) * 2 - 1
        deltas.append(Tensor(rho * signs.astype(np.float64), img.shape))
    return PerturbationSet(deltas, rho, "random")


def zero_perturbations(dataset: LabeledDataset, rho: float) -> PerturbationSet:
    return PerturbationSet(
        [Tensor(np.zeros(img.size), img.shape) for img in dataset.images], rho, "none"
    )


def apply_perturbation(dataset: LabeledDataset, pset: PerturbationSet) -> LabeledDataset:
    """clamp(x + delta, 0, 1) for every sample; labels kept, flags set."""
    if len(pset.deltas) != len(dataset):
        raise ValueError(
            f"perturbation set holds {len(pset.deltas)} samples, dataset has {len(dataset)}"
        )
    out = _apply_deltas(dataset, pset.deltas, range(len(dataset)))
    out.meta["protection"] = {"mode": "full", "method": pset.method, "rho": pset.rho}
    return out


def write_pset(pset: PerturbationSet, path) -> None:
    parts = [
        PSET_MAGIC,
        pack_u32(PSET_VERSION),
        pack_u32(len(pset.deltas)),
        pack_f64(pset.rho),
        pack_u8(_METHOD_TAGS[pset.method]),
    ]
    parts.extend(pack_tensor(d) for d in pset.deltas)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_pset(path) -> PerturbationSet:
    with open(path, "rb") as f:
        r = Reader(f.read())
    r.expect_magic(PSET_MAGIC)
    version = r.u32("version")
    if version != PSET_VERSION:
        raise FileFormatError(f"unsupported perturbation-set version {version}", r.offset - 4)
    count = r.u32("sample count")
    rho = r.f64("rho")
    tag = r.u8("method tag")
    if tag >= len(METHODS):
        raise FileFormatError(f"unknown method tag {tag}", r.offset - 1)
    deltas = [read_tensor(r) for _ in range(count)]
    r.done()
    return PerturbationSet(deltas, rho, METHODS[tag])
