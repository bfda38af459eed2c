"""Desk-scale generative-quality metrics on raw pixel features.

Three distances between a generated set and the clean reference: a biased
squared MMD with an RBF kernel, k-NN manifold precision/recall, and a
diagonal-covariance Frechet distance on pixel moments. None of them uses a
pretrained embedder, so absolute values are not comparable to
Inception-based scores; the experiment suite relies only on orderings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .diffusion import DenoiserModel, sample
from .scheduler import DiffusionSchedule


@dataclass(frozen=True)
class MetricsRecord:
    mmd: float
    precision: float
    recall: float
    pixel_frechet: float
    n_gen: int
    n_ref: int
    config_hash: str = ""

    def __post_init__(self):
        for name in ("mmd", "precision", "recall", "pixel_frechet"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} is not finite: {v}")
        if self.mmd < -1e-12 or self.pixel_frechet < -1e-12:
            raise ValueError("distance metrics must be nonnegative")
        if not (0 <= self.precision <= 1 and 0 <= self.recall <= 1):
            raise ValueError("precision and recall must lie in [0, 1]")


def _features(x) -> np.ndarray:
    """Flatten a dataset, a list of tensors, or an array into (n, d) rows."""
    if hasattr(x, "pixel_matrix"):
        return x.pixel_matrix()
    if isinstance(x, (list, tuple)):
        if len(x) == 0:
            return np.zeros((0, 0))
        return np.stack([t.values if hasattr(t, "values") else np.ravel(t) for t in x])
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(-1, 1)


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def median_bandwidth(gen, ref) -> float:
    """Median pairwise distance over the union of both sets (zero-safe)."""
    pts = np.concatenate([_features(gen), _features(ref)])
    sq = _pairwise_sq_dists(pts, pts)
    upper = np.sqrt(sq[np.triu_indices(len(pts), k=1)])
    med = float(np.median(upper)) if upper.size else 0.0
    return med if med > 0 else 1.0


def mmd_rbf(gen, ref, bandwidth: float) -> float:
    """Biased squared MMD with kernel exp(-|a-b|^2 / (2 bandwidth^2))."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    g, r = _features(gen), _features(ref)
    if g.shape[0] == 0 or r.shape[0] == 0:
        raise ValueError("mmd requires nonempty sample sets")
    s = 2.0 * bandwidth * bandwidth
    kgg = np.exp(-_pairwise_sq_dists(g, g) / s).mean()
    krr = np.exp(-_pairwise_sq_dists(r, r) / s).mean()
    kgr = np.exp(-_pairwise_sq_dists(g, r) / s).mean()
    return float(max(kgg + krr - 2.0 * kgr, 0.0))


def _knn_radii(pts: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbor within the set."""
    d = np.sqrt(_pairwise_sq_dists(pts, pts))
    d_sorted = np.sort(d, axis=1)
    return d_sorted[:, k]  # column 0 is the self-distance


def knn_precision_recall(gen, ref, k: int):
    """Manifold overlap estimates on raw features.

    A point lies in a set's manifold if it falls inside any member's k-NN
    ball. Precision is the covered fraction of generated points under the
    reference manifold; recall swaps the roles.
    """
    g, r = _features(gen), _features(ref)
    if g.shape[0] == 0 or r.shape[0] == 0:
        raise ValueError("precision/recall require nonempty sample sets")
    if k < 1 or k >= min(g.shape[0], r.shape[0]):
        raise ValueError(
            f"k must satisfy 1 <= k < min(n_gen={g.shape[0]}, n_ref={r.shape[0]}), got {k}"
        )
    dgr = np.sqrt(_pairwise_sq_dists(g, r))
    precision = float(np.mean(np.any(dgr <= _knn_radii(r, k)[None, :], axis=1)))
    recall = float(np.mean(np.any(dgr <= _knn_radii(g, k)[:, None], axis=0)))
    return precision, recall


def pixel_frechet(gen, ref) -> float:
    """Frechet distance between diagonal-Gaussian fits of pixel features.

    |mu_g - mu_r|^2 plus the diagonal trace term, which collapses to the sum
    of squared differences of per-pixel standard deviations.
    """
    g, r = _features(gen), _features(ref)
    if g.shape[0] < 2 or r.shape[0] < 2:
        raise ValueError("pixel_frechet requires at least 2 samples per set")
    mu_g, mu_r = g.mean(axis=0), r.mean(axis=0)
    sd_g = np.sqrt(g.var(axis=0, ddof=1))
    sd_r = np.sqrt(r.var(axis=0, ddof=1))
    return float(np.sum((mu_g - mu_r) ** 2) + np.sum((sd_g - sd_r) ** 2))


def evaluate_images(gen, ref, k: int = 3, bandwidth: float | None = None, config_hash: str = "") -> MetricsRecord:
    """All three metrics for already-generated images against a reference."""
    g, r = _features(gen), _features(ref)
    bw = median_bandwidth(g, r) if bandwidth is None else bandwidth
    precision, recall = knn_precision_recall(g, r, k)
    return MetricsRecord(
        mmd=mmd_rbf(g, r, bw),
        precision=precision,
        recall=recall,
        pixel_frechet=pixel_frechet(g, r),
        n_gen=g.shape[0],
        n_ref=r.shape[0],
        config_hash=config_hash,
    )


def evaluate_run(
    model: DenoiserModel,
    schedule: DiffusionSchedule,
    clean_ref,
    n_gen: int,
    rng: np.random.Generator,
    k: int = 3,
    bandwidth: float | None = None,
    config_hash: str | None = None,
) -> MetricsRecord:
    """Sample n_gen images from the model and score them against the reference."""
    if n_gen < 1:
        raise ValueError(f"n_gen must be >= 1, got {n_gen}")
    if config_hash is None:
        payload = json.dumps(
            {
                "beta_start": schedule.beta_start,
                "beta_end": schedule.beta_end,
                "T": schedule.T,
                "n_gen": n_gen,
                "k": k,
            },
            sort_keys=True,
        )
        config_hash = hashlib.sha256(payload.encode()).hexdigest()[:12]
    gen = sample(model, schedule, n_gen, rng)
    return evaluate_images(gen, clean_ref, k=k, bandwidth=bandwidth, config_hash=config_hash)


def classwise_records(gen, ref_ds, k: int = 3, bandwidth: float | None = None) -> dict:
    """Score the generated set against each class's reference subset.

    Per-class distances of the full generated mixture; when a class stops
    being generated its subset distance rises while the others stay put,
    which is the signal the class-wise protection experiment reads.
    """
    g = _features(gen)
    labels = np.array(ref_ds.labels)
    out = {}
    for c in range(ref_ds.num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise ValueError(f"class {c} has fewer than 2 reference samples")
        ref_c = ref_ds.pixel_matrix()[idx]
        out[c] = evaluate_images(g, ref_c, k=min(k, idx.size - 1), bandwidth=bandwidth)
    return out
