"""Procedural toy image corpus, protection assembly, and robustness transforms.

Images are grayscale H x W tensors with values in [0, 1]. Four shape
families (disk, square, cross, stripes) with jittered geometry and mild
pixel noise stand in for a real dataset at desk scale. Transforms model the
post-hoc perturbations a data exploiter might apply before training:
additive noise, bit-depth quantization, Gaussian blur, and a block-DCT
compression round trip (a simplified stand-in for a real codec, documented
as such and not bit-compatible with any).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .binio import (
    FileFormatError,
    Reader,
    pack_f64,
    pack_u8,
    pack_u16,
    pack_u32,
)

DATASET_MAGIC = b"UDDS"
DATASET_VERSION = 1

SHAPE_KINDS = ("disk", "square", "cross", "stripes")


@dataclass
class LabeledDataset:
    images: list  # Tensors of shape (H, W), values in [0, 1]
    labels: list
    protected_flags: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n or len(self.protected_flags) != n:
            raise ValueError(
                f"images/labels/flags lengths differ: {n}/{len(self.labels)}/{len(self.protected_flags)}"
            )
        shapes = {img.shape for img in self.images}
        if len(shapes) > 1:
            raise ValueError(f"images have mixed shapes: {sorted(shapes)}")
        nc = self.num_classes
        for i, (img, label) in enumerate(zip(self.images, self.labels)):
            if img.values.min() < 0.0 or img.values.max() > 1.0:
                raise ValueError(f"image {i} has pixel values outside [0, 1]")
            if not 0 <= label < nc:
                raise ValueError(f"label {label} of image {i} outside [0, {nc})")

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        if "num_classes" in self.meta:
            return int(self.meta["num_classes"])
        return max(self.labels, default=0) + 1

    @property
    def image_shape(self):
        return self.images[0].shape if self.images else None

    def pixel_matrix(self) -> np.ndarray:
        """All images flattened into an (n, H*W) array."""
        return np.stack([img.values for img in self.images]) if self.images else np.zeros((0, 0))


@dataclass
class ToySpec:
    H: int = 16
    W: int = 16
    num_classes: int = 4
    per_class: int = 128
    shape_kinds: dict = field(
        default_factory=lambda: {0: "disk", 1: "square", 2: "cross", 3: "stripes"}
    )
    jitter_pos: int = 2
    jitter_size: int = 1
    pixel_noise: float = 0.05
    seed: int = 1234

    def __post_init__(self):
        if self.H < 8 or self.W < 8:
            raise ValueError(f"image size must be at least 8x8, got {self.H}x{self.W}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.per_class < 0:
            raise ValueError(f"per_class must be >= 0, got {self.per_class}")
        self.shape_kinds = {int(c): k for c, k in self.shape_kinds.items()}
        for c in range(self.num_classes):
            kind = self.shape_kinds.get(c)
            if kind not in SHAPE_KINDS:
                raise ValueError(f"class {c} maps to unknown shape kind {kind!r}")


def _render(kind: str, H: int, W: int, rng: np.random.Generator, spec: ToySpec) -> np.ndarray:
    jy = int(rng.integers(-spec.jitter_pos, spec.jitter_pos + 1))
    jx = int(rng.integers(-spec.jitter_pos, spec.jitter_pos + 1))
    js = int(rng.integers(-spec.jitter_size, spec.jitter_size + 1))
    fg = rng.uniform(0.7, 0.95)
    cy, cx = H / 2 + jy, W / 2 + jx
    size = max(2, H // 4 + js)
    yy, xx = np.mgrid[0:H, 0:W]
    if kind == "disk":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    elif kind == "square":
        mask = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
    elif kind == "cross":
        arm = max(1, size // 2)
        mask = ((np.abs(yy - cy) <= 1) & (np.abs(xx - cx) <= size)) | (
            (np.abs(xx - cx) <= 1) & (np.abs(yy - cy) <= arm * 2)
        )
    elif kind == "stripes":
        period = int(rng.integers(3, 6))
        phase = int(rng.integers(0, period))
        mask = ((xx + phase) // period) % 2 == 0
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    img = np.where(mask, fg, 0.1)
    img = img + rng.uniform(-spec.pixel_noise, spec.pixel_noise, (H, W))
    return np.clip(img, 0.0, 1.0)


def gen_toy_dataset(spec: ToySpec, rng: np.random.Generator | None = None) -> LabeledDataset:
    """Class-balanced shape renderings, deterministic for the spec's seed."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    images, labels = [], []
    for c in range(spec.num_classes):
        kind = spec.shape_kinds[c]
        for _ in range(spec.per_class):
            images.append(Tensor(_render(kind, spec.H, spec.W, rng, spec)))
            labels.append(c)
    meta = {"generator": "toy-shapes", **asdict(spec)}
    meta["shape_kinds"] = {str(c): k for c, k in spec.shape_kinds.items()}
    return LabeledDataset(images, labels, [False] * len(images), meta)


def _apply_deltas(ds: LabeledDataset, deltas, indices) -> LabeledDataset:
    """Clamped per-index application of perturbations; flags follow."""
    chosen = set(int(i) for i in indices)
    images, flags = [], []
    for i, img in enumerate(ds.images):
        if i in chosen:
            d = deltas[i]
            if d.shape != img.shape:
                raise ValueError(
                    f"perturbation {i} shape {d.shape} does not match image shape {img.shape}"
                )
            images.append(Tensor(np.clip(img.values + d.values, 0.0, 1.0), img.shape))
            flags.append(True)
        else:
            images.append(img.copy())
            flags.append(False)
    return LabeledDataset(images, list(ds.labels), flags, dict(ds.meta))


def mix_protection(
    clean: LabeledDataset, pset, ratio: float, rng: np.random.Generator
) -> LabeledDataset:
    """Protect a seeded random subset of round(n * ratio) samples."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"protection ratio must be in [0, 1], got {ratio}")
    n = len(clean)
    if len(pset.deltas) != n:
        raise ValueError(f"perturbation set holds {len(pset.deltas)} samples, dataset has {n}")
    k = int(np.floor(n * ratio + 0.5))  # round half away from zero (ratio >= 0)
    chosen = rng.permutation(n)[:k]
    out = _apply_deltas(clean, pset.deltas, chosen)
    out.meta["protection"] = {"mode": "ratio", "ratio": ratio, "count": k}
    return out


def classwise_protect(clean: LabeledDataset, pset, classes) -> LabeledDataset:
    """Protect exactly the samples whose label is in the given class set."""
    classes = sorted(set(int(c) for c in classes))
    nc = clean.num_classes
    for c in classes:
        if not 0 <= c < nc:
            raise ValueError(f"unknown class {c}, labels lie in [0, {nc})")
    if len(pset.deltas) != len(clean):
        raise ValueError(
            f"perturbation set holds {len(pset.deltas)} samples, dataset has {len(clean)}"
        )
    chosen = [i for i, lab in enumerate(clean.labels) if lab in classes]
    out = _apply_deltas(clean, pset.deltas, chosen)
    out.meta["protection"] = {"mode": "classwise", "classes": classes}
    return out


def _with_pixels(ds: LabeledDataset, new_images, transform_desc) -> LabeledDataset:
    meta = dict(ds.meta)
    meta["transforms"] = list(meta.get("transforms", [])) + [transform_desc]
    return LabeledDataset(
        [Tensor(img, ds.images[i].shape) for i, img in enumerate(new_images)],
        list(ds.labels),
        list(ds.protected_flags),
        meta,
    )


def transform_random_noise(ds: LabeledDataset, scale: float, rng: np.random.Generator):
    if scale < 0:
        raise ValueError(f"noise scale must be >= 0, got {scale}")
    out = [
        np.clip(img.values + rng.uniform(-scale, scale, img.size), 0.0, 1.0)
        for img in ds.images
    ]
    return _with_pixels(ds, out, {"kind": "random_noise", "scale": scale})


def transform_quantize(ds: LabeledDataset, bits: int):
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    levels = float(2**bits - 1)
    out = [np.floor(img.values * levels + 0.5) / levels for img in ds.images]
    return _with_pixels(ds, out, {"kind": "quantize", "bits": bits})


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian tap grid; even sizes center on half-pixel offsets."""
    if kernel_size < 1:
        raise ValueError(f"kernel_size must be >= 1, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    offsets = np.arange(kernel_size) - (kernel_size - 1) / 2.0
    k = np.exp(-(offsets[:, None] ** 2 + offsets[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def transform_gaussian_blur(ds: LabeledDataset, kernel_size: int, sigma: float):
    kernel = gaussian_kernel(kernel_size, sigma)
    H, W = ds.image_shape if ds.image_shape else (0, 0)
    if ds.images and kernel_size > min(H, W):
        raise ValueError(f"kernel size {kernel_size} exceeds image size {H}x{W}")
    lo = (kernel_size - 1) // 2
    hi = kernel_size // 2
    out = []
    for img in ds.images:
        padded = np.pad(img.array(), ((lo, hi), (lo, hi)), mode="reflect")
        acc = np.zeros((H, W))
        for dy in range(kernel_size):
            for dx in range(kernel_size):
                acc += kernel[dy, dx] * padded[dy : dy + H, dx : dx + W]
        out.append(np.clip(acc, 0.0, 1.0).reshape(-1))
    return _with_pixels(ds, out, {"kind": "gaussian_blur", "kernel_size": kernel_size, "sigma": sigma})


# Standard 8x8 luminance quantization base table.
_QUANT_BASE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    mat = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * x + 1) * k / (2 * n))
    mat[0, :] = np.sqrt(1.0 / n)
    return mat


_DCT8 = _dct_matrix(8)


def quantization_table(quality: int) -> np.ndarray:
    """Quality-scaled table; quality 100 is all ones and the DC entry is
    always 1, so entry-1 coefficients pass through unrounded (constants and
    full-quality images survive the round trip exactly up to DCT precision)."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((_QUANT_BASE * s + 50.0) / 100.0)
    table = np.clip(table, 1.0, 255.0)
    table[0, 0] = 1.0
    return table


def transform_dct_compress(ds: LabeledDataset, quality: int):
    """8x8 block DCT, quality-scaled coefficient snapping, inverse DCT.

    An energy-compacting lossy round trip in the 0..255 intensity domain.
    Coefficients are snapped to multiples of their table entry where the
    entry exceeds 1; entry-1 positions are kept exact.
    """
    table = quantization_table(quality)
    quantize = table > 1.0
    out = []
    for img in ds.images:
        H, W = img.shape
        padH = (-H) % 8
        padW = (-W) % 8
        arr = np.pad(img.array() * 255.0, ((0, padH), (0, padW)), mode="reflect")
        rec = np.empty_like(arr)
        for by in range(0, arr.shape[0], 8):
            for bx in range(0, arr.shape[1], 8):
                block = arr[by : by + 8, bx : bx + 8]
                coef = _DCT8 @ block @ _DCT8.T
                snapped = np.where(quantize, np.round(coef / table) * table, coef)
                rec[by : by + 8, bx : bx + 8] = _DCT8.T @ snapped @ _DCT8
        out.append(np.clip(rec[:H, :W] / 255.0, 0.0, 1.0).reshape(-1))
    return _with_pixels(ds, out, {"kind": "dct_compress", "quality": quality})


def write_dataset(ds: LabeledDataset, path) -> None:
    H, W = ds.image_shape if ds.image_shape else (0, 0)
    meta_bytes = json.dumps(ds.meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [
        DATASET_MAGIC,
        pack_u32(DATASET_VERSION),
        pack_u32(len(ds)),
        pack_u32(H),
        pack_u32(W),
        pack_u32(ds.num_classes),
        pack_u32(len(meta_bytes)),
        meta_bytes,
    ]
    for img, label, flag in zip(ds.images, ds.labels, ds.protected_flags):
        parts.append(pack_u16(label))
        parts.append(pack_u8(1 if flag else 0))
        parts.append(img.values.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_dataset(path) -> LabeledDataset:
    with open(path, "rb") as f:
        r = Reader(f.read())
    r.expect_magic(DATASET_MAGIC)
    version = r.u32("version")
    if version != DATASET_VERSION:
        raise FileFormatError(f"unsupported dataset version {version}", r.offset - 4)
    n = r.u32("image count")
    H = r.u32("height")
    W = r.u32("width")
    num_classes = r.u32("class count")
    meta_len = r.u32("meta length")
    meta_at = r.offset
    try:
        meta = json.loads(r.take(meta_len, "meta json").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"bad meta json ({e})", meta_at) from e
    if n > 0 and (H == 0 or W == 0):
        raise FileFormatError("zero image dimensions", 12)
    images, labels, flags = [], [], []
    for i in range(n):
        labels.append(r.u16(f"label of image {i}"))
        flags.append(bool(r.u8(f"flag of image {i}")))
        at = r.offset
        pixels = r.f64_array(H * W, f"pixels of image {i}")
        if not np.isfinite(pixels).all() or pixels.min() < 0 or pixels.max() > 1:
            raise FileFormatError(f"image {i} has pixels outside [0, 1]", at)
        images.append(Tensor(pixels, (H, W)))
    r.done()
    meta.setdefault("num_classes", num_classes)
    return LabeledDataset(images, labels, flags, meta)


def write_pgm(image: Tensor, path) -> None:
    """8-bit binary PGM export for human inspection."""
    H, W = image.shape
    gray = np.floor(image.values * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode())
        f.write(gray.tobytes())
