"""Seeded synthetic image datasets and the ``AWDS`` file format.

Every class gets a smooth low-frequency prototype; a sample is the prototype
plus smooth (low-resolution, upsampled) Gaussian variation plus white Gaussian
pixel noise, clipped to [0, 1]. The smooth component gives every sample an
identity that survives small shifts, so instance-level contrastive learning
has something to latch onto.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"AWDS"
DATASET_VERSION = 1

SPLITS = ("pretrain", "verify", "downstream_train", "downstream_test", "key")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}
SPLIT_FRACTIONS = (0.6, 0.2, 0.1, 0.1)


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 5
    samples_per_class: int = 400
    image_shape: tuple[int, int, int] = (16, 16, 3)
    prototype_scale: float = 0.2
    noise_std: float = 0.08
    pixel_noise_std: float = 0.02
    prototype_grid: int = 4
    noise_grid: int = 6
    feature_basis: int = 6  # 0: independent prototypes per class
    held_out_key_class: bool = True
    key_classes: int = 2
    key_pool_size: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        counts = {"num_classes": self.num_classes, "samples_per_class": self.samples_per_class,
                  "prototype_grid": self.prototype_grid, "noise_grid": self.noise_grid}
        if self.held_out_key_class:
            counts.update(key_classes=self.key_classes, key_pool_size=self.key_pool_size)
        bad = [k for k, v in counts.items() if int(v) < 1]
        if bad or len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ValueError(f"invalid synthetic config fields: {bad or ['image_shape']}")
        if self.noise_std < 0 or self.pixel_noise_std < 0 or self.prototype_scale < 0:
            raise ValueError("scales and noise levels must be non-negative")


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    splits: np.ndarray  # (N,) uint8 split codes
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be (N, H, W, C)")
        if not (len(self.images) == len(self.labels) == len(self.splits)):
            raise ValueError("images, labels and split tags differ in length")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == _SPLIT_CODE[split])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Flattened images (n, H*W*C) and labels for one split."""
        idx = self.indices(name)
        return self.images[idx].reshape(len(idx), -1), self.labels[idx]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.num_classes == other.num_classes
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.splits, other.splits))


def _upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear upsampling of a (gh, gw, C) grid to (h, w, C)."""
    gh, gw, _ = grid.shape
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bottom = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def _basis(cfg: SyntheticConfig) -> np.ndarray | None:
    if cfg.feature_basis == 0:
        return None
    g, c = cfg.prototype_grid, cfg.image_shape[2]
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    return rng.uniform(-1, 1, size=(cfg.feature_basis, g, g, c))


def _class_samples(rng: np.random.Generator, cfg: SyntheticConfig, n: int,
                   basis: np.ndarray | None) -> np.ndarray:
    h, w, c = cfg.image_shape
    g = cfg.prototype_grid
    if basis is None:
        grid = rng.uniform(-1, 1, size=(g, g, c))
    else:
        coef = rng.normal(0.0, 1.0, size=len(basis))
        grid = np.tensordot(coef / np.linalg.norm(coef), basis, axes=1)
    proto = 0.5 + cfg.prototype_scale * _upsample(grid, h, w)
    out = np.empty((n, h, w, c))
    for i in range(n):
        smooth = _upsample(rng.normal(0.0, 1.0, size=(cfg.noise_grid, cfg.noise_grid, c)), h, w)
        white = rng.normal(0.0, 1.0, size=(h, w, c))
        out[i] = proto + cfg.noise_std * smooth + cfg.pixel_noise_std * white
    return np.clip(out, 0.0, 1.0)


def _split_counts(n: int) -> list[int]:
    counts = [int(round(f * n)) for f in SPLIT_FRACTIONS[:-1]]
    counts.append(n - sum(counts))
    return counts


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Build the dataset; each class is split 60/20/10/10 across
    pretrain / verify / downstream_train / downstream_test, and the extra
    held-out classes (labels >= num_classes) go entirely to the key pool."""
    master = np.random.SeedSequence(cfg.seed)
    class_seeds = master.spawn(cfg.num_classes + (cfg.key_classes if cfg.held_out_key_class else 0))
    basis = _basis(cfg)
    images, labels, splits = [], [], []
    for k in range(cfg.num_classes):
        rng = np.random.default_rng(class_seeds[k])
        imgs = _class_samples(rng, cfg, cfg.samples_per_class, basis)
        perm = rng.permutation(cfg.samples_per_class)
        tags = np.empty(cfg.samples_per_class, dtype=np.uint8)
        start = 0
        for code, count in enumerate(_split_counts(cfg.samples_per_class)):
            tags[perm[start:start + count]] = code
            start += count
        images.append(imgs)
        labels.append(np.full(cfg.samples_per_class, k, dtype=np.int64))
        splits.append(tags)
    if cfg.held_out_key_class:
        for j in range(cfg.key_classes):
            rng = np.random.default_rng(class_seeds[cfg.num_classes + j])
            images.append(_class_samples(rng, cfg, cfg.key_pool_size, basis))
            labels.append(np.full(cfg.key_pool_size, cfg.num_classes + j, dtype=np.int64))
            splits.append(np.full(cfg.key_pool_size, _SPLIT_CODE["key"], dtype=np.uint8))
    meta = asdict(cfg)
    meta["image_shape"] = list(cfg.image_shape)
    return Dataset(np.concatenate(images), np.concatenate(labels), np.concatenate(splits),
                   cfg.num_classes, meta)


def key_image(ds: Dataset, key_class: int = 0, index: int = 0) -> np.ndarray:
    """Flattened key image drawn from the held-out pool."""
    idx = ds.indices("key")
    pool = idx[ds.labels[idx] == ds.num_classes + key_class]
    if len(pool) == 0:
        raise ValueError(f"no key-pool images for held-out class {key_class}")
    return ds.images[pool[index % len(pool)]].reshape(-1).copy()


# -- AWDS file ------------------------------------------------------------------
#
# b"AWDS" | u32 version | u32 header length | header JSON
# | images float64 LE (N*H*W*C) | labels int64 LE (N) | split tags uint8 (N)

def to_bytes(ds: Dataset) -> bytes:
    header = {"n": int(len(ds.labels)), "image_shape": list(ds.image_shape),
              "num_classes": int(ds.num_classes), "splits": list(SPLITS), "meta": ds.meta}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return (DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, len(raw)) + raw
            + np.ascontiguousarray(ds.images, dtype="<f8").tobytes()
            + np.ascontiguousarray(ds.labels, dtype="<i8").tobytes()
            + np.ascontiguousarray(ds.splits, dtype=np.uint8).tobytes())


def from_bytes(blob: bytes) -> Dataset:
    if len(blob) < 12:
        raise DatasetFormatError("dataset file truncated: header incomplete")
    if blob[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"bad dataset magic {blob[:4]!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset format version {version}")
    if len(blob) < 12 + hlen:
        raise DatasetFormatError("dataset file truncated inside header")
    header = json.loads(blob[12:12 + hlen])
    n, shape = header["n"], tuple(header["image_shape"])
    n_pix = n * int(np.prod(shape))
    pos = 12 + hlen
    expected = pos + 8 * n_pix + 8 * n + n
    if len(blob) != expected:
        raise DatasetFormatError(f"dataset file truncated or padded: expected {expected} bytes, got {len(blob)}")
    images = np.frombuffer(blob[pos:pos + 8 * n_pix], dtype="<f8").astype(np.float64).reshape((n, *shape))
    pos += 8 * n_pix
    labels = np.frombuffer(blob[pos:pos + 8 * n], dtype="<i8").astype(np.int64)
    pos += 8 * n
    splits = np.frombuffer(blob[pos:pos + n], dtype=np.uint8).copy()
    return Dataset(images, labels, splits, header["num_classes"], header.get("meta", {}))


def save(ds: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())
