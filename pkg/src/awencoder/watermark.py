"""Adversarial watermark generation (PGD toward a key image) and embedding."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .contrastive import ContrastiveConfig, ContrastiveModel, train
from .models import MLP, fingerprint
from .numcore import NumericError, Tensor

WATERMARK_MAGIC = b"AWWM"
WATERMARK_VERSION = 1


class WatermarkFormatError(ValueError):
    pass


def to_unit_epsilon(epsilon: float) -> float:
    """Accept epsilon on either the 0-255 or the [0, 1] pixel scale."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return epsilon / 255.0 if epsilon > 1.0 else float(epsilon)


@dataclass
class Watermark:
    w_adv: np.ndarray  # flat, [-epsilon, epsilon]
    x_tar: np.ndarray  # flat key image in [0, 1]
    epsilon: float
    image_shape: tuple[int, ...]
    steps: int = 0
    step_size: float = 0.0
    final_similarity: float = float("nan")
    loss_trajectory: list[float] = field(default_factory=list)
    generator: str = ""

    def __post_init__(self):
        self.w_adv = np.asarray(self.w_adv, dtype=np.float64).reshape(-1)
        self.x_tar = np.asarray(self.x_tar, dtype=np.float64).reshape(-1)
        self.image_shape = tuple(int(s) for s in self.image_shape)
        if self.w_adv.shape != self.x_tar.shape or self.w_adv.size != int(np.prod(self.image_shape)):
            raise ValueError("watermark, key image and image shape disagree")
        if np.max(np.abs(self.w_adv), initial=0.0) > self.epsilon:
            raise ValueError("watermark exceeds its l-inf bound")
        if self.x_tar.min(initial=0.0) < 0 or self.x_tar.max(initial=0.0) > 1:
            raise ValueError("key image must lie in [0, 1]")

    def apply(self, images: np.ndarray) -> np.ndarray:
        """Perturbed copies of flat images, clipped to [0, 1]."""
        return np.clip(np.asarray(images, dtype=np.float64) + self.w_adv, 0.0, 1.0)

    @classmethod
    def zero(cls, x_tar: np.ndarray, image_shape, epsilon: float = 0.0) -> Watermark:
        return cls(np.zeros(np.size(x_tar)), x_tar, epsilon, image_shape)


# -- losses -------------------------------------------------------------------------

def adv_loss(encoder: MLP, batch, w, x_tar) -> Tensor:
    """Mean of ``1 - cos(E(clip(x + w)), E(x_tar))`` over the batch."""
    batch = nc.as_tensor(batch)
    w = nc.as_tensor(w)
    target = encoder.predict_array(np.asarray(x_tar, dtype=np.float64).reshape(1, -1))
    emb = encoder(nc.clamp(nc.add(batch, nc.reshape(w, (1, -1))), 0.0, 1.0))
    sims = nc.cosine_sim(emb, Tensor(target), axis=1)
    return nc.mean(nc.sub(1.0, sims))


def wat_loss(encoder: MLP, batch, w: Watermark | np.ndarray) -> Tensor:
    """Mean KL(softmax(E(x)) || softmax(E(clip(x + w)))) over the batch."""
    w_adv = w.w_adv if isinstance(w, Watermark) else np.asarray(w, dtype=np.float64).reshape(-1)
    batch = nc.as_tensor(batch)
    clean = encoder(batch)
    adv = encoder(Tensor(np.clip(batch.data + w_adv, 0.0, 1.0)))
    return nc.mean(nc.softmax_kl(clean, adv, axis=1))


# -- generation ---------------------------------------------------------------------

@dataclass(frozen=True)
class PGDConfig:
    steps: int = 200
    step_size: float | None = None  # defaults to epsilon / 10
    n_generation: int = 500

    def __post_init__(self):
        if self.steps < 0 or self.n_generation < 1:
            raise ValueError("steps must be >= 0 and n_generation >= 1")


def generate_watermark(encoder: MLP, images: np.ndarray, x_tar: np.ndarray, epsilon: float,
                       cfg: PGDConfig = PGDConfig(), seed: int = 0,
                       image_shape: tuple[int, ...] | None = None) -> Watermark:
    """Signed-gradient PGD on a universal perturbation, projected onto the
    l-inf ball of radius ``epsilon`` after every step. ``encoder`` is never
    modified."""
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    x_tar = np.asarray(x_tar, dtype=np.float64).reshape(-1)
    eps = to_unit_epsilon(epsilon)
    step = eps / 10.0 if cfg.step_size is None else to_unit_epsilon(cfg.step_size)
    rng = np.random.default_rng(seed)
    n = min(cfg.n_generation, len(images))
    subset = images[np.sort(rng.choice(len(images), n, replace=False))]
    batch = Tensor(subset)
    w = np.zeros(images.shape[1])
    trajectory = []
    for _ in range(cfg.steps):
        wt = Tensor(w, requires_grad=True)
        loss = adv_loss(encoder, batch, wt, x_tar)
        trajectory.append(loss.item())
        if eps == 0:
            continue
        loss.backward()
        grad = wt.grad if wt.grad is not None else np.zeros_like(w)
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite watermark gradient")
        w = np.clip(w - step * np.sign(grad), -eps, eps)
        if np.max(np.abs(w)) > eps:
            raise AssertionError("projection left the l-inf ball")
    final = adv_loss(encoder, batch, Tensor(w), x_tar).item()
    trajectory.append(final)
    shape = image_shape or (images.shape[1],)
    return Watermark(w, x_tar, eps, shape, steps=cfg.steps, step_size=step,
                     final_similarity=1.0 - final, loss_trajectory=trajectory,
                     generator=fingerprint(encoder))


# -- embedding ------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbedConfig:
    alpha: float = 40.0
    epochs: int = 50
    learning_rate: float = 0.003
    batch_size: int | None = None  # None: 50 for SimCLR, 32 for MoCo

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


DEFAULT_EMBED_BATCH = {"simclr": 50, "moco": 32}


def embedding_config(ccfg: ContrastiveConfig, ecfg: EmbedConfig) -> ContrastiveConfig:
    batch = ecfg.batch_size or DEFAULT_EMBED_BATCH[ccfg.algorithm]
    return replace(ccfg, epochs=ecfg.epochs, learning_rate=ecfg.learning_rate, batch_size=batch)


def embed_watermark(model: ContrastiveModel, images: np.ndarray, wm: Watermark, cfg: EmbedConfig,
                    ccfg: ContrastiveConfig, seed: int, log=None) -> ContrastiveModel:
    """Continue contrastive training under ``L_con + alpha * L_wat``.

    For every sample one of its two augmented views is picked at random; the
    KL term compares that view with its perturbed copy. Both views feed the
    contrastive term unperturbed.
    """
    train_cfg = embedding_config(ccfg, cfg)
    if cfg.alpha == 0:
        return train(model, images, train_cfg, seed, log=log)
    w_adv = wm.w_adv
    alpha = cfg.alpha

    def watermark_term(encoder, h, views, select_rng):
        n = len(views) // 2
        rows = 2 * np.arange(n) + select_rng.integers(0, 2, size=n)
        adv = encoder(Tensor(np.clip(views[rows] + w_adv, 0.0, 1.0)))
        term = nc.mean(nc.softmax_kl(nc.take(h, rows), adv, axis=1))
        return nc.mul(term, alpha), term

    return train(model, images, train_cfg, seed, extra=watermark_term, log=log)


# -- AWWM file --------------------------------------------------------------------------
#
# b"AWWM" | u32 version | u32 header length | header JSON
# | w_adv float64 LE | x_tar float64 LE
# header: epsilon, image_shape, generator, pgd {steps, step_size, final_similarity,
#         loss_trajectory}

def to_bytes(wm: Watermark) -> bytes:
    header = {
        "epsilon": wm.epsilon,
        "image_shape": list(wm.image_shape),
        "generator": wm.generator,
        "pgd": {"steps": wm.steps, "step_size": wm.step_size,
                "final_similarity": wm.final_similarity, "loss_trajectory": wm.loss_trajectory},
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return (WATERMARK_MAGIC + struct.pack("<II", WATERMARK_VERSION, len(raw)) + raw
            + np.ascontiguousarray(wm.w_adv, dtype="<f8").tobytes()
            + np.ascontiguousarray(wm.x_tar, dtype="<f8").tobytes())


def from_bytes(blob: bytes) -> Watermark:
    if len(blob) < 12:
        raise WatermarkFormatError("watermark file truncated: header incomplete")
    if blob[:4] != WATERMARK_MAGIC:
        raise WatermarkFormatError(f"bad watermark magic {blob[:4]!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != WATERMARK_VERSION:
        raise WatermarkFormatError(f"unsupported watermark version {version}")
    if len(blob) < 12 + hlen:
        raise WatermarkFormatError("watermark file truncated inside header")
    header = json.loads(blob[12:12 + hlen])
    d = int(np.prod(header["image_shape"]))
    pos = 12 + hlen
    if len(blob) != pos + 16 * d:
        raise WatermarkFormatError(f"watermark payload has {len(blob) - pos} bytes, expected {16 * d}")
    w = np.frombuffer(blob[pos:pos + 8 * d], dtype="<f8").astype(np.float64)
    x = np.frombuffer(blob[pos + 8 * d:], dtype="<f8").astype(np.float64)
    pgd = header["pgd"]
    return Watermark(w, x, header["epsilon"], tuple(header["image_shape"]), steps=pgd["steps"],
                     step_size=pgd["step_size"], final_similarity=pgd["final_similarity"],
                     loss_trajectory=list(pgd["loss_trajectory"]), generator=header["generator"])


def save(wm: Watermark, path) -> None:
    Path(path).write_bytes(to_bytes(wm))


def load(path) -> Watermark:
    return from_bytes(Path(path).read_bytes())
