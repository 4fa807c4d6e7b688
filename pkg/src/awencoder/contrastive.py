"""SimCLR / MoCo v2 losses, augmentation and the contrastive training loop."""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import numcore as nc
from .models import MLP, ParamStore, build_mlp
from .numcore import Tensor


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class AugmentConfig:
    shift_max: int = 2
    flip_prob: float = 0.5
    noise_std: float = 0.05
    mask_frac: float = 0.1

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1 or not 0 <= self.mask_frac <= 1:
            raise ValueError("flip_prob and mask_frac must lie in [0, 1]")
        if self.shift_max < 0 or self.noise_std < 0:
            raise ValueError("shift_max and noise_std must be non-negative")

    @classmethod
    def identity(cls) -> AugmentConfig:
        return cls(shift_max=0, flip_prob=0.0, noise_std=0.0, mask_frac=0.0)


DEFAULT_TEMPERATURE = {"simclr": 0.5, "moco": 0.2}


@dataclass(frozen=True)
class ContrastiveConfig:
    algorithm: str = "simclr"
    temperature: float | None = None
    batch_size: int = 50
    epochs: int = 50
    learning_rate: float = 0.003
    momentum: float = 0.99
    queue_size: int = 256
    hidden_dims: tuple[int, ...] = (256, 128)
    embed_dim: int = 32
    head_dims: tuple[int, ...] = (32, 16)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.algorithm not in DEFAULT_TEMPERATURE:
            raise ValueError(f"algorithm must be one of {sorted(DEFAULT_TEMPERATURE)}")
        if self.temperature is None:
            object.__setattr__(self, "temperature", DEFAULT_TEMPERATURE[self.algorithm])
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.queue_size < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("queue_size and batch_size must be >= 1, epochs >= 0")


# -- augmentation -------------------------------------------------------------------

def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One random view of an (H, W, C) image in [0, 1]."""
    h, w, _ = x.shape
    out = x
    if cfg.shift_max > 0:
        s = cfg.shift_max
        dy, dx = rng.integers(-s, s + 1, size=2)
        padded = np.pad(x, ((s, s), (s, s), (0, 0)), mode="edge")
        out = padded[s + dy:s + dy + h, s + dx:s + dx + w]
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[:, ::-1]
    if cfg.noise_std > 0:
        out = out + rng.normal(0.0, cfg.noise_std, size=out.shape)
    if cfg.mask_frac > 0:
        area = rng.uniform(0.0, cfg.mask_frac) * h * w
        mh = int(np.clip(round(np.sqrt(area)), 0, h))
        mw = int(np.clip(round(area / mh), 0, w)) if mh else 0
        if mh and mw:
            top = rng.integers(0, h - mh + 1)
            left = rng.integers(0, w - mw + 1)
            out = out.copy()
            out[top:top + mh, left:left + mw] = 0.0
    return np.clip(out, 0.0, 1.0)


def augment_pair(x: np.ndarray, cfg: AugmentConfig, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return augment(x, cfg, rng), augment(x, cfg, rng)


def augment_views(images: np.ndarray, indices: Iterable[int], cfg: AugmentConfig, seed: int,
                  epoch: int) -> np.ndarray:
    """Two views per sample, interleaved: rows 2k and 2k+1 belong to sample k.

    Each sample draws from its own ``(seed, epoch, index)`` stream, so results
    do not depend on batch composition.
    """
    views = []
    for i in indices:
        a, b = augment_pair(images[i], cfg, [seed, epoch, int(i)])
        views.append(a.reshape(-1))
        views.append(b.reshape(-1))
    return np.stack(views)


# -- losses ---------------------------------------------------------------------------

def ntxent_loss(z: Tensor, temperature: float) -> Tensor:
    """NT-Xent averaged over all 2N anchors; rows 2k and 2k+1 form a positive pair."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = nc.as_tensor(z)
    n2 = z.shape[0]
    if n2 < 2 or n2 % 2:
        raise ValueError(f"ntxent_loss needs an even number (>= 2) of rows, got {n2}")
    zn = nc.l2_normalize(z, axis=1)
    sims = nc.mul(nc.matmul(zn, nc.transpose(zn)), 1.0 / temperature)
    rows = np.arange(n2)
    lse = nc.logsumexp(sims, axis=1, where=~np.eye(n2, dtype=bool))
    positives = nc.take(sims, (rows, rows ^ 1))
    return nc.mean(nc.sub(lse, positives))


def moco_loss_batch(q: Tensor, k_pos: np.ndarray, queue: np.ndarray, temperature: float,
                    check_norm: bool = True) -> Tensor:
    """Mean MoCo loss over a batch of queries; logit 0 is the positive key."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    q = nc.as_tensor(q)
    k_pos = np.atleast_2d(np.asarray(k_pos, dtype=np.float64))
    queue = np.asarray(queue, dtype=np.float64).reshape(-1, q.shape[1])
    if check_norm:
        for name, arr in (("query", q.data), ("positive key", k_pos), ("queue", queue)):
            if arr.size and np.any(np.abs(np.linalg.norm(arr, axis=1) - 1.0) > 1e-6):
                raise ValueError(f"moco_loss: {name} vectors must be l2-normalized")
    pos = nc.tsum(nc.mul(q, k_pos), axis=1, keepdims=True)
    logits = pos if len(queue) == 0 else nc.concat([pos, nc.matmul(q, Tensor(queue.T))], axis=1)
    logits = nc.mul(logits, 1.0 / temperature)
    return nc.mean(nc.sub(nc.logsumexp(logits, axis=1), nc.take(logits, (slice(None), 0))))


def moco_loss(q, k_plus, queue, temperature: float) -> Tensor:
    """Single-query MoCo loss; the denominator runs over ``queue`` with ``k_plus``
    counted once (it is added when the queue does not already hold it)."""
    keys = queue.array() if isinstance(queue, MocoQueue) else np.asarray(queue, dtype=np.float64)
    q = nc.reshape(nc.as_tensor(q), (1, -1))
    k_plus = np.asarray(k_plus, dtype=np.float64).reshape(1, -1)
    keys = keys.reshape(-1, k_plus.shape[1])
    present = np.all(np.abs(keys - k_plus) < 1e-12, axis=1)
    if present.any():
        keys = keys[~present]
    return moco_loss_batch(q, k_plus, keys, temperature)


def momentum_update(key: ParamStore, query: ParamStore, momentum: float) -> ParamStore:
    """Return ``momentum * key + (1 - momentum) * query`` entrywise."""
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    if list(key) != list(query) or any(key[n].shape != query[n].shape for n in key):
        raise ValueError("momentum_update: parameter stores do not match")
    return ParamStore([(n, Tensor(momentum * key[n].data + (1.0 - momentum) * query[n].data)) for n in key])


class MocoQueue:
    """FIFO dictionary of l2-normalized keys, newest last."""

    def __init__(self, size: int, dim: int):
        if size < 1:
            raise ValueError("queue size must be >= 1")
        self.size = size
        self.dim = dim
        self._keys: deque[np.ndarray] = deque(maxlen=size)

    def __len__(self) -> int:
        return len(self._keys)

    def push(self, keys: np.ndarray) -> None:
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise ValueError(f"queue expects {self.dim}-d keys")
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("queue keys must be l2-normalized")
        self._keys.extend(k.copy() for k in keys)

    def array(self) -> np.ndarray:
        if not self._keys:
            return np.zeros((0, self.dim))
        return np.stack(self._keys)


# -- training -------------------------------------------------------------------------

@dataclass
class ContrastiveModel:
    """Query encoder + projection head, and for MoCo the momentum copies and queue."""

    encoder: MLP
    head: MLP
    key_encoder: MLP | None = None
    key_head: MLP | None = None
    queue: MocoQueue | None = None
    history: list[dict] = field(default_factory=list)

    def copy(self) -> ContrastiveModel:
        # queue and history are per-run state and restart empty
        return ContrastiveModel(self.encoder.copy(), self.head.copy())


def init_model(input_dim: int, cfg: ContrastiveConfig, seed: int) -> ContrastiveModel:
    ss = np.random.SeedSequence(seed).spawn(2)
    enc_dims = (input_dim, *cfg.hidden_dims, cfg.embed_dim)
    encoder = build_mlp(enc_dims, int(ss[0].generate_state(1)[0]), kind="encoder")
    head = build_mlp((cfg.embed_dim, *cfg.head_dims), int(ss[1].generate_state(1)[0]), kind="head")
    return ContrastiveModel(encoder, head)


def _sgd(params: Iterable[Tensor], lr: float) -> None:
    for t in params:
        if t.grad is not None:
            t.data = t.data - lr * t.grad
        t.grad = None


def _streams(seed: int, epoch: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(batch-order stream, view-selection stream) for one epoch."""
    return (np.random.default_rng([seed, epoch, 0xBA7C]),
            np.random.default_rng([seed, epoch, 0x5E1E]))


# Extra loss hook: (encoder, its output on the interleaved views, the views, selection rng)
# -> (weighted term, raw term) or None.
ExtraLoss = Callable[[MLP, Tensor, np.ndarray, np.random.Generator], "tuple[Tensor, Tensor] | None"]


def train(model: ContrastiveModel, images: np.ndarray, cfg: ContrastiveConfig, seed: int,
          extra: ExtraLoss | None = None, log: Callable[[dict], None] | None = None,
          epoch_offset: int = 0) -> ContrastiveModel:
    """Run ``cfg.epochs`` epochs of gradient descent on a private copy of ``model``.

    ``images`` are (n, H, W, C). ``extra`` returns ``(weighted_term, raw_term)``
    to add to the contrastive loss (used for watermark embedding).
    """
    if len(images) == 0:
        raise ValueError("cannot train on an empty split")
    model = model.copy()
    enc, head = model.encoder, model.head
    trainable = [*enc.params.values(), *head.params.values()]
    for t in trainable:
        t.requires_grad = True
    if cfg.algorithm == "moco":
        model.key_encoder, model.key_head = enc.copy(), head.copy()
        model.queue = MocoQueue(cfg.queue_size, head.output_dim)
    n = len(images)
    for e in range(cfg.epochs):
        epoch = epoch_offset + e
        t0 = time.perf_counter()
        order_rng, select_rng = _streams(seed, epoch)
        order = order_rng.permutation(n)
        totals = {"loss": 0.0, "con": 0.0, "wat": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if cfg.algorithm == "simclr" and len(idx) < 2 and n >= 2:
                continue
            views = augment_views(images, idx, cfg.augment, seed, epoch)
            h = enc(Tensor(views))
            if cfg.algorithm == "simclr":
                con = ntxent_loss(head(h), cfg.temperature)
            else:
                con = _moco_step_loss(model, h, views, cfg)
            loss = con
            wat_value = 0.0
            if extra is not None:
                term = extra(enc, h, views, select_rng)
                if term is not None:
                    loss = nc.add(loss, term[0])
                    wat_value = term[1].item()
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, value)
            loss.backward()
            _sgd(trainable, cfg.learning_rate)
            if cfg.algorithm == "moco":
                model.key_encoder.params = momentum_update(model.key_encoder.params, enc.params, cfg.momentum)
                model.key_head.params = momentum_update(model.key_head.params, head.params, cfg.momentum)
            totals["loss"] += value
            totals["con"] += con.item()
            totals["wat"] += wat_value
            batches += 1
        record = {"epoch": epoch + 1, **{k: v / max(batches, 1) for k, v in totals.items()},
                  "wall_ms": (time.perf_counter() - t0) * 1000.0}
        if not np.isfinite(record["loss"]):
            raise TrainingDiverged(epoch, record["loss"])
        model.history.append(record)
        if log is not None:
            log(record)
    for t in trainable:
        t.requires_grad = False
        t.grad = None
    return model


def _moco_step_loss(model: ContrastiveModel, h: Tensor, views: np.ndarray, cfg: ContrastiveConfig) -> Tensor:
    # rows 2k feed the query encoder, rows 2k+1 the key encoder
    q_rows = np.arange(0, len(views), 2)
    q = nc.l2_normalize(model.head(nc.take(h, q_rows)), axis=1)
    k = model.key_head.predict_array(model.key_encoder.predict_array(views[q_rows + 1]))
    k = k / np.linalg.norm(k, axis=1, keepdims=True)
    loss = moco_loss_batch(q, k, model.queue.array(), cfg.temperature, check_norm=False)
    model.queue.push(k)
    return loss


def pretrain(images: np.ndarray, cfg: ContrastiveConfig, seed: int,
             log: Callable[[dict], None] | None = None) -> ContrastiveModel:
    """Self-supervised pretraining from a fresh initialization."""
    if len(images) == 0:
        raise ValueError("cannot pretrain on an empty split")
    model = init_model(int(np.prod(images.shape[1:])), cfg, seed)
    return train(model, images, cfg, seed, log=log)


def history_csv(history: list[dict]) -> str:
    lines = ["epoch,mean_loss,wall_time_ms"]
    lines += [f"{r['epoch']},{r['loss']:.12g},{r['wall_ms']:.3f}" for r in history]
    return "\n".join(lines) + "\n"
