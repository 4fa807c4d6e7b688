"""Watermark-removal attacks: fine-tuning (FTAL), retraining (RTAL) and pruning.

None of the attack functions takes a Watermark; the attacker never knows w_adv.
Only the report harness, which plays the verifier, scores the attacked models.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .contrastive import ContrastiveConfig, ContrastiveModel, TrainingDiverged, train
from .models import MLP, ProbeConfig, build_mlp, cross_entropy, predict_labels, prune_params, train_linear_probe
from .numcore import Tensor
from .verification import t_cls, t_sim
from .watermark import Watermark

ATTACK_KINDS = ("ftal", "rtal", "prune")


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    epochs: int = 10
    learning_rate: float = 0.003
    ratio: float = 0.0
    batch_size: int = 50

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("prune ratio must lie in [0, 1]")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size must be >= 1 and learning_rate > 0")

    @property
    def label(self) -> str:
        return f"prune-{self.ratio:g}" if self.kind == "prune" else self.kind


def ftal(model: ContrastiveModel, images: np.ndarray, cfg: AttackConfig,
         ccfg: ContrastiveConfig, seed: int) -> ContrastiveModel:
    """Continue contrastive training of every layer on pretraining-role data."""
    if cfg.epochs == 0:
        return model.copy()
    return train(model, images, replace(ccfg, epochs=cfg.epochs, learning_rate=cfg.learning_rate), seed)


def rtal(encoder: MLP, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig, num_classes: int,
         seed: int, probe: MLP | None = None) -> tuple[MLP, MLP]:
    """Supervised cross-entropy through probe and encoder jointly, minibatch SGD.

    ``probe`` is the attacker's existing downstream head; a fresh one is
    initialised from ``seed`` when omitted.
    """
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot retrain on an empty downstream split")
    encoder = encoder.copy()
    probe = build_mlp((encoder.output_dim, num_classes), seed, kind="probe") if probe is None else probe.copy()
    params = [*encoder.params.values(), *probe.params.values()]
    for t in params:
        t.requires_grad = True
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, epoch, 0x47A1]).permutation(len(labels))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = cross_entropy(probe(encoder(Tensor(images[idx]))), labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, loss.item())
            loss.backward()
            for t in params:
                t.data = t.data - cfg.learning_rate * t.grad
                t.grad = None
    for t in params:
        t.requires_grad = False
        t.grad = None
    return encoder, probe


def prune_attack(encoder: MLP, ratio: float) -> MLP:
    return MLP(encoder.dims, prune_params(encoder.params, ratio), encoder.kind)


# -- report harness -------------------------------------------------------------------

@dataclass
class EvalData:
    """Everything the verifier and the attacker need, as flat arrays."""

    pretrain: np.ndarray  # (n, H, W, C) for contrastive fine-tuning
    verify: np.ndarray  # D'' (n, d)
    train_x: np.ndarray  # D* train split
    train_y: np.ndarray
    test_x: np.ndarray  # D* test split
    test_y: np.ndarray
    num_classes: int


@dataclass
class AttackRow:
    attack: str
    acc_ce: float
    acc_we: float
    t_sim_ce: float
    t_sim_we: float
    t_cls_ce: float
    t_cls_we: float

    @property
    def t_cls_gap(self) -> float:
        return abs(self.t_cls_ce - self.t_cls_we)


def apply_attack(cfg: AttackConfig, model: ContrastiveModel, data: EvalData, ccfg: ContrastiveConfig,
                 probe_cfg: ProbeConfig, seed: int) -> tuple[MLP, MLP]:
    """Attack one encoder and rebuild the attacker's downstream model on it."""
    if cfg.kind == "rtal":
        start = train_linear_probe(model.encoder, data.train_x, data.train_y, probe_cfg)
        return rtal(model.encoder, data.train_x, data.train_y, cfg, data.num_classes, seed, probe=start)
    if cfg.kind == "ftal":
        encoder = ftal(model, data.pretrain, cfg, ccfg, seed).encoder
    else:
        encoder = prune_attack(model.encoder, cfg.ratio)
    return encoder, train_linear_probe(encoder, data.train_x, data.train_y, probe_cfg)


def _score(encoder: MLP, probe: MLP, wm: Watermark, data: EvalData) -> tuple[float, float, float]:
    acc = float(np.mean(predict_labels(encoder, probe, data.test_x) == data.test_y))
    return acc, t_sim(encoder, data.verify, wm), t_cls(lambda x: predict_labels(encoder, probe, x), data.test_x, wm)


def attack_report(clean: ContrastiveModel, marked: ContrastiveModel, wm: Watermark, data: EvalData,
                  attacks: Sequence[AttackConfig], ccfg: ContrastiveConfig, probe_cfg: ProbeConfig,
                  seed: int = 0) -> list[AttackRow]:
    """Baseline row plus one row per attack, each attack applied to both the
    clean (CE) and the watermarked (WE) encoder."""
    rows = []
    settings: list[AttackConfig | None] = [None, *attacks]
    for cfg in settings:
        scored = []
        for model in (clean, marked):
            if cfg is None:
                enc = model.encoder
                probe = train_linear_probe(enc, data.train_x, data.train_y, probe_cfg)
            else:
                enc, probe = apply_attack(cfg, model, data, ccfg, probe_cfg, seed)
            scored.append(_score(enc, probe, wm, data))
        (a_ce, s_ce, c_ce), (a_we, s_we, c_we) = scored
        rows.append(AttackRow("none" if cfg is None else cfg.label, a_ce, a_we, s_ce, s_we, c_ce, c_we))
    return rows


ATTACK_COLUMNS = ("attack", "acc_ce", "acc_we", "t_sim_ce", "t_sim_we", "t_cls_ce", "t_cls_we", "t_cls_gap")


def attack_csv(rows: Sequence[AttackRow]) -> str:
    lines = [",".join(ATTACK_COLUMNS)]
    for r in rows:
        lines.append(f"{r.attack},{r.acc_ce:.6f},{r.acc_we:.6f},{r.t_sim_ce:.9g},{r.t_sim_we:.9g},"
                     f"{r.t_cls_ce:.6f},{r.t_cls_we:.6f},{r.t_cls_gap:.6f}")
    return "\n".join(lines) + "\n"


def pruning_monotone(rows: Sequence[AttackRow]) -> bool:
    """Whether WE T_sim is non-decreasing across the prune rows (reported, not enforced)."""
    vals = [r.t_sim_we for r in rows if r.attack.startswith("prune-")]
    return all(a <= b for a, b in zip(vals, vals[1:]))


def default_sweep(epochs: int = 10, learning_rate: float = 0.003) -> list[AttackConfig]:
    return [AttackConfig("ftal", epochs, learning_rate), AttackConfig("rtal", epochs, learning_rate),
            *(AttackConfig("prune", ratio=r) for r in (0.2, 0.4, 0.6, 0.8))]
