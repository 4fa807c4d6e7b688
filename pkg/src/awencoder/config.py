"""Experiment configuration: strict schema, YAML/JSON loading, seed derivation."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .attacks import AttackConfig
from .contrastive import AugmentConfig, ContrastiveConfig
from .data import SyntheticConfig
from .models import ProbeConfig
from .verification import VerifyConfig
from .watermark import EmbedConfig, PGDConfig, to_unit_epsilon

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    num_classes: int = Field(5, ge=1)
    samples_per_class: int = Field(400, ge=1)
    image_shape: tuple[int, int, int] = (16, 16, 3)
    prototype_scale: float = Field(0.2, ge=0)
    noise_std: float = Field(0.08, ge=0)
    pixel_noise_std: float = Field(0.02, ge=0)
    prototype_grid: int = Field(4, ge=1)
    noise_grid: int = Field(6, ge=1)
    feature_basis: int = Field(6, ge=0)
    key_classes: int = Field(2, ge=1)
    key_pool_size: int = Field(8, ge=1)


class AugmentSection(_Strict):
    shift_max: int = Field(2, ge=0)
    flip_prob: float = Field(0.5, ge=0, le=1)
    noise_std: float = Field(0.05, ge=0)
    mask_frac: float = Field(0.1, ge=0, le=1)


class ContrastiveSection(_Strict):
    algorithm: Literal["simclr", "moco"] = "simclr"
    temperature: Optional[float] = Field(None, gt=0)
    batch_size: Optional[int] = Field(None, ge=1)  # None: 50 SimCLR, 32 MoCo
    epochs: int = Field(50, ge=0)
    learning_rate: float = Field(0.003, gt=0)
    momentum: float = Field(0.99, ge=0, lt=1)
    queue_size: int = Field(256, ge=1)
    hidden_dims: tuple[int, ...] = (256, 128)
    embed_dim: int = Field(32, ge=1)
    head_dims: tuple[int, ...] = (32, 16)
    augment: AugmentSection = AugmentSection()


class WatermarkSection(_Strict):
    epsilon: float = Field(15.0, ge=0)  # values > 1 are on the 0-255 scale
    key_class: int = Field(0, ge=0)
    key_index: int = Field(0, ge=0)
    steps: int = Field(200, ge=0)
    step_size: Optional[float] = Field(None, gt=0)
    n_generation: int = Field(500, ge=1)


class EmbedSection(_Strict):
    alpha: float = Field(40.0, ge=0)
    epochs: int = Field(50, ge=0)
    learning_rate: float = Field(0.003, gt=0)
    batch_size: Optional[int] = Field(None, ge=1)


class VerifySection(_Strict):
    t_s: Optional[float] = Field(None, gt=0)
    t_c: float = Field(0.25, gt=0)
    n_verify: int = Field(1000, ge=1)
    n_downstream: int = Field(1000, ge=1)


class ProbeSection(_Strict):
    learning_rate: float = Field(0.05, gt=0)
    epochs: int = Field(200, ge=0)


class AttackSection(_Strict):
    kind: Literal["ftal", "rtal", "prune"]
    epochs: int = Field(10, ge=0)
    learning_rate: float = Field(0.003, gt=0)
    ratio: float = Field(0.0, ge=0, le=1)


def _default_attacks() -> list[AttackSection]:
    return [AttackSection(kind="ftal"), AttackSection(kind="rtal"),
            *(AttackSection(kind="prune", ratio=r) for r in (0.2, 0.4, 0.6, 0.8))]


class ExperimentConfig(_Strict):
    schema_version: int = SCHEMA_VERSION
    seed: int = Field(0, ge=0)
    out: str = "runs/default"
    data: DataSection = DataSection()
    contrastive: ContrastiveSection = ContrastiveSection()
    watermark: WatermarkSection = WatermarkSection()
    embed: EmbedSection = EmbedSection()
    verify: VerifySection = VerifySection()
    probe: ProbeSection = ProbeSection()
    attacks: list[AttackSection] = Field(default_factory=_default_attacks)

    @field_validator("schema_version")
    @classmethod
    def _known_version(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; this build reads {SCHEMA_VERSION}")
        return v

    # -- conversion to module configs ----------------------------------------------

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(**self.data.model_dump(), held_out_key_class=True, seed=self.seed)

    def contrastive_config(self) -> ContrastiveConfig:
        c = self.contrastive.model_dump(exclude={"augment"})
        if c["batch_size"] is None:
            c["batch_size"] = 50 if c["algorithm"] == "simclr" else 32
        return ContrastiveConfig(**c, augment=AugmentConfig(**self.contrastive.augment.model_dump()))

    def pgd(self) -> PGDConfig:
        w = self.watermark
        step = None if w.step_size is None else to_unit_epsilon(w.step_size)
        return PGDConfig(w.steps, step, w.n_generation)

    @property
    def epsilon(self) -> float:
        return to_unit_epsilon(self.watermark.epsilon)

    def embed_config(self) -> EmbedConfig:
        return EmbedConfig(**self.embed.model_dump())

    def verify_config(self) -> VerifyConfig:
        return VerifyConfig(**self.verify.model_dump())

    def probe_config(self, num_classes: int) -> ProbeConfig:
        return ProbeConfig(num_classes, self.probe.learning_rate, self.probe.epochs, seed=self.seed_for("probe"))

    def attack_configs(self) -> list[AttackConfig]:
        return [AttackConfig(**a.model_dump()) for a in self.attacks]

    def seed_for(self, phase: str) -> int:
        """Independent 32-bit seed per pipeline phase, derived from the master seed."""
        tag = int.from_bytes(hashlib.sha256(phase.encode()).digest()[:4], "little")
        return int(np.random.SeedSequence([self.seed, tag]).generate_state(1)[0])

    # -- provenance --------------------------------------------------------------------

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_config(path=None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Parse a YAML or JSON config; ``None`` gives the defaults. Overrides apply last."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        raw = (json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    return ExperimentConfig.model_validate(raw)
