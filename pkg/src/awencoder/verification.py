"""White-box (embedding KL) and black-box (label flip rate) ownership checks."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .models import MLP, fingerprint
from .numcore import Tensor
from .watermark import Watermark

LabelFn = Callable[[np.ndarray], np.ndarray]


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class VerifyConfig:
    t_s: float | None = None  # None: calibrate from clean / marked scores
    t_c: float = 0.25
    n_verify: int = 1000
    n_downstream: int = 1000

    def __post_init__(self):
        if (self.t_s is not None and self.t_s <= 0) or self.t_c <= 0:
            raise ValueError("thresholds must be > 0")
        if self.n_verify < 1 or self.n_downstream < 1:
            raise ValueError("sample counts must be >= 1")


def _timestamp() -> str | None:
    # Reports carry a time only when SOURCE_DATE_EPOCH pins it; a wall-clock
    # stamp would make re-runs differ byte-wise.
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if not epoch:
        return None
    return datetime.fromtimestamp(int(epoch), timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class VerificationReport:
    mode: str  # "white-box" | "black-box"
    score: float
    threshold: float
    verdict: bool
    encoder: str = ""
    watermark: str = ""
    samples: int = 0
    timestamp: str | None = field(default_factory=_timestamp)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("white-box", "black-box"):
            raise ValueError(f"unknown verification mode {self.mode!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> VerificationReport:
        return cls(**json.loads(text))

    def summary(self) -> str:
        status = "VERIFIED" if self.verdict else "NOT VERIFIED"
        name = "T_sim" if self.mode == "white-box" else "T_cls"
        line = f"{status}: {self.mode} {name}={self.score:.6g} threshold={self.threshold:.6g} (n={self.samples})"
        if self.flags:
            line += " [" + ", ".join(self.flags) + "]"
        return line


def watermark_id(wm: Watermark) -> str:
    import hashlib
    h = hashlib.sha256(np.ascontiguousarray(wm.w_adv, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(wm.x_tar, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def t_sim_per_sample(encoder: MLP, images: np.ndarray, wm: Watermark) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    if len(images) == 0:
        raise ValueError("verification split is empty")
    clean = encoder.predict_array(images)
    adv = encoder.predict_array(wm.apply(images))
    return nc.softmax_kl(Tensor(clean), Tensor(adv), axis=1).data


def t_sim(encoder: MLP, images: np.ndarray, wm: Watermark) -> float:
    """Mean KL between softmaxed clean and watermarked embeddings."""
    return float(np.mean(t_sim_per_sample(encoder, images, wm)))


def t_cls(predict: LabelFn, images: np.ndarray, wm: Watermark) -> float:
    """Fraction of samples whose predicted label changes under the watermark.

    Only a label-predicting callable is accepted, never the model itself.
    """
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    if len(images) == 0:
        raise ValueError("downstream split is empty")
    before = np.asarray(predict(images))
    after = np.asarray(predict(wm.apply(images)))
    return float(np.mean(before != after))


def verify(score: float, threshold: float, mode: str = "white-box", **info) -> VerificationReport:
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    return VerificationReport(mode, float(score), float(threshold), bool(score < threshold), **info)


def calibrate_threshold(clean_scores: Sequence[float], marked_scores: Sequence[float]) -> float:
    """Geometric midpoint between the worst marked score and the best clean score."""
    if len(clean_scores) == 0 or len(marked_scores) == 0:
        raise CalibrationError("need at least one clean and one marked score")
    hi_marked, lo_clean = max(marked_scores), min(clean_scores)
    if not hi_marked < lo_clean:
        raise CalibrationError(f"score populations overlap: max marked {hi_marked:.6g} >= min clean {lo_clean:.6g}")
    if hi_marked <= 0:
        # a zero marked score has no log-midpoint; fall back to half the clean floor
        return lo_clean / 2.0
    return math.sqrt(hi_marked * lo_clean)


@dataclass
class UniquenessRow:
    label: str
    t_sim: float
    t_cls: float
    verdict: bool


def uniqueness_suite(encoder: MLP, predict: LabelFn, correct: Watermark, forged: dict[str, Watermark],
                     verify_images: np.ndarray, downstream_images: np.ndarray,
                     t_s: float) -> list[UniquenessRow]:
    """Score the correct watermark and each forgery on the same marked encoder."""
    rows = []
    for label, wm in {"correct": correct, **forged}.items():
        s = t_sim(encoder, verify_images, wm)
        c = t_cls(predict, downstream_images, wm)
        rows.append(UniquenessRow(label, s, c, s < t_s))
    return rows


def correct_is_strictly_best(rows: Sequence[UniquenessRow]) -> bool:
    first, rest = rows[0], rows[1:]
    return all(first.t_sim < r.t_sim and first.t_cls < r.t_cls for r in rest)


def uniqueness_csv(rows: Sequence[UniquenessRow]) -> str:
    lines = ["setting,t_cls,t_sim,verdict"]
    lines += [f"{r.label},{r.t_cls:.6f},{r.t_sim:.9g},{int(r.verdict)}" for r in rows]
    return "\n".join(lines) + "\n"


def effectiveness_csv(rows: Sequence[tuple[str, float, float, float, float]]) -> str:
    """Rows of (setting, acc_ce, acc_we, t_cls_ce, t_cls_we) in the CE / WE / |CE-WE| layout."""
    lines = ["setting,acc_ce,acc_we,t_cls_ce,t_cls_we,t_cls_gap"]
    for name, a_ce, a_we, c_ce, c_we in rows:
        lines.append(f"{name},{a_ce:.6f},{a_we:.6f},{c_ce:.6f},{c_we:.6f},{abs(c_ce - c_we):.6f}")
    return "\n".join(lines) + "\n"
