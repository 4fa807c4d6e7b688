"""Encoder, projection head and linear probe as plain MLPs over :mod:`numcore`."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import numcore as nc
from .numcore import Tensor

CHECKPOINT_MAGIC = b"AWCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore(Mapping[str, Tensor]):
    """Ordered name -> Tensor map. Copies are deep; equality is bitwise."""

    def __init__(self, items: Mapping[str, Tensor] | list[tuple[str, Tensor]] = ()):
        self._items: OrderedDict[str, Tensor] = OrderedDict()
        pairs = items.items() if isinstance(items, Mapping) else items
        for name, t in pairs:
            if name in self._items:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._items[name] = t if isinstance(t, Tensor) else Tensor(t)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamStore) or list(self) != list(other):
            return False
        return all(np.array_equal(self[k].data, other[k].data) and self[k].shape == other[k].shape for k in self)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._items.items())
        return f"ParamStore({inner})"

    def copy(self) -> ParamStore:
        return ParamStore([(k, Tensor(v.data.copy())) for k, v in self._items.items()])

    def size(self) -> int:
        return sum(t.data.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def requires_grad_(self, flag: bool = True) -> ParamStore:
        for t in self._items.values():
            t.requires_grad = flag
        return self

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in self._items.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self._items.items():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class MLP:
    """Stack of affine layers, relu between them, linear output.

    ``params`` holds ``layer{i}.weight`` (fan_in x fan_out) and ``layer{i}.bias``.
    """

    dims: tuple[int, ...]
    params: ParamStore
    kind: str = "mlp"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ValueError(f"bad layer dims {self.dims}")
        for i, (a, b) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            w, bias = self.params[f"layer{i}.weight"], self.params[f"layer{i}.bias"]
            if w.shape != (a, b) or bias.shape != (b,):
                raise ValueError(f"layer {i}: expected weight {(a, b)} and bias {(b,)}, "
                                 f"got {w.shape} and {bias.shape}")

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def arch(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims)}

    def forward(self, x) -> Tensor:
        x = nc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"{self.kind}: expected input (B, {self.input_dim}), got {x.shape}")
        h = x
        for i in range(self.n_layers):
            h = nc.add(nc.matmul(h, self.params[f"layer{i}.weight"]), self.params[f"layer{i}.bias"])
            if i < self.n_layers - 1:
                h = nc.relu(h)
        return h

    __call__ = forward

    def predict_array(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Forward pass without building a graph, in chunks."""
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        out = np.empty((len(x), self.output_dim))
        weights = [(self.params[f"layer{i}.weight"].data, self.params[f"layer{i}.bias"].data)
                   for i in range(self.n_layers)]
        for start in range(0, len(x), batch_size):
            h = x[start:start + batch_size]
            for i, (w, b) in enumerate(weights):
                h = h @ w + b
                if i < self.n_layers - 1:
                    h = np.maximum(h, 0.0)
            out[start:start + batch_size] = h
        return out

    def copy(self) -> MLP:
        return MLP(self.dims, self.params.copy(), self.kind)

    def weight_names(self) -> list[str]:
        return [n for n in self.params if n.endswith(".weight")]


# The three roles share one implementation; the kind tag travels in checkpoints.
EncoderModel = MLP
ProjectionHead = MLP
LinearProbe = MLP


@dataclass(frozen=True)
class ArchConfig:
    dims: tuple[int, ...]
    kind: str = "mlp"

    def __post_init__(self):
        if len(self.dims) < 2 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"arch dims must be >= 2 positive sizes, got {self.dims}")


def init_params(arch: ArchConfig | tuple[int, ...], seed: int) -> ParamStore:
    """Glorot-uniform weights, zero biases."""
    dims = arch.dims if isinstance(arch, ArchConfig) else tuple(arch)
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise ValueError(f"arch dims must be >= 2 positive sizes, got {dims}")
    rng = np.random.default_rng(seed)
    items = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        bound = math.sqrt(6.0 / (a + b))
        items.append((f"layer{i}.weight", Tensor(rng.uniform(-bound, bound, size=(a, b)))))
        items.append((f"layer{i}.bias", Tensor(np.zeros(b))))
    return ParamStore(items)


def build_mlp(dims, seed: int, kind: str = "mlp") -> MLP:
    return MLP(tuple(dims), init_params(tuple(dims), seed), kind)


def prune_params(params: ParamStore, ratio: float) -> ParamStore:
    """Zero the ``ceil(ratio * n)`` weight entries of smallest magnitude.

    Biases are left alone. Ties go to the earlier parameter, then the lower
    flat index.
    """
    if not 0.0 <= ratio <= 1.0 or math.isnan(ratio):
        raise ValueError(f"prune ratio must lie in [0, 1], got {ratio}")
    out = params.copy()
    names = [n for n in out if n.endswith(".weight")]
    if not names:
        return out
    flat = np.concatenate([np.abs(out[n].data).reshape(-1) for n in names])
    k = math.ceil(ratio * flat.size - 1e-9)
    if k == 0:
        return out
    # lexsort: last key is primary; position encodes (param order, index)
    order = np.lexsort((np.arange(flat.size), flat))[:k]
    mask = np.ones(flat.size, dtype=bool)
    mask[order] = False
    offset = 0
    for n in names:
        t = out[n]
        size = t.data.size
        t.data = np.where(mask[offset:offset + size].reshape(t.shape), t.data, 0.0)
        offset += size
    return out


# -- checkpoint file -------------------------------------------------------------
#
# layout: b"AWCK" | u32 version | u32 header length | header JSON (utf-8)
#         | float64 LE data for every tensor, in header order
# header: {"models": {role: {"kind", "dims"}}, "tensors": [[name, shape], ...],
#          "meta": {...}}

def checkpoint_bytes(models: Mapping[str, MLP], meta: Mapping | None = None) -> bytes:
    tensors = []
    blobs = []
    for role, m in models.items():
        for name, t in m.params.items():
            tensors.append([f"{role}.{name}", list(t.shape)])
            blobs.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    header = {
        "models": {role: m.arch() for role, m in models.items()},
        "tensors": tensors,
        "meta": dict(meta or {}),
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(raw)) + raw + b"".join(blobs)


def save_checkpoint(path, models: Mapping[str, MLP], meta: Mapping | None = None) -> str:
    """Write models to ``path`` and return the sha256 of the file."""
    blob = checkpoint_bytes(models, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def parse_checkpoint(blob: bytes) -> tuple[dict[str, MLP], dict]:
    if len(blob) < 12:
        raise CheckpointError("checkpoint truncated: header incomplete")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < 12 + hlen:
        raise CheckpointError("checkpoint truncated inside header")
    header = json.loads(blob[12:12 + hlen].decode())
    pos = 12 + hlen
    per_role: dict[str, list] = {role: [] for role in header["models"]}
    for full, shape in header["tensors"]:
        role, name = full.split(".", 1)
        n = int(np.prod(shape)) if shape else 1
        end = pos + 8 * n
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated in tensor {full}")
        data = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        per_role[role].append((name, Tensor(data)))
        pos = end
    if pos != len(blob):
        raise CheckpointError(f"checkpoint has {len(blob) - pos} trailing bytes")
    models = {}
    for role, arch in header["models"].items():
        models[role] = MLP(tuple(arch["dims"]), ParamStore(per_role[role]), arch.get("kind", "mlp"))
    return models, header.get("meta", {})


def load_checkpoint(path) -> tuple[dict[str, MLP], dict]:
    return parse_checkpoint(Path(path).read_bytes())


def fingerprint(model: MLP) -> str:
    """Short content hash identifying a model's parameters."""
    return model.params.digest()[:16]


# -- downstream probe --------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy for integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    picked = nc.take(logits, (np.arange(n), labels))
    return nc.mean(nc.sub(nc.logsumexp(logits, axis=1), picked))


@dataclass
class ProbeConfig:
    num_classes: int
    learning_rate: float = 0.05
    epochs: int = 200
    seed: int = 0


def train_linear_probe(encoder: MLP, images: np.ndarray, labels: np.ndarray, cfg: ProbeConfig) -> MLP:
    """Full-batch gradient descent on a linear head over frozen embeddings."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot train a probe on an empty split")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ValueError(f"labels must lie in [0, {cfg.num_classes})")
    feats = Tensor(encoder.predict_array(images))
    probe = build_mlp((encoder.output_dim, cfg.num_classes), cfg.seed, kind="probe")
    probe.params.requires_grad_(True)
    for _ in range(cfg.epochs):
        probe.params.zero_grad()
        loss = cross_entropy(probe(feats), labels)
        loss.backward()
        for t in probe.params.values():
            t.data = t.data - cfg.learning_rate * t.grad
    probe.params.requires_grad_(False).zero_grad()
    return probe


def predict_labels(encoder: MLP, probe: MLP, images: np.ndarray) -> np.ndarray:
    return np.argmax(probe.predict_array(encoder.predict_array(images)), axis=1)
