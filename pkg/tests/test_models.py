import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awencoder import numcore as nc
from awencoder.models import (
    ArchConfig, CheckpointError, MLP, ParamStore, ProbeConfig, build_mlp, checkpoint_bytes,
    init_params, load_checkpoint, parse_checkpoint, predict_labels, prune_params, save_checkpoint,
    train_linear_probe,
)
from awencoder.numcore import Tensor


def test_init_is_deterministic_and_seed_sensitive():
    a = init_params(ArchConfig((8, 4, 2)), seed=1)
    assert a.to_bytes() == init_params(ArchConfig((8, 4, 2)), seed=1).to_bytes()
    assert a.to_bytes() != init_params(ArchConfig((8, 4, 2)), seed=2).to_bytes()


def test_param_count_and_init_distribution():
    p = init_params((8, 4, 2), seed=0)
    assert p.size() == 8 * 4 + 4 + 4 * 2 + 2 == 46
    assert np.all(p["layer0.bias"].data == 0)
    assert np.max(np.abs(p["layer0.weight"].data)) <= math.sqrt(6 / 12)


def test_bad_arch():
    with pytest.raises(ValueError):
        ArchConfig((8, 0, 2))


def test_forward_shapes_and_purity():
    enc = build_mlp((6, 5, 3), seed=0)
    x = np.tile(np.linspace(0, 1, 6), (4, 1))
    out = enc(Tensor(x)).data
    assert out.shape == (4, 3)
    np.testing.assert_array_equal(out, out[0:1].repeat(4, 0))
    np.testing.assert_array_equal(out, enc(Tensor(x)).data)
    np.testing.assert_array_equal(enc.predict_array(x), out)
    assert enc(Tensor(np.zeros((0, 6)))).shape == (0, 3)
    with pytest.raises(ValueError, match="expected input"):
        enc(Tensor(np.zeros((2, 5))))


def test_three_layer_encoder_gradcheck():
    enc = build_mlp((6, 5, 4, 3), seed=3)
    x = np.random.default_rng(0).uniform(size=(4, 6))
    xt = Tensor(x, requires_grad=True)
    params = {**{k: v for k, v in enc.params.items()}, "x": xt}
    w = np.random.default_rng(1).normal(size=(4, 3))
    err = nc.grad_check(lambda: nc.tsum(nc.mul(enc(xt), w)), params)
    assert err < 1e-4


def test_prune_examples():
    p = ParamStore([("layer0.weight", Tensor([[0.1, -0.5], [0.3, 0.05]])), ("layer0.bias", Tensor([0.7, 0.01]))])
    assert prune_params(p, 0.0) == p
    pruned = prune_params(p, 0.5)
    np.testing.assert_array_equal(pruned["layer0.weight"].data, [[0.0, -0.5], [0.3, 0.0]])
    full = prune_params(p, 1.0)
    assert np.all(full["layer0.weight"].data == 0)
    np.testing.assert_array_equal(full["layer0.bias"].data, [0.7, 0.01])
    with pytest.raises(ValueError):
        prune_params(p, 1.5)
    # the input store is untouched
    assert p["layer0.weight"].data[1, 1] == 0.05


def test_prune_tie_break_by_parameter_order_then_index():
    p = ParamStore([("layer0.weight", Tensor([[1.0, 0.2]])), ("layer0.bias", Tensor([0.0, 0.0])),
                    ("layer1.weight", Tensor([[0.2], [0.2]])), ("layer1.bias", Tensor([0.0]))])
    out = prune_params(p, 0.5)  # 2 of 4 weights; three tie at 0.2
    np.testing.assert_array_equal(out["layer0.weight"].data, [[1.0, 0.0]])
    np.testing.assert_array_equal(out["layer1.weight"].data, [[0.0], [0.2]])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_prune_count_exact_and_idempotent(seed, ratio):
    p = init_params((7, 5, 3), seed)
    n = sum(p[k].data.size for k in p if k.endswith("weight"))
    out = prune_params(p, ratio)
    zeros = sum(int(np.sum(out[k].data == 0)) for k in out if k.endswith("weight"))
    assert zeros == math.ceil(ratio * n - 1e-9)
    assert prune_params(out, ratio) == out


def test_checkpoint_round_trip(tmp_path):
    enc = build_mlp((6, 5, 3), seed=0, kind="encoder")
    head = build_mlp((3, 2), seed=1, kind="head")
    digest = save_checkpoint(tmp_path / "a.awck", {"encoder": enc, "head": head}, {"seed": 0})
    models, meta = load_checkpoint(tmp_path / "a.awck")
    assert meta == {"seed": 0}
    assert models["encoder"].params == enc.params and models["head"].kind == "head"
    again = save_checkpoint(tmp_path / "b.awck", models, meta)
    assert again == digest
    assert (tmp_path / "a.awck").read_bytes() == (tmp_path / "b.awck").read_bytes()


def test_checkpoint_corruption_detected():
    blob = checkpoint_bytes({"encoder": build_mlp((4, 2), seed=0)})
    with pytest.raises(CheckpointError, match="truncated"):
        parse_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(blob[:4] + (99).to_bytes(4, "little") + blob[8:])


def _planted(rng, n=200, d=6, k=3):
    centers = rng.normal(scale=4.0, size=(k, d))
    y = rng.integers(0, k, n)
    return centers[y] + rng.normal(scale=0.3, size=(n, d)), y


def test_probe_learns_separable_embeddings_and_keeps_encoder_frozen():
    rng = np.random.default_rng(0)
    x, y = _planted(rng)
    identity = MLP((6, 6), ParamStore([("layer0.weight", Tensor(np.eye(6))), ("layer0.bias", Tensor(np.zeros(6)))]))
    before = identity.params.digest()
    probe = train_linear_probe(identity, x, y, ProbeConfig(num_classes=3))
    assert np.mean(predict_labels(identity, probe, x) == y) >= 0.95
    assert identity.params.digest() == before


def test_probe_zero_epochs_is_initialization():
    rng = np.random.default_rng(1)
    x, y = _planted(rng)
    enc = build_mlp((6, 4), seed=0)
    probe = train_linear_probe(enc, x, y, ProbeConfig(num_classes=3, epochs=0, seed=7))
    assert probe.params == build_mlp((4, 3), seed=7).params


def test_probe_rejects_empty_and_bad_labels():
    enc = build_mlp((6, 4), seed=0)
    with pytest.raises(ValueError, match="empty"):
        train_linear_probe(enc, np.zeros((0, 6)), np.zeros(0, dtype=int), ProbeConfig(3))
    with pytest.raises(ValueError):
        train_linear_probe(enc, np.zeros((2, 6)), np.array([0, 3]), ProbeConfig(3))
