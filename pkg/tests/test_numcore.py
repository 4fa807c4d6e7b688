import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awencoder import numcore as nc
from awencoder.numcore import GraphError, NumericError, Tensor


def param(data):
    return Tensor(np.asarray(data, dtype=float), requires_grad=True)


# -- forward values ---------------------------------------------------------------

def test_add_and_relu_values():
    np.testing.assert_array_equal(nc.elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    np.testing.assert_array_equal(nc.elementwise("relu", Tensor([-1, 0, 2])).data, [0, 0, 2])


def test_elementwise_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        nc.add(Tensor([1, 2, 3]), Tensor([1, 2]))


def test_unknown_op():
    with pytest.raises(ValueError):
        nc.elementwise("pow", Tensor([1.0]), 2.0)


def test_log_and_div_guards_name_op_and_index():
    with pytest.raises(NumericError, match=r"log.*\(1,\)"):
        nc.log(Tensor([1.0, 0.0]))
    with pytest.raises(NumericError, match=r"div.*\(2,\)"):
        nc.div(Tensor([1.0, 1.0, 1.0]), Tensor([1.0, 2.0, 1e-13]))


def test_mul_gradient_matches_finite_difference():
    a, b = param([2.0]), param([3.0])
    nc.tsum(nc.mul(a, b)).backward()
    assert a.grad[0] == 3.0
    h = 1e-6
    fd = ((2.0 + h) * 3.0 - (2.0 - h) * 3.0) / (2 * h)
    assert abs(a.grad[0] - fd) < 1e-6


def test_matmul_values():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nc.matmul(eye, m).data, m.data)
    assert nc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    with pytest.raises(ValueError, match="inner"):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    err = nc.grad_check(lambda: nc.tsum(nc.mul(nc.matmul(a, b), nc.matmul(a, b))), {"a": a, "b": b})
    assert err < 1e-4


def test_softmax_examples():
    np.testing.assert_allclose(nc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    for c in (-50.0, 0.0, 7.5):
        np.testing.assert_allclose(nc.softmax(Tensor([c, c, c])).data, [1 / 3] * 3, atol=1e-15)
    big = nc.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    # stable-formula oracle: 1 / (1 + e^-1000) and e^-1000 / (1 + e^-1000)
    np.testing.assert_allclose(big, [1.0, np.exp(-1000.0)], atol=1e-300)


def test_cosine_examples():
    u = Tensor([0.3, -1.2, 2.0])
    assert nc.cosine_sim(u, u).item() == pytest.approx(1.0, abs=1e-15)
    assert nc.cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert nc.cosine_sim(Tensor([1.0, 2.0]), Tensor([2.0, 1.0])).item() == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(NumericError, match="zero norm"):
        nc.cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_kl_examples():
    p = Tensor([0.2, 0.3, 0.5])
    assert nc.kl_divergence(p, p).item() == 0.0
    assert nc.kl_divergence(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).item() == pytest.approx(np.log(2), abs=1e-15)
    with pytest.raises(NumericError):
        nc.kl_divergence(Tensor([0.5, 0.5]), Tensor([1.0, 0.0]))
    with pytest.raises(ValueError, match="probability"):
        nc.kl_divergence(Tensor([0.5, 0.6]), Tensor([0.5, 0.5]))


def test_kl_nonnegative_over_1000_pairs():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        d = rng.integers(1, 8)
        p, q = rng.dirichlet(np.ones(d)), rng.dirichlet(np.ones(d))
        assert nc.kl_divergence(Tensor(p), Tensor(q)).item() >= -1e-12


def test_softmax_kl_matches_probability_kl():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    direct = nc.kl_divergence(nc.softmax(Tensor(a), 1), nc.softmax(Tensor(b), 1), axis=1).data
    np.testing.assert_allclose(nc.softmax_kl(Tensor(a), Tensor(b), axis=1).data, direct, atol=1e-13)


# -- graph behaviour -------------------------------------------------------------------

def test_backward_twice_is_rejected():
    a = param([1.0, 2.0])
    out = nc.tsum(nc.mul(a, a))
    out.backward()
    with pytest.raises(GraphError):
        out.backward()


def test_shared_subgraph_visited_once():
    a = param([3.0])
    b = nc.mul(a, a)
    out = nc.tsum(nc.add(b, b))  # d/da 2a^2 = 4a
    out.backward()
    assert a.grad[0] == 12.0


def test_broadcast_gradient_reduces():
    x = param(np.ones((5, 3)))
    bias = param(np.zeros(3))
    nc.tsum(nc.add(x, bias)).backward()
    np.testing.assert_array_equal(bias.grad, [5.0, 5.0, 5.0])


# -- grad_check itself ------------------------------------------------------------------

def test_grad_check_square():
    x = param([3.0])
    nc.tsum(nc.mul(x, x)).backward()
    assert x.grad[0] == 6.0
    assert nc.grad_check(lambda: nc.tsum(nc.mul(x, x)), {"x": x}) < 1e-8


def test_grad_check_constant_function():
    x = param([1.0, 2.0])
    assert nc.grad_check(lambda: nc.tsum(nc.mul(x, 0.0)), {"x": x}) == 0.0


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        nc.grad_check(lambda: Tensor(0.0), {}, step=0.0)


# -- per-op gradient fidelity, 100 seeded cases --------------------------------------------

def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


OPS = {
    "add": lambda a, b: nc.add(a, b),
    "sub": lambda a, b: nc.sub(a, b),
    "mul": lambda a, b: nc.mul(a, b),
    "div": lambda a, b: nc.div(a, b),
    "exp": lambda a, b: nc.exp(a),
    "log": lambda a, b: nc.log(a),
    "relu": lambda a, b: nc.relu(nc.sub(a, 1.25)),
    "clamp": lambda a, b: nc.clamp(a, 0.9, 1.6),
    "matmul": lambda a, b: nc.matmul(a, nc.transpose(b)),
    "softmax": lambda a, b: nc.softmax(a, axis=1),
    "log_softmax": lambda a, b: nc.log_softmax(a, axis=1),
    "logsumexp": lambda a, b: nc.logsumexp(a, axis=1),
    "cosine": lambda a, b: nc.cosine_sim(a, b, axis=1),
    "kl": lambda a, b: nc.kl_divergence(nc.softmax(a, 1), nc.softmax(b, 1), axis=1),
    "softmax_kl": lambda a, b: nc.softmax_kl(a, b, axis=1),
}


def _away_from_kinks(op, x):
    # keep finite differences off the relu/clamp breakpoints
    if op == "relu":
        return np.all(np.abs(x - 1.25) > 1e-3)
    if op == "clamp":
        return np.all(np.abs(x - 0.9) > 1e-3) and np.all(np.abs(x - 1.6) > 1e-3)
    return True


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_100_cases(op):
    worst = 0.0
    cases = 0
    seed = 0
    while cases < 100:
        rng = np.random.default_rng([zlib.crc32(op.encode()), seed])
        seed += 1
        a, b = param(_positive(rng, (2, 3))), param(_positive(rng, (2, 3)))
        if not _away_from_kinks(op, a.data):
            continue
        weights = rng.normal(size=OPS[op](a, b).shape)
        worst = max(worst, nc.grad_check(lambda: nc.tsum(nc.mul(OPS[op](a, b), weights)), {"a": a, "b": b}))
        cases += 1
    assert worst < 1e-4


# -- properties ---------------------------------------------------------------------------

vectors = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=12)


@settings(max_examples=60, deadline=None)
@given(vectors, st.floats(-100, 100, allow_nan=False))
def test_softmax_normalized_and_shift_invariant(v, c):
    p = nc.softmax(Tensor(v)).data
    assert abs(p.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(nc.softmax(Tensor(np.asarray(v) + c)).data, p, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 10))
    p = rng.dirichlet(np.ones(d)) * 0.9 + 0.1 / d
    q = rng.dirichlet(np.ones(d)) * 0.9 + 0.1 / d
    assert nc.kl_divergence(Tensor(p), Tensor(p)).item() == pytest.approx(0.0, abs=1e-9)
    kl = nc.kl_divergence(Tensor(p), Tensor(q)).item()
    assert kl >= -1e-12
    if np.max(np.abs(p - q)) > 1e-3:
        assert kl > 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=5), rng.normal(size=5)
    base = nc.cosine_sim(Tensor(u), Tensor(v)).item()
    assert nc.cosine_sim(Tensor(a * u), Tensor(b * v)).item() == pytest.approx(base, abs=1e-9)
    assert -1.0 - 1e-12 <= base <= 1.0 + 1e-12


def test_grad_check_richardson_beats_plain_step_on_curved_function():
    x = param(np.array([0.7]))
    f = lambda: nc.tsum(nc.exp(nc.mul(x, 8.0)))  # noqa: E731
    plain = nc.grad_check(f, {"x": x}, step=1e-2)
    fourth = nc.grad_check(f, {"x": x}, step=1e-2, richardson=True)
    assert fourth < plain / 100
    assert fourth < 1e-4
