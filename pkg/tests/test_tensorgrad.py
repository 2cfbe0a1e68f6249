import struct
import zlib

import numpy as np
import pytest

from mae_lab.tensorgrad import (AdamWState, CheckpointFormatError, NumericOverflowError, Tensor, adamw_step,
                                backward, grad_check, load_checkpoint, no_grad, ops, save_checkpoint, trace)


def param(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


# ------------------------------------------------------------- backward

def test_sum_gradient_is_ones():
    p = Tensor(np.array([0.3, -1.0, 2.0]), requires_grad=True)
    g = backward(ops.sum(p), [p])
    np.testing.assert_array_equal(g[p], [1.0, 1.0, 1.0])


def test_square_sum_gradient():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    g = backward(ops.sum(p * p), [p])
    np.testing.assert_array_equal(g[p], [2.0, 4.0])


def test_disconnected_parameter_gets_zero_gradient():
    p = Tensor(np.ones(3), requires_grad=True)
    q = Tensor(np.ones((2, 2)), requires_grad=True)
    g = backward(ops.sum(p), [p, q])
    np.testing.assert_array_equal(g[q], np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(p * 2.0, [p])


def test_non_finite_forward_raises_with_op_name():
    p = Tensor(np.array([1e300]), requires_grad=True)
    with np.errstate(over="ignore"), pytest.raises(NumericOverflowError) as info:
        p * p
    assert info.value.op == "mul"


def test_shared_subexpression_accumulates():
    p = Tensor(np.array([3.0]), requires_grad=True)
    y = p * p
    g = backward(ops.sum(y + y), [p])
    np.testing.assert_allclose(g[p], [12.0])


def test_no_grad_records_nothing():
    p = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = p * 3.0
    assert y._parents == () and not y.requires_grad


def test_trace_counts_ops_and_shapes():
    p = Tensor(np.ones((2, 3)), requires_grad=True)
    with trace() as records:
        ops.sum(ops.gelu(p))
    assert [r[0] for r in records] == ["gelu", "sum"]
    assert records[0][1] == (2, 3)


# ------------------------------------------------------------ grad_check

def test_grad_check_quadratic_is_tight(rng):
    p = param(rng, 5, 4)
    a = rng.standard_normal((5, 4))
    err = grad_check(lambda: ops.sum(ops.square(p - a)) * 0.5, [p], 200)
    assert err <= 1e-7


def test_grad_check_zero_function():
    p = Tensor(np.ones(4), requires_grad=True)
    assert grad_check(lambda: ops.sum(p) * 0.0, [p], 10) == 0.0


def test_grad_check_rejects_non_finite_function():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(NumericOverflowError):
        grad_check(lambda: ops.sum(p) * np.inf, [p], 3)


def test_grad_check_rejects_zero_probes():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: ops.sum(p), [p], 0)


def row(t, i):
    return ops.take(t, np.int64(i))


OP_CASES = {
    "add_broadcast": lambda a, b, c: a + row(c, 0),
    "sub": lambda a, b, c: a - b,
    "mul_broadcast": lambda a, b, c: a * row(c, 0),
    "mul": lambda a, b, c: a * ops.tanh(b),
    "scale": lambda a, b, c: (a - b) / 4.0,
    "matmul": lambda a, b, c: ops.matmul(a, ops.transpose(b, (1, 0))),
    "linear": lambda a, b, c: ops.linear(a, c, row(c, 0)),
    "reshape_transpose": lambda a, b, c: ops.transpose(a.reshape(3, 2, 2), (2, 0, 1)),
    "sum_axis": lambda a, b, c: ops.sum(a, axis=1),
    "mean_axis": lambda a, b, c: ops.mean(a, axis=0),
    "concat": lambda a, b, c: ops.concat([a, b], axis=1),
    "take_duplicates": lambda a, b, c: ops.take(a, np.array([0, 2, 2, 1])),
    "take_rows": lambda a, b, c: ops.take_rows(a.reshape(2, 3, 2), np.array([[2, 0], [1, 1]])),
    "gelu": lambda a, b, c: ops.gelu(a),
    "tanh": lambda a, b, c: ops.tanh(a),
    "sigmoid": lambda a, b, c: ops.sigmoid(a),
    "square": lambda a, b, c: ops.square(a),
    "abs_away_from_zero": lambda a, b, c: ops.abs(a + 10.0),
    "layer_norm": lambda a, b, c: ops.layer_norm(a, row(c, 1), row(c, 2)),
    "softmax": lambda a, b, c: ops.softmax(a),
    "focal": lambda a, b, c: ops.sigmoid_focal_loss(a, np.arange(12).reshape(3, 4) % 3 == 0, 2.0),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a = param(rng, 3, 4)
    b = param(rng, 3, 4)
    c = param(rng, 4, 4)
    fn = OP_CASES[name]
    # random weights so every output element contributes to the scalar
    w_rng = np.random.default_rng(7)
    w = Tensor(w_rng.standard_normal(fn(a, b, c).shape))
    err = grad_check(lambda: ops.sum(fn(a, b, c) * w), [a, b, c], 200, seed=1)
    assert err <= 1e-4, name


def test_softmax_rows_sum_to_one(rng):
    y = ops.softmax(Tensor(50 * rng.standard_normal((20, 9))))
    assert np.max(np.abs(y.data.sum(axis=1) - 1.0)) <= 1e-12


def test_layer_norm_moments(rng):
    x = Tensor(rng.standard_normal((30, 16)) * 5 + 3)
    y = ops.layer_norm(x, np.ones(16), np.zeros(16), eps=0.0 + 1e-12).data
    assert np.max(np.abs(y.mean(axis=1))) <= 1e-10
    assert np.max(np.abs(y.var(axis=1) - 1.0)) <= 1e-8


def test_focal_large_logits_stay_finite():
    z = Tensor(np.array([[800.0, -800.0]]), requires_grad=True)
    loss = ops.sigmoid_focal_loss(z, np.array([[0.0, 1.0]]), 2.0)
    g = backward(loss, [z])[z]
    assert np.isfinite(loss.data) and np.all(np.isfinite(g))


def test_forward_is_bitwise_deterministic(rng):
    x = rng.standard_normal((6, 8))
    f = lambda: ops.softmax(ops.gelu(Tensor(x))).data
    assert f().tobytes() == f().tobytes()


# ----------------------------------------------------------------- AdamW

def test_adamw_fixed_point_without_decay(rng):
    p = param(rng, 4, 3)
    before = p.data.copy()
    state = AdamWState(lr=0.1, weight_decay=0.0)
    adamw_step([p], [np.zeros((4, 3))], state)
    np.testing.assert_array_equal(p.data, before)
    assert state.step_count == 1


def test_adamw_zero_grad_applies_decoupled_decay():
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    adamw_step([p], [np.zeros(2)], AdamWState(lr=0.1, weight_decay=0.05))
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.05), rtol=0, atol=1e-15)


def test_adamw_first_step_hand_value():
    # bias correction makes the first step exactly lr * sign(g) (up to eps)
    p = Tensor(np.array([1.0]), requires_grad=True)
    adamw_step([p], [np.array([0.5])], AdamWState(lr=0.01, weight_decay=0.0))
    np.testing.assert_allclose(p.data, [1.0 - 0.01 * 0.5 / (0.5 + 1e-8)], rtol=0, atol=1e-15)


def test_adamw_is_deterministic(rng):
    g = rng.standard_normal(5)
    out = []
    for _ in range(2):
        p = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
        st = AdamWState(lr=1e-2)
        for _ in range(3):
            adamw_step([p], [g], st)
        out.append(p.data.tobytes())
    assert out[0] == out[1]


def test_adamw_errors():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        adamw_step([p], [np.zeros(2)], AdamWState(lr=0.1))
    with pytest.raises(NumericOverflowError):
        adamw_step([p], [np.array([0.0, np.nan, 0.0])], AdamWState(lr=0.1))


# ------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"enc.w": rng.standard_normal((3, 4)), "dec.b": rng.standard_normal(5), "s": np.array(2.5)}
    path = tmp_path / "m.tgck"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == np.asarray(arrays[k], dtype=np.float64).tobytes()
    assert list(load_checkpoint(path, prefix="enc.")) == ["enc.w"]


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "one.tgck"
    save_checkpoint(path, {"ab": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"TGCK"
    assert struct.unpack_from("<III", raw, 4) == (1, 1, 2)
    assert raw[16:18] == b"ab"
    assert struct.unpack_from("<III", raw, 18) == (2, 1, 2)
    assert struct.unpack_from("<2d", raw, 30) == (1.0, 2.0)
    assert len(raw) == 46


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.tgck"
    bad.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad)
    good = tmp_path / "good.tgck"
    save_checkpoint(good, {"w": np.ones(10)})
    trunc = tmp_path / "trunc.tgck"
    trunc.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(trunc)
