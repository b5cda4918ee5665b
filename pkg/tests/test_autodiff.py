import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from idennet import autodiff as ad
from idennet.autodiff import ShapeError, Tape, Tensor, backward, grad_check


def rand(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def grads_of(op, *inputs):
    for t in inputs:
        t.requires_grad = True
    with Tape() as tape:
        out = op(*inputs)
    backward(out, tape)
    return [t.grad for t in inputs]


# ---- concat


def test_concat_shape():
    a = Tensor(np.zeros((1, 24, 24, 160), np.float32))
    b = Tensor(np.zeros((1, 24, 24, 160), np.float32))
    assert ad.concat_channels(a, b).shape == (1, 24, 24, 320)


def test_concat_placement():
    a, b = Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.ones((1, 2, 2, 1)))
    out = ad.concat_channels(a, b).data
    assert np.all(out[..., 0] == 0) and np.all(out[..., 1] == 1)


def test_concat_backward_is_split():
    a, b = Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.ones((1, 2, 2, 2)))
    ga, gb = grads_of(lambda x, y: ad.tensor_sum(ad.concat_channels(x, y)), a, b)
    assert np.array_equal(ga, np.ones_like(a.data)) and np.array_equal(gb, np.ones_like(b.data))


def test_concat_rejects_mismatched_spatial():
    with pytest.raises(ShapeError):
        ad.concat_channels(Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((1, 3, 2, 1))))


@given(arrays(np.float32, (2, 3, 3, 4)), st.integers(1, 3))
def test_concat_then_slice_recovers_inputs(x, split):
    a, b = Tensor(x[..., :split]), Tensor(x[..., split:])
    cat = ad.concat_channels(a, b)
    assert np.array_equal(ad.slice_channels(cat, 0, split).data, a.data, equal_nan=True)
    assert np.array_equal(ad.slice_channels(cat, split, 4).data, b.data, equal_nan=True)


# ---- conv


def test_conv_fusion_shape():
    x = Tensor(np.zeros((1, 24, 24, 320), np.float32))
    w = Tensor(np.zeros((1, 1, 320, 160), np.float32))
    assert ad.conv2d(x, w, Tensor(np.zeros(160, np.float32))).shape == (1, 24, 24, 160)


def test_conv_constant_field():
    out = ad.conv2d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.array([0.5])))
    assert np.all(out.data == 2.5)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 5, 5, 3)), rng.standard_normal((3, 3, 3, 4)), rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 5, 4))
    for i in range(5):
        for j in range(5):
            ref[:, i, j] = np.einsum("bhwc,hwco->bo", xp[:, i : i + 3, j : j + 3], w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_grad_spec_case():
    rng = np.random.default_rng(7)
    x, w, b = rand(rng, 1, 4, 4, 2), rand(rng, 3, 3, 2, 3), rand(rng, 3)
    proj = Tensor(rng.standard_normal((1, 4, 4, 3)))
    err = grad_check(lambda x, w, b: ad.tensor_sum(ad.mul(ad.conv2d(x, w, b, padding=1), proj)), [x, w, b])
    assert err <= 1e-4


def test_conv_errors():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 2, 1))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 2, 1))), Tensor(np.zeros(1)), stride=2)


# ---- batch norm


def test_batch_norm_symmetric_case():
    x = np.where(np.arange(8) % 2 == 0, -1.0, 1.0).reshape(2, 2, 2, 1)
    out = ad.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1))).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(out, x, atol=1e-5)


def test_batch_norm_zero_gamma_gives_beta():
    rng = np.random.default_rng(1)
    beta = rng.standard_normal(3)
    out = ad.batch_norm(rand(rng, 2, 3, 3, 3), Tensor(np.zeros(3)), Tensor(beta)).data
    assert np.all(out == beta)


def test_batch_norm_running_stats_update():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 3, 2)) * 2 + 1
    stats = ad.RunningStats.initial(2, np.float64)
    ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, "train")
    n = x.size // 2
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 1, 2)), rtol=1e-12)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 1, 2)) * n / (n - 1), rtol=1e-12)


def test_batch_norm_eval_uses_running_stats():
    stats = ad.RunningStats(np.array([1.0]), np.array([4.0]))
    out = ad.batch_norm(Tensor(np.full((1, 2, 2, 1), 3.0)), Tensor(np.ones(1)), Tensor(np.zeros(1)), stats, "eval")
    np.testing.assert_allclose(out.data, 2 / np.sqrt(4 + 1e-5))


def test_batch_norm_eval_without_stats_raises():
    with pytest.raises(RuntimeError):
        ad.batch_norm(Tensor(np.ones((1, 2, 2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), None, "eval")


# ---- relu, pools, fc, softmax, dropout


def test_relu_values():
    assert np.array_equal(ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])


def test_relu_all_negative_zero_grads():
    x = Tensor(-np.abs(np.random.default_rng(3).standard_normal((2, 3))) - 0.1)
    (g,) = grads_of(lambda t: ad.tensor_sum(ad.relu(t)), x)
    assert np.all(ad.relu(x).data == 0) and np.all(g == 0)


def test_avg_pool_window_and_backward():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1))
    assert ad.avg_pool_2x2(x).data.item() == 2.5
    (g,) = grads_of(lambda t: ad.tensor_sum(ad.avg_pool_2x2(t)), x)
    assert np.all(g == 0.25)
    assert ad.avg_pool_2x2(Tensor(np.zeros((1, 48, 48, 16)))).shape == (1, 24, 24, 16)


def test_avg_pool_odd_raises():
    with pytest.raises(ShapeError):
        ad.avg_pool_2x2(Tensor(np.zeros((1, 3, 4, 1))))


@given(arrays(np.float64, (2, 4, 6, 3), elements=st.floats(-8, 8, width=64).map(lambda v: round(v * 4) / 4)))
def test_avg_pool_then_upsample_preserves_mean(x):
    # quarter-integer entries keep every partial sum exact, so equality is exact
    pooled = ad.avg_pool_2x2(Tensor(x)).data
    up = pooled.repeat(2, axis=1).repeat(2, axis=2)
    assert up.mean() == x.mean()


def test_global_avg_pool():
    x = Tensor(np.full((1, 12, 12, 232), 3.5))
    assert ad.global_avg_pool(x).shape == (1, 232)
    assert np.all(ad.global_avg_pool(x).data == 3.5)
    (g,) = grads_of(lambda t: ad.tensor_sum(ad.global_avg_pool(t)), Tensor(np.zeros((2, 3, 4, 2))))
    assert np.allclose(g, 1 / 12)


def test_fully_connected():
    x = Tensor(np.random.default_rng(4).standard_normal((1, 232)))
    out = ad.fully_connected(x, Tensor(np.eye(232)), Tensor(np.zeros(232)))
    assert np.array_equal(out.data, x.data)
    assert ad.fully_connected(x, Tensor(np.zeros((232, 6))), Tensor(np.zeros(6))).shape == (1, 6)


def test_softmax_cases():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros((1, 3)))).data, [[1 / 3] * 3])
    big = ad.softmax(Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.all(np.isfinite(big)) and big[0, 0] == pytest.approx(1) and big[0, 1] == pytest.approx(0)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = ad.softmax(Tensor(x)).data
    assert np.allclose(y.sum(axis=1), 1, atol=1e-12, rtol=0)
    assert np.allclose(ad.softmax(Tensor(x + c)).data, y, atol=1e-12, rtol=0)


def test_dropout_eval_and_rate_zero_are_identity():
    x = Tensor(np.random.default_rng(5).standard_normal((2, 3)))
    assert ad.dropout(x, 0.5, "eval").data is x.data
    assert np.array_equal(ad.dropout(x, 0.0, "train", np.random.default_rng(0)).data, x.data)


def test_dropout_preserves_mean():
    out = ad.dropout(Tensor(np.ones(100_000)), 0.5, "train", np.random.default_rng(0)).data
    assert 0.98 <= out.mean() <= 1.02


def test_dropout_invalid_rate():
    with pytest.raises(ValueError):
        ad.dropout(Tensor(np.ones(3)), 1.0, "train", np.random.default_rng(0))


# ---- tape and harness


def test_backward_sum():
    (g,) = grads_of(ad.tensor_sum, Tensor(np.array([1.0, 2.0, 3.0])))
    assert np.array_equal(g, [1, 1, 1])


def test_backward_square():
    (g,) = grads_of(lambda x: ad.tensor_sum(ad.mul(x, x)), Tensor(np.array([1.0, 2.0])))
    assert np.array_equal(g, [2, 4])


def test_backward_rejects_non_scalar_and_reuse():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
        s = ad.tensor_sum(y)
    with pytest.raises(ShapeError):
        backward(y, tape)
    backward(s, tape)
    with pytest.raises(RuntimeError):
        backward(s, tape)
    tape.reset()
    assert len(tape) == 0


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.mul(x, x)
    assert y.is_leaf and not y.requires_grad


def test_grad_check_exact_for_linear():
    rng = np.random.default_rng(6)
    w = Tensor(rng.standard_normal((3, 4)))
    err = grad_check(lambda x: ad.tensor_sum(ad.mul(x, w)), [rand(rng, 3, 4)])
    assert err <= 1e-10


def test_grad_check_detects_corrupted_rule(monkeypatch):
    monkeypatch.setattr(ad, "_relu_backward", lambda g, mask: np.where(mask, 2 * g, 0))
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 4, 4, 3))
    x += np.sign(x) * 0.05
    assert grad_check(lambda t: ad.tensor_sum(ad.relu(t)), [Tensor(x)]) > 1e-2


def test_forward_ops_deterministic():
    rng = np.random.default_rng(9)
    x, w, b = rng.standard_normal((2, 6, 6, 3)), rng.standard_normal((3, 3, 3, 4)), rng.standard_normal(4)

    def run():
        h = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
        h = ad.relu(ad.batch_norm(h, Tensor(np.ones(4)), Tensor(np.zeros(4))))
        h = ad.dropout(ad.avg_pool_2x2(h), 0.3, "train", np.random.default_rng(11))
        return ad.softmax(ad.global_avg_pool(h)).data

    assert np.array_equal(run(), run())


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batch_norm_grad_random_seeds(seed):
    rng = np.random.default_rng(seed)
    proj = Tensor(rng.standard_normal((2, 3, 3, 4)))
    op = lambda x, g, b: ad.tensor_sum(ad.mul(ad.batch_norm(x, g, b), proj))  # noqa: E731
    assert grad_check(op, [rand(rng, 2, 3, 3, 4), rand(rng, 4), rand(rng, 4)]) <= 1e-4
