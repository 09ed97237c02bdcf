import numpy as np
import pytest
from scipy.special import erf

from stacklm import tensor as T
from stacklm.tensor import Tape, Tensor


def finite_difference(fn, arrays, wrt, h=1e-5):
    """Central-difference gradient of scalar fn(*arrays) w.r.t. arrays[wrt]."""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[wrt])
    flat = base[wrt].reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(*base)
        flat[i] = keep - h
        down = fn(*base)
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def analytic_grads(fn, arrays):
    """Tape gradient of scalar fn(*tensors) w.r.t. every input array."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def assert_gradcheck(fn_tensor, fn_numpy, arrays, rel=1e-4):
    analytic = analytic_grads(fn_tensor, arrays)
    for i in range(len(arrays)):
        numeric = finite_difference(fn_numpy, arrays, i)
        scale = np.maximum(np.abs(numeric), 1.0)
        err = np.max(np.abs(analytic[i] - numeric) / scale)
        assert err < rel, f"gradient mismatch on input {i}: max rel err {err}"


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_hand_checked():
    out = T.matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]])))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError) as exc:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_matmul_gradcheck_4x5_5x3():
    g = rng(1)
    a, b = g.normal(size=(4, 5)), g.normal(size=(5, 3))
    assert_gradcheck(
        lambda x, y: T.sum_all(T.matmul(x, y)),
        lambda x, y: (x @ y).sum(),
        [a, b],
    )


def test_matmul_batched_gradcheck():
    g = rng(2)
    a, b = g.normal(size=(2, 3, 4)), g.normal(size=(2, 4, 2))
    assert_gradcheck(
        lambda x, y: T.sum_all(T.matmul(x, y)),
        lambda x, y: (x @ y).sum(),
        [a, b],
    )


def test_matmul_weight_apply_gradcheck():
    g = rng(3)
    a, w = g.normal(size=(2, 3, 4)), g.normal(size=(4, 5))
    assert_gradcheck(
        lambda x, y: T.sum_all(T.matmul(x, y)),
        lambda x, y: (x @ y).sum(),
        [a, w],
    )


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------


def test_layer_norm_constant_row_maps_to_bias():
    out = T.layer_norm(Tensor(np.array([[5.0, 5.0, 5.0, 5.0]])), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_already_normalized_row():
    out = T.layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_layer_norm_row_statistics():
    x = rng(4).normal(size=(3, 8))
    out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-3)


def test_layer_norm_empty_dim_rejected():
    with pytest.raises(T.ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


def test_layer_norm_gradcheck():
    g = rng(5)
    x, gain, bias = g.normal(size=(3, 6)), g.normal(size=6), g.normal(size=6)
    eps = 1e-5

    def np_ln(x, gain, bias):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (((x - mu) / np.sqrt(var + eps)) * gain + bias).sum()

    assert_gradcheck(
        lambda x, g_, b_: T.sum_all(T.layer_norm(x, g_, b_, eps)),
        np_ln,
        [x, gain, bias],
    )


# ---------------------------------------------------------------------------
# softmax cross entropy
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 10)))
    loss = T.softmax_cross_entropy(logits, np.array([0, 4, 9]))
    assert loss.item() == pytest.approx(np.log(10.0), rel=1e-12)


def test_cross_entropy_perfect_prediction_limit():
    logits = np.full((1, 5), -1e4)
    logits[0, 2] = 1e4
    loss = T.softmax_cross_entropy(Tensor(logits), np.array([2]))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_mask_selects_single_example():
    g = rng(6)
    logits = g.normal(size=(2, 7))
    targets = np.array([3, 5])
    masked = T.softmax_cross_entropy(Tensor(logits), targets, np.array([1.0, 0.0]))
    single = T.softmax_cross_entropy(Tensor(logits[:1]), targets[:1])
    assert masked.item() == pytest.approx(single.item(), rel=1e-12)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 4))), np.array([4]))


def test_cross_entropy_all_zero_mask_is_zero_loss():
    logits = Tensor(rng(7).normal(size=(2, 4)), requires_grad=True)
    with Tape() as tape:
        loss = T.softmax_cross_entropy(logits, np.array([0, 1]), np.zeros(2))
    assert loss.item() == 0.0
    tape.backward(loss)
    assert np.all(logits.grad == 0.0)


def test_cross_entropy_gradcheck():
    g = rng(8)
    logits = g.normal(size=(4, 6))
    targets = np.array([1, 0, 5, 3])
    mask = np.array([1.0, 0.0, 2.0, 1.0])

    def np_loss(x):
        z = x - x.max(-1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        nll = -lp[np.arange(4), targets]
        return (nll * mask).sum() / mask.sum()

    assert_gradcheck(lambda x: T.softmax_cross_entropy(x, targets, mask), np_loss, [logits])


# ---------------------------------------------------------------------------
# remaining primitive family
# ---------------------------------------------------------------------------


def test_gelu_fixed_point():
    assert T.gelu(Tensor(np.array([0.0]))).data[0] == 0.0


def test_dropout_p_zero_is_identity():
    x = Tensor(rng(9).normal(size=(2, 3)))
    out = T.dropout(x, 0.0, None, layer=0, slot=0)
    assert out is x


def test_dropout_probability_validated():
    x = Tensor(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, None, 0, 0)
    with pytest.raises(ValueError):
        T.dropout(x, -0.1, None, 0, 0)


def test_dropout_masks_are_counter_determined():
    x = Tensor(np.ones((2, 5)))
    stream = T.DropoutRng(seed=7, step=3, example_ids=[10, 11])
    a = T.dropout(x, 0.5, stream, layer=1, slot=0).data
    b = T.dropout(x, 0.5, T.DropoutRng(7, 3, [10, 11]), layer=1, slot=0).data
    assert np.array_equal(a, b)
    # a different slot draws a different mask
    c = T.dropout(x, 0.5, stream, layer=1, slot=1).data
    assert not np.array_equal(a, c)
    # per-example keying: swapping rows swaps masks
    d = T.dropout(x, 0.5, T.DropoutRng(7, 3, [11, 10]), layer=1, slot=0).data
    assert np.array_equal(d[0], a[1]) and np.array_equal(d[1], a[0])


def test_embedding_gradient_is_scatter_add():
    g = rng(10)
    table = g.normal(size=(5, 3))
    ids = np.array([1, 3, 1])
    upstream = g.normal(size=(3, 3))

    t = Tensor(table.copy(), requires_grad=True)
    with Tape() as tape:
        looked = T.embedding_lookup(t, ids)
        loss = T.sum_all(T.mul(looked, Tensor(upstream)))
    tape.backward(loss)

    numeric = finite_difference(lambda tb: (tb[ids] * upstream).sum(), [table], 0)
    assert np.max(np.abs(t.grad - numeric)) < 1e-6
    assert np.allclose(t.grad[1], upstream[0] + upstream[2])
    assert np.allclose(t.grad[0], 0.0)


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        T.embedding_lookup(Tensor(np.zeros((4, 2))), np.array([4]))


@pytest.mark.parametrize("seed", range(6))
def test_elementwise_and_structural_gradchecks(seed):
    g = rng(100 + seed)
    a = g.normal(size=(3, 4))
    b = g.normal(size=(3, 4))
    bias = g.normal(size=4)

    assert_gradcheck(lambda x, y: T.sum_all(T.add(x, y)), lambda x, y: (x + y).sum(), [a, b])
    assert_gradcheck(lambda x, y: T.sum_all(T.mul(x, y)), lambda x, y: (x * y).sum(), [a, b])
    assert_gradcheck(lambda x, v: T.sum_all(T.add(x, v)), lambda x, v: (x + v).sum(), [a, bias])
    assert_gradcheck(lambda x: T.sum_all(T.scale(x, 2.5)), lambda x: (2.5 * x).sum(), [a])
    weights = g.normal(size=(3, 4))
    assert_gradcheck(
        lambda x: T.sum_all(T.mul(T.gelu(x), Tensor(weights))),
        lambda x: (0.5 * x * (1 + erf(x / np.sqrt(2))) * weights).sum(),
        [a],
    )
    assert_gradcheck(
        lambda x: T.sum_all(T.mul(T.tanh(x), Tensor(weights))),
        lambda x: (np.tanh(x) * weights).sum(),
        [a],
    )
    assert_gradcheck(
        lambda x: T.sum_all(T.mul(T.transpose(x, (1, 0)), Tensor(weights.T))),
        lambda x: (x.T * weights.T).sum(),
        [a],
    )
    assert_gradcheck(
        lambda x: T.sum_all(T.mul(T.reshape(x, (2, 6)), Tensor(weights.reshape(2, 6)))),
        lambda x: (x.reshape(2, 6) * weights.reshape(2, 6)).sum(),
        [a],
    )
    assert_gradcheck(
        lambda x: T.sum_all(T.mul(T.narrow(x, 1, 1, 2), Tensor(weights[:, 1:3]))),
        lambda x: (x[:, 1:3] * weights[:, 1:3]).sum(),
        [a],
    )
    assert_gradcheck(
        lambda x: T.sum_all(T.mul(T.select(x, 0, 1), Tensor(weights[:, 0]))),
        lambda x: (x[:, 0] * weights[:, 0]).sum(),
        [a],
    )


def test_softmax_gradcheck_and_mask():
    g = rng(11)
    x = g.normal(size=(2, 5))
    w = g.normal(size=(2, 5))
    masked = np.zeros((2, 5))
    masked[:, 3:] = T.MASK_VALUE

    def np_softmax(x):
        z = x + masked
        z = z - z.max(-1, keepdims=True)
        e = np.exp(z)
        return ((e / e.sum(-1, keepdims=True)) * w).sum()

    assert_gradcheck(
        lambda t: T.sum_all(T.mul(T.softmax(t, additive_mask=masked), Tensor(w))),
        np_softmax,
        [x],
    )


def test_softmax_rows_sum_to_one():
    x = rng(12).normal(size=(4, 9)) * 5
    out = T.softmax(Tensor(x)).data
    assert np.all(np.abs(out.sum(-1) - 1.0) < 1e-6)


def test_dropout_gradcheck_fixed_mask():
    g = rng(13)
    x = g.normal(size=(2, 6))
    stream = T.DropoutRng(seed=3, step=0, example_ids=[0, 1])
    mask = stream.keep_mask(layer=0, slot=0, shape=(2, 6), p=0.4)

    assert_gradcheck(
        lambda t: T.sum_all(T.dropout(t, 0.4, T.DropoutRng(3, 0, [0, 1]), 0, 0)),
        lambda x: (x * mask).sum(),
        [x],
    )


# ---------------------------------------------------------------------------
# tape behaviour
# ---------------------------------------------------------------------------


def test_backward_twice_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_backward_linearity():
    g = rng(14)
    x_data = g.normal(size=(3, 3))

    def run(which):
        x = Tensor(x_data.copy(), requires_grad=True)
        with Tape() as tape:
            a = T.sum_all(T.gelu(x))
            b = T.sum_all(T.mul(x, x))
            loss = {"a": a, "b": b, "sum": T.add(a, b)}[which]
        tape.backward(loss)
        return x.grad

    assert np.allclose(run("sum"), run("a") + run("b"), rtol=1e-12)


def test_repeated_runs_bit_identical():
    def run():
        g = np.random.default_rng(99)
        x = Tensor(g.normal(size=(4, 4)), requires_grad=True)
        stream = T.DropoutRng(seed=5, step=2, example_ids=[0, 1, 2, 3])
        with Tape() as tape:
            h = T.dropout(T.gelu(x), 0.3, stream, 0, 0)
            loss = T.sum_all(T.mul(h, h))
        tape.backward(loss)
        return loss.item(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)


def test_checkpoint_matches_plain_backward_bitwise():
    g = rng(15)
    x_data = g.normal(size=(2, 8)).astype(np.float32)
    w_data = g.normal(size=(8, 8)).astype(np.float32)

    def block(params, stream):
        def fn(h):
            h = T.matmul(h, params)
            h = T.gelu(h)
            return T.dropout(h, 0.25, stream, 0, 0)

        return fn

    def run(use_checkpoint):
        x = Tensor(x_data.copy(), requires_grad=True)
        w = Tensor(w_data.copy(), requires_grad=True)
        stream = T.DropoutRng(seed=1, step=0, example_ids=[0, 1])
        fn = block(w, stream)
        with Tape() as tape:
            h = T.checkpoint(fn, x) if use_checkpoint else fn(x)
            loss = T.sum_all(T.mul(h, h))
        tape.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    plain = run(False)
    ckpt = run(True)
    assert plain[0] == ckpt[0]
    assert np.array_equal(plain[1], ckpt[1])
    assert np.array_equal(plain[2], ckpt[2])
