import io
import math

import numpy as np
import pytest

from helpers import check_gradients
from primekit.tensor import (
    ShapeError,
    Tensor,
    archive_bytes,
    backward,
    bilinear_upsample,
    conv2d,
    conv2d_reference,
    load_archive,
    load_tensor,
    matmul,
    matvec,
    maxpool2d,
    relu,
    save_archive,
    save_tensor,
    softmax_cross_entropy,
    tmean,
    transpose,
    tsum,
)

rng = np.random.default_rng(1234)


# --------------------------------------------------------------------- conv


def test_conv_identity_kernel():
    x = Tensor([[[5.0]]])
    w = Tensor([[[[1.0]]]])
    b = Tensor([0.0])
    out = conv2d(x, w, b)
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 5.0


def test_conv_zero_input_gives_bias_map():
    x = Tensor(np.zeros((2, 3, 3)))
    w = Tensor(rng.normal(size=(4, 2, 3, 3)))
    b = Tensor([0.1, -0.2, 0.3, 0.0])
    out = conv2d(x, w, b, pad=1)
    for o in range(4):
        assert np.allclose(out.data[o], b.data[o])


def test_conv_matches_reference_kernel():
    for _ in range(5):
        x = rng.normal(size=(1, 4, 4))
        w = rng.normal(size=(1, 1, 3, 3))
        b = rng.normal(size=(1,))
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
        want = conv2d_reference(x, w, b, pad=1)
        assert np.allclose(got, want, atol=1e-12)


def test_conv_strided_matches_reference():
    x = rng.normal(size=(3, 7, 7))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=(2,))
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    assert np.allclose(got, conv2d_reference(x, w, b, stride=2, pad=1), atol=1e-12)


def test_conv_batched_equals_per_image():
    xs = rng.normal(size=(3, 2, 4, 4))
    w = rng.normal(size=(5, 2, 3, 3))
    b = rng.normal(size=(5,))
    batched = conv2d(Tensor(xs), Tensor(w), Tensor(b), pad=1).data
    for i in range(3):
        single = conv2d(Tensor(xs[i]), Tensor(w), Tensor(b), pad=1).data
        assert np.array_equal(batched[i], single)


def test_conv_is_linear_in_input_and_weight():
    a = rng.normal(size=(2, 5, 5))
    bb = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    zero_b = Tensor(np.zeros(3))
    f = lambda arr: conv2d(Tensor(arr), Tensor(w), zero_b, pad=1).data
    assert np.allclose(f(a + bb), f(a) + f(bb), atol=1e-10)
    wa = rng.normal(size=w.shape)
    g = lambda ww: conv2d(Tensor(a), Tensor(ww), zero_b, pad=1).data
    assert np.allclose(g(w + wa), g(w) + g(wa), atol=1e-10)


def test_conv_shape_errors_name_axes():
    x = Tensor(np.zeros((2, 4, 4)))
    w = Tensor(np.zeros((1, 3, 3, 3)))
    b = Tensor(np.zeros(1))
    with pytest.raises(ShapeError, match="channel"):
        conv2d(x, w, b)
    with pytest.raises(ShapeError, match="geometry"):
        conv2d(Tensor(np.zeros((3, 6, 6))), w, b, stride=2)


# --------------------------------------------------------------- relu / pool


def test_relu_values():
    out = relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])
    pos = rng.uniform(0.1, 1.0, size=(3, 3))
    assert np.array_equal(relu(Tensor(pos)).data, pos)


def test_relu_gradient():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    backward(tsum(relu(x)))
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_maxpool_basic():
    out = maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), k=2, stride=2)
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 4.0


def test_maxpool_tie_break_first_index():
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    out = maxpool2d(x, k=2, stride=2)
    backward(tsum(out))
    assert np.array_equal(out.data, [[[1.0]]])
    assert np.array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_maxpool_matches_bruteforce():
    x = rng.normal(size=(2, 4, 4))
    out = maxpool2d(Tensor(x), k=2, stride=2).data
    for c in range(2):
        for r in range(2):
            for s in range(2):
                assert out[c, r, s] == x[c, 2 * r : 2 * r + 2, 2 * s : 2 * s + 2].max()


def test_maxpool_rejects_empty_window():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.zeros((1, 2, 2))), k=3, stride=1)


# ----------------------------------------------------------------- upsample


def test_upsample_factor_one_is_identity():
    x = rng.normal(size=(2, 3, 3))
    assert np.array_equal(bilinear_upsample(Tensor(x), 1).data, x)


def test_upsample_preserves_constant():
    x = Tensor(np.full((1, 3, 3), 0.7))
    out = bilinear_upsample(x, 4)
    assert out.data.shape == (1, 12, 12)
    assert np.allclose(out.data, 0.7)


def test_upsample_matches_interpolation_formula():
    # oracle: evaluate align-corners-false weights directly per output cell
    x = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    out = bilinear_upsample(Tensor(x), 2).data

    def oracle(img, f):
        h, w = img.shape
        res = np.zeros((h * f, w * f))
        for r in range(h * f):
            for c in range(w * f):
                sy = (r + 0.5) / f - 0.5
                sx = (c + 0.5) / f - 0.5
                y0 = math.floor(sy)
                x0 = math.floor(sx)
                wy = sy - y0
                wx = sx - x0
                y0c, y1c = max(0, min(y0, h - 1)), max(0, min(y0 + 1, h - 1))
                x0c, x1c = max(0, min(x0, w - 1)), max(0, min(x0 + 1, w - 1))
                res[r, c] = (
                    img[y0c, x0c] * (1 - wy) * (1 - wx)
                    + img[y0c, x1c] * (1 - wy) * wx
                    + img[y1c, x0c] * wy * (1 - wx)
                    + img[y1c, x1c] * wy * wx
                )
        return res

    assert np.allclose(out[0], oracle(x[0], 2), atol=1e-12)
    with pytest.raises(ShapeError):
        bilinear_upsample(Tensor(x), 0)


# ------------------------------------------------------------------- matvec


def test_matvec_identity_and_zero():
    eye = Tensor(np.eye(3))
    v = Tensor([1.0, 2.0, 3.0])
    assert np.array_equal(matvec(eye, v).data, [1.0, 2.0, 3.0])
    w = Tensor(rng.normal(size=(4, 3)))
    assert np.array_equal(matvec(w, Tensor(np.zeros(3))).data, np.zeros(4))


def test_matvec_one_hot_selects_column():
    w = rng.normal(size=(2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        assert np.array_equal(matvec(Tensor(w), Tensor(e)).data, w[:, k])


def test_matvec_dim_mismatch():
    with pytest.raises(ShapeError, match="inner"):
        matvec(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


# ------------------------------------------------------------ cross-entropy


def test_ce_uniform_logits():
    for c in (2, 3, 7):
        loss = softmax_cross_entropy(Tensor(np.zeros(c)), 1 % c)
        assert abs(float(loss.data) - math.log(c)) < 1e-12


def test_ce_confident_logit_goes_to_zero():
    logits = Tensor([60.0, 0.0, 0.0])
    assert float(softmax_cross_entropy(logits, 0).data) < 1e-12


def test_ce_matches_direct_formula():
    z = rng.normal(size=(3, 2, 2))
    t = rng.integers(0, 3, size=(2, 2))
    loss = float(softmax_cross_entropy(Tensor(z), t).data)
    p = np.exp(z) / np.exp(z).sum(axis=0, keepdims=True)
    want = -np.mean([np.log(p[t[i, j], i, j]) for i in range(2) for j in range(2)])
    assert abs(loss - want) < 1e-12


def test_ce_ignore_label_and_range_check():
    z = rng.normal(size=(3, 2, 2))
    t = np.array([[0, 255], [255, 2]])
    loss = float(softmax_cross_entropy(Tensor(z), t).data)
    p = np.exp(z) / np.exp(z).sum(axis=0, keepdims=True)
    want = -(np.log(p[0, 0, 0]) + np.log(p[2, 1, 1])) / 2
    assert abs(loss - want) < 1e-12
    with pytest.raises(ValueError, match="out of range"):
        softmax_cross_entropy(Tensor(z), np.array([[0, 3], [1, 1]]))


# ----------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    backward(tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_unused_parameter_gets_no_gradient():
    x = Tensor(rng.normal(size=4), requires_grad=True)
    p = Tensor(rng.normal(size=4), requires_grad=True)
    backward(tsum(relu(x)))
    assert x.grad is not None
    assert p.grad is None


def test_backward_rejects_nonscalar():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(relu(x))


def test_backward_frozen_input_gets_no_gradient():
    frozen = Tensor(rng.normal(size=(2, 3)))
    live = Tensor(rng.normal(size=3), requires_grad=True)
    backward(tsum(matvec(frozen, live)))
    assert frozen.grad is None
    assert live.grad is not None


def test_no_tape_without_requires_grad():
    x = Tensor(rng.normal(size=(2, 4, 4)))
    w = Tensor(rng.normal(size=(1, 2, 3, 3)))
    out = conv2d(x, w, Tensor(np.zeros(1)), pad=1)
    assert out.node is None and not out.requires_grad


def test_composite_network_gradients_match_finite_differences():
    # conv -> relu -> pool -> linear head, checked against central differences
    x0 = rng.normal(size=(1, 4, 4)) * 0.5

    def build(ts):
        h = conv2d(Tensor(x0), ts["w"], ts["b"], pad=1)
        h = relu(h)
        h = maxpool2d(h, k=2, stride=2)
        flat = h.reshape((2 * 2 * 2,))
        return tsum(matvec(ts["lin"], flat)) + tmean(ts["w"])

    worst = check_gradients(
        build,
        {
            "w": rng.normal(size=(2, 1, 3, 3)) * 0.5,
            "b": rng.normal(size=2) * 0.5,
            "lin": rng.normal(size=(3, 8)) * 0.5,
        },
    )
    assert worst < 1e-4


def test_gradient_accumulates_across_backward_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(tsum(x))
    backward(tsum(x))
    assert np.array_equal(x.grad, 2 * np.ones(3))


def test_matmul_and_transpose_roundtrip():
    a = rng.normal(size=(4, 3))
    w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    out = matmul(Tensor(a), transpose(w))
    assert out.data.shape == (4, 5)
    assert np.allclose(out.data, a @ w.data.T)
    backward(tsum(out))
    assert w.grad.shape == (5, 3)


def test_rejects_nonfinite_leaf():
    with pytest.raises(ValueError, match="non-finite"):
        Tensor([1.0, np.nan])


# --------------------------------------------------------------- checkpoint


def test_tensor_record_roundtrip():
    arr = rng.normal(size=(2, 3, 4))
    buf = io.BytesIO()
    save_tensor(buf, Tensor(arr))
    buf.seek(0)
    assert buf.read(4) == b"PRK1"
    buf.seek(0)
    back = load_tensor(buf)
    assert back.shape == (2, 3, 4)
    assert np.array_equal(back, arr)


def test_archive_roundtrip_preserves_order_and_bytes(tmp_path):
    named = {
        "conv0.w": rng.normal(size=(2, 1, 3, 3)),
        "conv0.b": np.zeros(2),
        "prime.W.0": rng.normal(size=(2, 5)),
    }
    path = tmp_path / "net.prk"
    save_archive(path, named)
    loaded = load_archive(path)
    assert list(loaded) == list(named)
    for k in named:
        assert np.array_equal(loaded[k], named[k])
    assert path.read_bytes() == archive_bytes(named)


def test_archive_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.prk"
    path.write_bytes(b"\x02\x00\x00\x00zzJUNKJUNKJUNK")
    with pytest.raises(ValueError):
        load_archive(path)
