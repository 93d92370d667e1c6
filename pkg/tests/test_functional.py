import math

import numpy as np
import pytest

from ftn import functional as F
from ftn.errors import DataError, DimensionError, ParameterError
from ftn.gradcheck import finite_diff_grad, relative_error
from ftn.tensor import Tensor, backward, count_macs, mul, sum_over


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def numeric_check(fn, *inputs, tol=1e-6, rng=None):
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        x.grad = None
    out = fn(*inputs)
    w = t64(rng.normal(size=out.shape), grad=False)
    backward(sum_over(mul(out, w)))
    for x in inputs:
        num = finite_diff_grad(lambda _: sum_over(mul(fn(*inputs), w)), x, h=1e-5)
        assert relative_error(x.grad, num).max() < tol, x.shape


def test_softmax_against_extended_precision(rng):
    x = rng.normal(scale=30.0, size=(4, 9))
    xl = x.astype(np.longdouble)
    e = np.exp(xl - xl.max(axis=-1, keepdims=True))
    ref = (e / e.sum(axis=-1, keepdims=True)).astype(np.float64)
    np.testing.assert_allclose(F.softmax(t64(x)).data, ref, rtol=1e-12, atol=1e-300)


def test_softmax_survives_large_logits():
    out = F.softmax(Tensor(np.array([[1000.0, 1000.0, -1000.0]])))
    np.testing.assert_allclose(out.data, [[0.5, 0.5, 0.0]])


def test_layer_norm_two_pass_oracle(rng):
    x = rng.normal(loc=3.0, size=(2, 5, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    mean = x.sum(-1, keepdims=True) / 6
    var = ((x - mean) ** 2).sum(-1, keepdims=True) / 6
    ref = (x - mean) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(F.layer_norm(t64(x), t64(g), t64(b)).data, ref, atol=1e-12)


def test_gelu_matches_erf_form():
    x = np.linspace(-6, 6, 1000)
    ref = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x])
    assert np.abs(F.gelu(t64(x)).data - ref).max() < 1e-3


def _bilinear_pixel(img, factor, oy, ox):
    h, w = img.shape[:2]

    def coord(o, n):
        s = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(s)), n - 1)
        return i0, min(i0 + 1, n - 1), s - i0

    y0, y1, wy = coord(oy, h)
    x0, x1, wx = coord(ox, w)
    return ((1 - wy) * ((1 - wx) * img[y0, x0] + wx * img[y0, x1])
            + wy * ((1 - wx) * img[y1, x0] + wx * img[y1, x1]))


@pytest.mark.parametrize("factor", [2, 4])
def test_bilinear_per_pixel(factor, rng):
    x = rng.normal(size=(1, 3, 5, 2))
    out = F.bilinear_upsample(t64(x), factor).data
    assert out.shape == (1, 3 * factor, 5 * factor, 2)
    for oy in range(out.shape[1]):
        for ox in range(out.shape[2]):
            np.testing.assert_allclose(out[0, oy, ox], _bilinear_pixel(x[0], factor, oy, ox), atol=1e-12)


def test_bilinear_matches_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.normal(size=(2, 4, 3, 5))
    ref = torch.nn.functional.interpolate(torch.from_numpy(x.transpose(0, 3, 1, 2)), scale_factor=2,
                                          mode="bilinear", align_corners=False)
    np.testing.assert_allclose(F.bilinear_upsample(t64(x), 2).data, ref.numpy().transpose(0, 2, 3, 1),
                               atol=1e-12)


def test_bilinear_rejects_bad_factor():
    with pytest.raises(ParameterError):
        F.bilinear_upsample(Tensor(np.ones((1, 2, 2, 1))), 0)


def test_depthwise_conv_sliding_window(rng):
    x = rng.normal(size=(2, 4, 5, 3))
    w, b = rng.normal(size=(3, 3, 3)), rng.normal(size=3)
    ref = np.zeros_like(x)
    for n in range(2):
        for i in range(4):
            for j in range(5):
                for c in range(3):
                    acc = b[c]
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            ii, jj = i + di, j + dj
                            if 0 <= ii < 4 and 0 <= jj < 5:
                                acc += x[n, ii, jj, c] * w[di + 1, dj + 1, c]
                    ref[n, i, j, c] = acc
    with count_macs() as c:
        out = F.depthwise_conv3x3(t64(x), t64(w), t64(b)).data
    np.testing.assert_allclose(out, ref, atol=1e-12)
    assert c.total == 9 * x.size


def test_kernel_gradients(rng):
    c = 5
    x = t64(rng.normal(size=(1, 3, 4, c)))
    vec = lambda: t64(rng.normal(size=c))
    numeric_check(lambda a: F.softmax(a), x)
    numeric_check(lambda a, g, b: F.layer_norm(a, g, b), x, vec(), vec(), tol=1e-5)
    numeric_check(F.gelu, x)
    numeric_check(lambda a: F.bilinear_upsample(a, 2), x)
    numeric_check(F.depthwise_conv3x3, x, t64(rng.normal(size=(3, 3, c))), vec())
    numeric_check(F.linear, x, t64(rng.normal(size=(c, 3))), t64(rng.normal(size=3)))


def test_cross_entropy_value_and_grad(rng):
    logits = rng.normal(size=(3, 4))
    labels = np.array([0, 3, 1])
    lse = np.log(np.exp(logits).sum(-1))
    ref = np.mean(lse - logits[np.arange(3), labels])
    x = t64(logits)
    loss = F.cross_entropy(x, labels)
    assert abs(loss.item() - ref) < 1e-12
    backward(loss)
    num = finite_diff_grad(lambda _: F.cross_entropy(x, labels), x, h=1e-5)
    assert relative_error(x.grad, num).max() < 1e-6


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DataError):
        F.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(DimensionError):
        F.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0]))


def test_layer_norm_shape_error():
    with pytest.raises(DimensionError):
        F.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))
