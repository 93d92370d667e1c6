import numpy as np

from ftn.gradcheck import check_parameters, finite_diff_grad, relative_error
from ftn.tensor import Tensor, make_result, mul, sum_over


def test_finite_diff_on_cubic():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    num = finite_diff_grad(lambda t: sum_over(mul(mul(t, t), t)), x, h=1e-3)
    # central differences on x^3 err by exactly h^2
    np.testing.assert_allclose(num, 3 * x.data ** 2 + 1e-6, atol=1e-9)
    np.testing.assert_array_equal(x.data, [1.0, -2.0, 0.5])


def test_relative_error_definition():
    np.testing.assert_allclose(relative_error(np.array([1.0, 0.0, -2.0]), np.array([1.1, 0.0, -1.0])),
                               [0.1 / 1.1, 0.0, 0.5])


def test_check_parameters_samples_and_detects_bugs():
    w = Tensor(np.array([0.3, -0.7, 1.2]), requires_grad=True)
    good = check_parameters(lambda: sum_over(mul(w, w)), [("w", w)], 6, np.random.default_rng(0))
    # sampling is without replacement, so a 3-element parameter caps the count
    assert good.n_checked == 3 and good.max_rel_error < 1e-8 and sorted(good.indices) == [0, 1, 2]
    np.testing.assert_array_equal(w.data, [0.3, -0.7, 1.2])

    def square_with_wrong_grad():
        return sum_over(make_result(w.data ** 2, (w,), lambda g: (g * w.data,), "bad_square"))

    bad = check_parameters(square_with_wrong_grad, [("w", w)], 3, np.random.default_rng(0))
    assert abs(bad.max_rel_error - 0.5) < 1e-6
