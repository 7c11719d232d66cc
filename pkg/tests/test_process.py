import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpwass.process import (EX3_CONST, JumpMeasure, evaluate_coefficients, example3_g,
                              make_example1, make_example2, make_example3, make_model, make_zero)


def test_example1_published_values():
    spec = make_example1(4, -1, 0.4, 1)
    f, s, b = evaluate_coefficients(spec, [2.0], 0.0)
    assert f[0] == 3.0
    assert evaluate_coefficients(spec, [4.0], 0.0)[1][0, 0] == pytest.approx(0.8)
    assert b[0][0] == 1.0 and spec.measure.rates == (1.0,)


def test_example1_zero_case():
    f, s, b = evaluate_coefficients(make_example1(0, 0, 0, 0), [1.3], 2.0)
    assert not f.any() and not s.any() and not b[0].any()


def test_example2_forms():
    f, s, b = evaluate_coefficients(make_example2("langevin", "langevin", 0.1, 0.1, 0.05), [4.0], 1.0)
    assert f[0] == 0.05 and s[0, 0] == pytest.approx(0.2) and b[0][0] == pytest.approx(0.2)
    assert evaluate_coefficients(make_example2("linear", "linear"), [3.0], 0.0)[1][0, 0] \
        == pytest.approx(0.3)
    f, s, b = evaluate_coefficients(make_example2("const", "const", 0.0, 0.0, 0.05), [7.0], 0.0)
    assert f[0] == 0.05 and s[0, 0] == 0 and b[0][0] == 0


def test_example2_rejects_unknown_form():
    with pytest.raises(ValueError):
        make_example2("cubic", "const")


def test_example3_jump_matrix():
    _, _, b = evaluate_coefficients(make_example3(-0.5, -0.5, 0.1, 0.1), [1.0, 1.0], 0.0)
    assert np.allclose(np.column_stack(b), [[0.1, -0.05], [-0.05, 0.1]])


def test_example3_uncorrelated_is_diagonal():
    _, s, b = evaluate_coefficients(make_example3(0, 0, 0.3, 0.2), [2.0, 0.5], 0.0)
    assert s[0, 1] == 0 and s[1, 0] == 0
    assert np.column_stack(b)[0, 1] == 0


def test_example3_perfect_correlation_degenerate():
    _, s, _ = evaluate_coefficients(make_example3(1.0, 0.0, 0.1, 0.1), [1.5, 1.5], 0.0)
    assert abs(np.linalg.det(s)) < 1e-15


@pytest.mark.parametrize("c", [(1.1, 0), (0, -1.5)])
def test_example3_rejects_bad_correlation(c):
    with pytest.raises(ValueError):
        make_example3(*c)


def _g_reference(x1, x2):
    c = EX3_CONST
    def n(s, m1, m2):
        return math.exp(-(x1 - m1) ** 2 / (2 * s * s) - (x2 - m2) ** 2 / (2 * s * s)) / (
            math.sqrt(2 * math.pi) * s)
    n1, n2 = n(c["s1"], c["mu11"], c["mu12"]), n(c["s2"], c["mu21"], c["mu22"])
    w1, w2 = n1 / (n1 + n2), n2 / (n1 + n2)
    g1 = w1 * (x1 - c["mu11"]) / c["s1"] + w2 * (x1 - c["mu21"]) / c["s2"]
    g2 = w1 * (x2 - c["mu21"]) / c["s1"] + w2 * (x2 - c["mu22"]) / c["s2"]
    return g1, g2


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 5), st.floats(-3, 5))
def test_example3_drift_matches_scalar_reference(x1, x2):
    got = example3_g(np.array([[x1, x2]]))[0]
    assert np.allclose(got, _g_reference(x1, x2), rtol=1e-12, atol=1e-12)
    f, _, _ = evaluate_coefficients(make_example3(), [x1, x2], 0.0)
    assert np.allclose(f, -got)


def test_zero_model_shapes():
    f, s, b = evaluate_coefficients(make_zero(2, 3, 4), [1.0, 2.0], 0.0)
    assert f.shape == (2,) and s.shape == (2, 3) and len(b) == 4


def test_make_model_unknown():
    with pytest.raises(ValueError):
        make_model("example9")


def test_evaluate_rejects_nonfinite():
    with pytest.raises(ValueError):
        evaluate_coefficients(make_example1(), [np.nan], 0.0)


def test_jump_measure_validation():
    assert JumpMeasure((1.0, 2.0)).total_rate == 3.0
    with pytest.raises(ValueError):
        JumpMeasure((-1.0,))


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50))
def test_batched_matches_pointwise(x):
    spec = make_example2("langevin", "linear", 0.3, 0.2, 0.05)
    xs = np.array([[x], [x + 1.0]])
    c = spec.coefficients
    for k in range(2):
        f, s, b = evaluate_coefficients(spec, xs[k], 0.5)
        assert np.allclose(c.drift(xs, 0.5)[k], f)
        assert np.allclose(c.diffusion(xs, 0.5)[k], s)
        assert np.allclose(c.jump(xs, 0.5)[k, :, 0], b[0])
