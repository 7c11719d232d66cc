import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpwass import autodiff as ad
from jumpwass.nn import (AdamW, MlpArch, adamw_step, backward, load_checkpoint, mlp_apply,
                         mlp_forward, mlp_init, save_checkpoint)
from conftest import central_diff, rel_err


def _plain_forward(params, x):
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < len(params.weights) - 1:
            h = np.maximum(h, 0)
    return h


def test_zero_init_gives_zero_output():
    p = mlp_init(MlpArch(2, 2, 8, 3), "gaussian", seed=0, var=0.0)
    assert all(not w.any() for w in p.weights) and all(not b.any() for b in p.biases)
    y, _ = mlp_forward(p, np.array([[1.0, -2.0]]))
    assert np.array_equal(y.value, np.zeros((1, 3)))


def test_fan_uniform_bound():
    p = mlp_init(MlpArch(4, 1, 50, 1), "fan_uniform", seed=3)
    assert np.abs(p.weights[0]).max() <= 0.5
    assert np.abs(p.biases[0]).max() <= 0.5


def test_gaussian_init_variance():
    p = mlp_init(MlpArch(1, 1, 100_000, 1), "gaussian", seed=1, var=1e-4)
    assert abs(p.weights[0].var() / 1e-4 - 1) < 0.05
    assert not p.biases[0].any()


def test_single_layer_identity_like():
    p = mlp_init(MlpArch(2, 1, 2, 2), "gaussian", var=0.0)
    p.weights[0][:] = np.eye(2)
    p.weights[1][:] = np.eye(2)
    p.biases[1][:] = [0.5, -0.5]
    y, _ = mlp_forward(p, np.array([[1.0, 3.0]]))
    assert np.array_equal(y.value, [[1.5, 2.5]])


def test_taped_matches_plain_forward(rng):
    p = mlp_init(MlpArch(3, 3, 17, 2), "fan_uniform", seed=7)
    x = rng.normal(size=(11, 3))
    y, _ = mlp_forward(p, x)
    assert np.array_equal(y.value, _plain_forward(p, x))
    assert np.array_equal(mlp_apply(p, x), y.value)


def test_mlp_forward_rejects_nonfinite():
    p = mlp_init(MlpArch(1, 1, 2, 1))
    with pytest.raises(ValueError):
        mlp_forward(p, np.array([[np.nan]]))


def _preactivations(params, x):
    h, out = x, []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = h @ w + b
        out.append(h)
        h = np.maximum(h, 0)
    return out


def _away_from_kinks(params, rng, margin=1e-3):
    """Inputs whose hidden pre-activations keep clear of the ReLU kink."""
    while True:
        x = rng.normal(size=(5, params.arch.input_dim))
        if all(np.abs(z).min() > margin for z in _preactivations(params, x)):
            return x


def _fd_check(arch, seed, rng):
    p = mlp_init(arch, "fan_uniform", seed=seed)
    x = _away_from_kinks(p, rng)
    y, tape = mlp_forward(p, x)
    wts = rng.normal(size=y.shape)
    loss_var = ad.vsum(y * wts)
    grads = backward(tape, loss_var)
    errs = []
    for i in range(len(p.weights)):
        def f(w, i=i):
            q = p.with_flat(p.flat())
            q.weights[i] = w
            return float(np.sum(_plain_forward(q, x) * wts))
        errs.append(rel_err(grads[("net", "W", i)], central_diff(f, p.weights[i])))
    return max(errs)


def test_backward_matches_finite_differences(rng):
    for k in range(50):
        arch = MlpArch(int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                       int(rng.integers(2, 9)), int(rng.integers(1, 3)))
        assert _fd_check(arch, k, rng) <= 1e-5


def test_every_parameter_gets_a_gradient():
    p = mlp_init(MlpArch(2, 2, 4, 1), seed=0)
    y, tape = mlp_forward(p, np.ones((3, 2)))
    grads = backward(tape, ad.vsum(y))
    assert set(grads) == set(p.keys("net"))


def test_adamw_zero_gradient_no_decay():
    p = np.array([1.0, -2.0])
    new, _ = adamw_step(p, np.zeros(2), AdamW(lr=0.01, weight_decay=0.0))
    assert np.array_equal(new, p)


def test_adamw_first_step_hand_value():
    new, st_ = adamw_step(np.array([1.0]), np.array([1.0]), AdamW(lr=0.002, weight_decay=0.005))
    expected = 1 - 0.002 * (1 / (1 + 1e-8)) - 0.002 * 0.005 * 1
    assert new[0] == pytest.approx(expected, abs=1e-15)
    assert st_.step_count == 1


def test_adamw_pure_decay():
    new, _ = adamw_step(np.array([3.0]), np.zeros(1), AdamW(lr=0.1, weight_decay=0.5))
    assert new[0] == pytest.approx(3.0 * (1 - 0.1 * 0.5))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100.0), st.lists(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3),
                                         min_size=1, max_size=6))
def test_adamw_direction_scale_invariant(scale, g):
    g = np.array(g)
    p = np.zeros_like(g)
    a = AdamW(lr=1e-3).step(p, g)
    b = AdamW(lr=1e-3).step(p, scale * g)
    assert np.array_equal(np.sign(a), np.sign(b))


def test_checkpoint_round_trip(tmp_path):
    nets = {"diffusion": mlp_init(MlpArch(2, 2, 5, 1), seed=1),
            "jump": mlp_init(MlpArch(2, 3, 4, 2), "gaussian", seed=2)}
    opt = AdamW(lr=0.003, weight_decay=0.02)
    vec = np.concatenate([n.flat() for n in nets.values()])
    opt.step(vec, np.ones_like(vec))
    path = tmp_path / "ck.jdnn"
    save_checkpoint(path, nets, opt)
    assert path.read_bytes()[:4] == b"JDNN"
    back, opt2 = load_checkpoint(path)
    assert list(back) == list(nets)
    for k in nets:
        assert back[k].arch == nets[k].arch
        assert np.array_equal(back[k].flat(), nets[k].flat())
    assert opt2.step_count == 1 and np.array_equal(opt2.m, opt.m) and np.array_equal(opt2.v, opt.v)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(path)
