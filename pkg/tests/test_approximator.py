import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from warehouse_eir.approximator import (
    ApproximatorSpec,
    Network,
    Optimizer,
    ParamVector,
    bce,
    bce_logits,
    load_checkpoint,
    mse,
    optimize_step,
    save_checkpoint,
    soft_update,
)


def numeric_grad(f, data, eps=1e-6):
    g = np.zeros_like(data)
    for j in range(data.size):
        old = data[j]
        data[j] = old + eps
        hi = f()
        data[j] = old - eps
        lo = f()
        data[j] = old
        g[j] = (hi - lo) / (2 * eps)
    return g


def offset_biases(net, rng):
    # zero biases sit exactly on the relu kink for all-zero inputs
    for name, shape in net.params.shapes:
        if len(shape) == 1:
            net.params[name][...] = rng.uniform(0.1, 0.3, size=shape)


@pytest.mark.parametrize("spec", [
    ApproximatorSpec(4, ((5, "relu"), (3, "tanh"), (2, "identity"))),
    ApproximatorSpec(3, ((4, "sigmoid"), (1, "identity"))),
    ApproximatorSpec(3, ((2, "identity"),), recurrent=4),
])
def test_gradients_match_finite_differences(spec, rng):
    net = Network(spec, rng=rng)
    offset_biases(net, rng)
    x = rng.normal(size=(5, 2, 3)) if spec.recurrent else rng.normal(size=(2, spec.input_dim))
    w = rng.normal(size=(2, spec.output_dim))
    y, cache = net.forward(x)
    gp, gx = net.backward(cache, w)
    f = lambda: float(np.sum(net(x) * w))
    np.testing.assert_allclose(gp, numeric_grad(f, net.params.data), rtol=1e-5, atol=1e-7)
    flat = x.reshape(-1)
    fx = lambda: float(np.sum(net(flat.reshape(x.shape)) * w))
    np.testing.assert_allclose(gx.reshape(-1), numeric_grad(fx, flat), rtol=1e-5, atol=1e-7)


def test_single_input_squeezes(rng):
    net = Network(ApproximatorSpec(3, ((2, "relu"),)), rng=rng)
    x = rng.normal(size=3)
    np.testing.assert_allclose(net(x), net(x[None])[0])
    with pytest.raises(ValueError):
        net(np.zeros(4))


def test_spec_validation():
    with pytest.raises(ValueError):
        ApproximatorSpec(0)
    with pytest.raises(ValueError):
        ApproximatorSpec(2, ((3, "swish"),))
    spec = ApproximatorSpec(2, ((3, "relu"),), recurrent=5)
    assert ApproximatorSpec.from_dict(spec.to_dict()) == spec


def test_param_vector_views_share_storage():
    p = ParamVector([("W", (2, 3)), ("b", (3,))])
    p["W"][0, 0] = 7
    assert p.data[0] == 7 and len(p) == 9
    with pytest.raises(ValueError):
        ParamVector([("b", (3,))], np.zeros(4))


def test_mse_and_bce_values():
    loss, g = mse([1.0, 3.0], [0.0, 0.0])
    assert loss == 5.0 and g.tolist() == [1.0, 3.0]
    loss, _ = bce(np.array([0.5]), np.array([1.0]))
    assert loss == pytest.approx(np.log(2))
    loss, g = bce_logits(np.array([0.0, 0.0]), np.array([1.0, 0.0]))
    assert loss == pytest.approx(np.log(2)) and g.tolist() == [-0.25, 0.25]
    with pytest.raises(ValueError):
        mse([1.0], [1.0, 2.0])


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=6), st.integers(0, 2**32 - 1))
def test_bce_logits_agrees_with_probability_form(zs, seed):
    z = np.array(zs)
    lab = np.random.default_rng(seed).integers(0, 2, z.size).astype(float)
    p = 1 / (1 + np.exp(-z))
    np.testing.assert_allclose(bce_logits(z, lab)[0], bce(p, lab)[0], rtol=1e-6, atol=1e-9)


def test_sgd_and_adam_steps():
    p = np.array([1.0, -1.0])
    g = np.array([0.5, -2.0])
    np.testing.assert_allclose(optimize_step(Optimizer("sgd", lr=0.1), p, g), [0.95, -0.8])
    # the first bias-corrected adam step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(optimize_step(Optimizer("adam", lr=0.01), p, g), [0.99, -0.99], atol=1e-6)
    with pytest.raises(FloatingPointError):
        optimize_step(Optimizer(), p, np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        Optimizer(lr=0)


def test_adam_minimises_quadratic():
    opt = Optimizer("adam", lr=0.05)
    x = np.array([3.0, -2.0])
    for _ in range(2000):
        x = optimize_step(opt, x, 2 * x)
    assert np.abs(x).max() < 1e-3


def test_soft_update():
    np.testing.assert_allclose(soft_update(np.zeros(2), np.ones(2), 0.25), [0.25, 0.25])
    a = Network(ApproximatorSpec(2, ((2, "relu"),)), rng=np.random.default_rng(1))
    b = Network(ApproximatorSpec(2, ((2, "relu"),)), rng=np.random.default_rng(2))
    before = a.params.data.copy()
    soft_update(a, b, 1.0)
    np.testing.assert_array_equal(a.params.data, b.params.data)
    assert not np.array_equal(before, a.params.data)
    with pytest.raises(ValueError):
        soft_update(a, b, 1.5)


def test_checkpoint_round_trip(tmp_path, rng):
    net = Network(ApproximatorSpec(3, ((4, "relu"), (2, "identity")), recurrent=3), rng=rng)
    opt = Optimizer("adam", lr=0.01)
    net.params.data[...] = optimize_step(opt, net.params.data, rng.normal(size=len(net.params)))
    other = Network(ApproximatorSpec(2, ((1, "tanh"),)), rng=rng)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"a": (net, opt), "b": other}, {"note": "hi"})
    entries, meta = load_checkpoint(path)
    assert meta == {"note": "hi"}
    net2, opt2 = entries["a"]
    assert net2.spec == net.spec
    np.testing.assert_array_equal(net2.params.data, net.params.data)
    np.testing.assert_array_equal(opt2.m, opt.m)
    assert opt2.t == 1 and entries["b"][1] is None
    save_checkpoint(tmp_path / "y.ckpt", {"a": (net2, opt2), "b": entries["b"][0]}, {"note": "hi"})
    assert (tmp_path / "y.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(ValueError):
        load_checkpoint(p)
