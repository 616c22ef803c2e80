import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathflux import autodiff as ad


def _fd_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f over flat array x."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_add_mul_values():
    a = ad.Tensor([1.0, 2.0])
    b = ad.Tensor([3.0, 4.0])
    assert np.allclose((a + b).data, [4.0, 6.0])
    assert np.allclose((a * b).data, [3.0, 8.0])
    assert np.allclose((a - 2.0).data, [-1.0, 0.0])
    assert np.allclose((1.0 / b).data, [1 / 3, 0.25])


def test_quadratic_gradient():
    store = ad.ParameterStore()
    theta = store.create("theta", [1.5, -2.0, 0.5])
    loss = ad.tsum(theta * theta)
    ad.backward(loss)
    assert np.allclose(theta.grad, 2 * theta.data)


def test_disconnected_parameter_zero_grad():
    store = ad.ParameterStore()
    a = store.create("a", [1.0])
    store.create("unused", [5.0])
    loss = ad.tsum(a * a)
    ad.backward(loss)
    grads = store.grads()
    assert np.allclose(grads["unused"], 0.0)
    assert np.allclose(grads["a"], 2.0)


def test_backward_rejects_nonscalar():
    a = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(a * a)


def test_grad_accumulates_once_per_call():
    store = ad.ParameterStore()
    a = store.create("a", [2.0])
    y = a * a + a * 3.0  # a used twice; single backward accumulates both paths
    ad.backward(ad.tsum(y))
    assert np.allclose(a.grad, 2 * 2.0 + 3.0)


def test_reversed_operand_gradients():
    # constant-first binary ops must still route gradients to the tensor
    x = np.array([0.7, -0.4, 1.2])
    store = ad.ParameterStore()
    p = store.create("p", x)
    y = (2.0 - p) * (1.0 / ad.exp(p)) + 3.0 / (p * p + 1.0)
    ad.backward(ad.tsum(y))

    def f(v):
        return float(((2.0 - v) / np.exp(v) + 3.0 / (v * v + 1.0)).sum())

    fd = _fd_grad(f, x)
    assert np.allclose(p.grad, fd, rtol=1e-4, atol=1e-9)


def test_backward_targets_restrict_leaves():
    store = ad.ParameterStore()
    a = store.create("a", [1.0])
    b = ad.Tensor([2.0], requires_grad=True)
    loss = ad.tsum(a * b)
    ad.backward(loss, targets=[b])
    assert a.grad is None
    assert np.allclose(b.grad, [1.0])


@pytest.mark.parametrize("op,dop", [
    (ad.exp, np.exp),
    (ad.log, lambda x: 1 / x),
    (ad.tanh, lambda x: 1 - np.tanh(x) ** 2),
    (ad.sigmoid, None),
    (ad.softplus, None),
    (ad.sin, np.cos),
    (ad.cos, lambda x: -np.sin(x)),
    (ad.sqrt, lambda x: 0.5 / np.sqrt(x)),
])
def test_unary_gradients_match_fd(op, dop):
    rng = np.random.default_rng(0)
    x = rng.uniform(0.3, 1.5, size=5)
    store = ad.ParameterStore()
    p = store.create("p", x)
    ad.backward(ad.tsum(op(p)))

    def f(v):
        return float(ad.tsum(op(ad.Tensor(v))).data)

    fd = _fd_grad(f, x)
    assert np.allclose(p.grad, fd, rtol=1e-4, atol=1e-8)


def test_matmul_logsumexp_grad_fd():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal((5, 3))
    store = ad.ParameterStore()
    wp = store.create("w", w)
    loss = ad.tsum(ad.logsumexp(ad.matmul(ad.Tensor(x), wp), axis=1))
    ad.backward(loss)

    def f(v):
        return float(ad.tsum(ad.logsumexp(ad.Tensor(x) @ ad.Tensor(v.reshape(3, 4)), axis=1)).data)

    fd = _fd_grad(f, w.ravel()).reshape(3, 4)
    assert np.allclose(wp.grad, fd, rtol=1e-4, atol=1e-8)


def test_getitem_concat_where_grads():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3))
    store = ad.ParameterStore()
    p = store.create("p", x)
    mask = x[:, :1] > 0
    y = ad.concat([p[:, 0:1] * 2.0, p[:, 1:3]], axis=1)
    z = ad.where(mask, y, y * 3.0)
    ad.backward(ad.tsum(z * z))

    def f(v):
        v = v.reshape(4, 3)
        y = np.concatenate([v[:, 0:1] * 2.0, v[:, 1:3]], axis=1)
        z = np.where(mask, y, y * 3.0)
        return float((z * z).sum())

    fd = _fd_grad(f, x.ravel()).reshape(4, 3)
    assert np.allclose(p.grad, fd, rtol=1e-4, atol=1e-8)


# ---------------------------------------------------------------------------
# forward tangents

def test_tangent_linearity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(6)
    t = ad.seed_tangent(0.37)

    def f(tn):
        return ad.sin(tn * x) * 2.0

    def g(tn):
        return ad.exp(tn * 0.3)

    a, b = 1.7, -0.9
    combo = ad.tangent_of(f(t) * a + g(t) * b).data
    parts = a * ad.tangent_of(f(t)).data + b * ad.tangent_of(g(t)).data
    assert np.allclose(combo, parts, rtol=1e-12)


def test_tangent_matches_fd_through_composition():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((1, 8))

    def value(tv):
        t = ad.Tensor(np.array([[tv]]))
        h = ad.tanh(ad.matmul(t, ad.Tensor(w)))
        return float(ad.tsum(ad.logsumexp(h, axis=1)).data)

    t = ad.seed_tangent(np.array([[0.4]]))
    h = ad.tanh(ad.matmul(t, ad.Tensor(w)))
    out = ad.tsum(ad.logsumexp(h, axis=1))
    h_fd = 1e-5
    fd = (value(0.4 + h_fd) - value(0.4 - h_fd)) / (2 * h_fd)
    assert math.isclose(float(ad.tangent_of(out).data), fd, rel_tol=1e-6)


def test_forward_over_reverse_param_grad():
    # loss contains a time-derivative term; its parameter gradient must match FD
    rng = np.random.default_rng(5)
    w0 = rng.standard_normal((1, 4)) * 0.7

    def loss_value(wv):
        store = ad.ParameterStore()
        w = store.create("w", wv.reshape(1, 4))
        t = ad.seed_tangent(np.array([[0.3]]))
        f = ad.tsum(ad.sin(ad.matmul(t, w)))
        dt_f = ad.tangent_of(f)
        loss = dt_f * dt_f
        return loss, store

    loss, store = loss_value(w0.ravel())
    ad.backward(loss)
    grad = store.grads()["w"].ravel()

    def f(v):
        return float(loss_value(v)[0].data)

    fd = _fd_grad(f, w0.ravel())
    assert np.allclose(grad, fd, rtol=1e-4, atol=1e-9)


# ---------------------------------------------------------------------------
# embeddings and networks

def test_sinusoidal_embed_at_zero():
    t = ad.Tensor(np.zeros((1, 1)))
    emb = ad.sinusoidal_embed(t, 4)
    assert np.allclose(emb.data, [[0.0, 0.0, 1.0, 1.0]])


def test_sinusoidal_embed_tangent_is_frequency_vector():
    t = ad.seed_tangent(np.zeros((1, 1)))
    emb = ad.sinusoidal_embed(t, 8)
    freqs = ad.sinusoidal_frequencies(8)
    tan = ad.tangent_of(emb).data[0]
    assert np.allclose(tan[:4], freqs)   # d/dt sin(wt) at 0 = w
    assert np.allclose(tan[4:], 0.0)     # d/dt cos(wt) at 0 = 0


def test_sinusoidal_embed_odd_width_rejected():
    with pytest.raises(ad.ConfigError):
        ad.sinusoidal_embed(ad.Tensor(np.zeros((1, 1))), 3)
    with pytest.raises(ad.ConfigError):
        ad.sinusoidal_embed(ad.Tensor(np.zeros((1, 1))), 0)


def test_mlp_zero_weights_returns_bias():
    store = ad.ParameterStore()
    net = ad.Mlp(store, "net", 3, 2, hidden=8, n_layers=2, rng=np.random.default_rng(0))
    for name in store.names():
        if ".W" in name:
            store[name].data[:] = 0.0
    store["net.b2"].data[:] = [1.5, -0.5]
    out = net(ad.Tensor(np.zeros((4, 3))))
    assert np.allclose(out.data, [[1.5, -0.5]] * 4)


def test_mlp_jvp_matches_fd_in_t():
    rng = np.random.default_rng(6)
    store = ad.ParameterStore()
    net = ad.Mlp(store, "net", 8, 3, hidden=16, n_layers=2, rng=rng)

    def forward(tv, tangent=False):
        t = ad.Tensor(np.array([[tv]]))
        if tangent:
            t = ad.seed_tangent(np.array([[tv]]))
        return net(ad.sinusoidal_embed(t, 8))

    out = forward(0.21, tangent=True)
    jvp = ad.tangent_of(out).data
    h = 1e-5
    fd = (forward(0.21 + h).data - forward(0.21 - h).data) / (2 * h)
    assert np.max(np.abs(jvp - fd)) / (np.max(np.abs(fd)) + 1e-12) < 1e-6


def test_masked_mlp_autoregressive_property():
    store = ad.ParameterStore()
    dim, ctx, per = 4, 6, 3
    net = ad.MaskedMlp(store, "made", dim, ctx, per, hidden=32, n_layers=3,
                       rng=np.random.default_rng(7))
    rng = np.random.default_rng(8)
    x = rng.standard_normal((5, dim))
    c = rng.standard_normal((5, ctx))
    base = net(ad.Tensor(x), ad.Tensor(c)).data
    for j in range(dim):
        xp = x.copy()
        xp[:, j] += 10.0
        out = net(ad.Tensor(xp), ad.Tensor(c)).data
        for i in range(dim):
            block = slice(i * per, (i + 1) * per)
            if j >= i:
                assert np.array_equal(out[:, block], base[:, block]), (i, j)


def test_masked_mlp_connectivity_matrix():
    store = ad.ParameterStore()
    dim, ctx, per = 5, 4, 2
    net = ad.MaskedMlp(store, "made", dim, ctx, per, hidden=16, n_layers=2,
                       rng=np.random.default_rng(9))
    reach = net.connectivity()
    for i in range(dim):
        for j in range(dim):
            connected = reach[j, i * per:(i + 1) * per].any()
            assert connected == (j < i), (i, j)
    # context reaches every head
    assert reach[dim:, :].all()


def test_masked_mlp_head_jacobian_zero_for_later_inputs():
    store = ad.ParameterStore()
    dim, ctx, per = 3, 4, 2
    net = ad.MaskedMlp(store, "made", dim, ctx, per, hidden=16, n_layers=2,
                       rng=np.random.default_rng(10))
    x0 = np.random.default_rng(11).standard_normal((1, dim))
    c0 = np.random.default_rng(12).standard_normal((1, ctx))
    for i in range(dim):
        x = ad.Tensor(x0, requires_grad=True)
        out = net(x, ad.Tensor(c0))
        head = ad.tsum(out[:, i * per:(i + 1) * per])
        ad.backward(head)
        jac = x.grad[0]
        assert np.all(jac[i:] == 0.0), i


# ---------------------------------------------------------------------------
# optimizer and schedule

def test_adam_zero_gradient_keeps_params():
    store = ad.ParameterStore()
    p = store.create("p", [1.0, 2.0])
    before = p.data.copy()
    ad.adam_step(store, {"p": np.zeros(2)}, lr=0.1)
    assert np.array_equal(p.data, before)
    assert store.step_count == 1


def test_adam_first_step_magnitude():
    # constant gradient g: bias-corrected first step is lr * g/|g| (elementwise)
    store = ad.ParameterStore()
    p = store.create("p", [0.0, 0.0])
    g = np.array([0.3, -2.0])
    ad.adam_step(store, {"p": g}, lr=1e-2)
    expected = -1e-2 * g / (np.abs(g) + 1e-8 * np.sqrt(1 - 0.999))
    assert np.allclose(p.data, expected, rtol=1e-6)
    assert np.allclose(np.abs(p.data), 1e-2, rtol=1e-4)


def test_adam_missing_grad_key_errors():
    store = ad.ParameterStore()
    store.create("p", [1.0])
    with pytest.raises(KeyError):
        ad.adam_step(store, {}, lr=0.1)


def test_adam_lr_zero_no_change():
    store = ad.ParameterStore()
    p = store.create("p", [1.0])
    ad.adam_step(store, {"p": np.array([5.0])}, lr=0.0)
    assert np.array_equal(p.data, [1.0])


def test_cosine_lr_endpoints():
    assert ad.cosine_lr(0, 100, 3e-4) == pytest.approx(3e-4)
    assert ad.cosine_lr(100, 100, 3e-4) == pytest.approx(0.0, abs=1e-20)
    assert ad.cosine_lr(50, 100, 3e-4) == pytest.approx(1.5e-4)


def test_cosine_lr_clamps_past_total():
    with pytest.warns(UserWarning):
        assert ad.cosine_lr(101, 100, 3e-4) == 0.0


# ---------------------------------------------------------------------------
# property tests

@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_random_composite_grad_matches_fd(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.2, 1.2, size=4)

    def build(v):
        p = ad.Tensor(v, requires_grad=True)
        y = ad.tanh(p * 1.3) + ad.softplus(p) * ad.sigmoid(p[1] * p)
        z = ad.logsumexp(ad.reshape(y * y, (1, 4)), axis=1)
        return ad.tsum(z), p

    loss, p = build(x)
    ad.backward(loss)
    fd = _fd_grad(lambda v: float(build(v)[0].data), x)
    assert np.allclose(p.grad, fd, rtol=1e-4, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=-2.0, max_value=2.0, allow_nan=False),
       st.floats(min_value=-3.0, max_value=3.0, allow_nan=False),
       st.floats(min_value=-3.0, max_value=3.0, allow_nan=False))
def test_tangent_linearity_property(tv, a, b):
    x = np.array([0.3, -0.8])
    t = ad.seed_tangent(tv)
    f = ad.sin(t * x)
    g = ad.exp(t * 0.2) * x
    lhs = ad.tangent_of(f * a + g * b).data
    rhs = a * ad.tangent_of(f).data + b * ad.tangent_of(g).data
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    from pathflux import checkpoints as ck
    store = ad.ParameterStore()
    rng = np.random.default_rng(13)
    store.create("a.W0", rng.standard_normal((3, 4)))
    store.create("a.b0", rng.standard_normal(4))
    cfg = {"model": {"kind": "factorized", "dim": 2}, "seed": 7}
    path = tmp_path / "ck.json"
    ck.save_checkpoint(path, store, cfg)
    cfg2, params, _ = ck.load_checkpoint(path)
    assert cfg2 == cfg
    for name, p in store.items():
        assert np.array_equal(params[name], p.data)

    store2 = ad.ParameterStore()
    store2.create("a.W0", np.zeros((3, 4)))
    store2.create("a.b0", np.zeros(4))
    store2.set_values(params)
    assert np.array_equal(store2["a.W0"].data, store["a.W0"].data)
