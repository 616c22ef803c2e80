import ast
import warnings
from pathlib import Path

import numpy as np
import pytest

from pathflux import autodiff as ad
from pathflux import conservation as cons
from pathflux import datasets as ds
from pathflux import density_models as dm
from pathflux import objectives as obj

UNIT_S_RAW = float(np.log(np.expm1(1.0 - dm.S_FLOOR)))  # softplus^-1(1 - floor)


def _translating(dim=2, vel=(0.0, 0.0), mu0=None, seed=0, L=1):
    store = ad.ParameterStore()
    rng = np.random.default_rng(seed)
    mu0 = np.zeros((dim, L)) if mu0 is None else np.asarray(mu0, float)
    model = dm.TranslatingFactorizedModel(
        store, dim, n_logistics=L, mu0=mu0,
        velocity=np.asarray(vel, float)[:dim],
        s_raw=np.full((dim, L), UNIT_S_RAW))
    return store, model


def _factorized(dim=2, L=3, K=1, seed=0, hidden=12, layers=2, embed=8):
    store = ad.ParameterStore()
    model = dm.FactorizedModel(store, dim, n_logistics=L, n_components=K,
                               hidden=hidden, n_layers=layers, embed_width=embed,
                               rng=np.random.default_rng(seed))
    return store, model


def _fd_param_grad(build_loss, store, h=1e-5):
    """Central-difference gradient over every parameter in the store."""
    grads = {}
    for name, p in store.items():
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(build_loss().data)
            flat[i] = orig - h
            lm = float(build_loss().data)
            flat[i] = orig
            g.ravel()[i] = (lp - lm) / (2 * h)
        grads[name] = g
    return grads


def _check_grads(loss_builder, store, rtol=1e-4):
    store.zero_grad()
    loss = loss_builder()
    ad.backward(loss)
    exact = store.grads()
    fd = _fd_param_grad(loss_builder, store)
    for name in store.names():
        denom = np.maximum(np.abs(fd[name]), 1e-6)
        assert np.max(np.abs(exact[name] - fd[name]) / denom) < rtol, name


# ---------------------------------------------------------------------------
# generative loss

def test_loss_gm_peak_value():
    _, model = _translating(dim=2)
    loss, rep = obj.loss_gm(model, np.zeros(1), np.zeros((1, 2)))
    assert loss.data == pytest.approx(-np.log(0.25) * 2, rel=1e-3)
    assert rep.terms["nll"] == pytest.approx(float(loss.data))


def test_loss_gm_duplicated_batch_invariant():
    _, model = _factorized()
    rng = np.random.default_rng(0)
    t = rng.random(8)
    x = rng.standard_normal((8, 2))
    l1, _ = obj.loss_gm(model, t, x)
    l2, _ = obj.loss_gm(model, np.tile(t, 2), np.tile(x, (2, 1)))
    assert l1.data == pytest.approx(float(l2.data), rel=1e-14)


def test_loss_gm_rejects_nonfinite():
    _, model = _factorized()
    with pytest.raises(ValueError):
        obj.loss_gm(model, np.zeros(1), np.array([[np.nan, 0.0]]))


def test_loss_gm_gradient_matches_fd():
    store, model = _translating(dim=1, vel=(0.4,), mu0=[[0.2]])
    rng = np.random.default_rng(1)
    t = rng.random(6)
    x = rng.standard_normal((6, 1))

    def build():
        return obj.loss_gm(model, t, x)[0]

    _check_grads(build, store)


# ---------------------------------------------------------------------------
# kinetic energy

def test_kinetic_zero_for_static_model():
    _, model = _translating(dim=2, vel=(0.0, 0.0))
    asm = cons.FluxAssembly(model)
    ke = obj.kinetic_energy(asm, (0, 1), 64, np.random.default_rng(0))
    assert float(ke.data) == 0.0


def test_kinetic_translated_model_exact():
    vel = np.array([0.8, -0.5])
    _, model = _translating(dim=2, vel=vel)
    asm = cons.FluxAssembly(model)
    ke = obj.kinetic_energy(asm, (0, 1), 256, np.random.default_rng(0))
    assert float(ke.data) == pytest.approx(float(vel @ vel), rel=1e-10)


def test_kinetic_variance_halves_when_doubling_n():
    _, model = _factorized(dim=2, L=2, seed=3)
    asm = cons.FluxAssembly(model)
    reps = 50

    def estimates(n_mc, seed0):
        return np.array([
            float(obj.kinetic_energy(asm, (0, 1), n_mc,
                                     np.random.default_rng(seed0 + i)).data)
            for i in range(reps)
        ])

    v_small = estimates(64, 100).var()
    v_big = estimates(128, 900).var()
    ratio = v_small / v_big
    assert 1.2 < ratio < 3.5


def test_kinetic_gradient_matches_fd():
    store, model = _translating(dim=2, vel=(0.5, -0.3), mu0=[[0.1], [-0.2]])
    asm = cons.FluxAssembly(model)

    def build():
        return obj.kinetic_energy(asm, (0, 1), 32, np.random.default_rng(5))

    _check_grads(build, store)


# ---------------------------------------------------------------------------
# snapshot transport loss

def test_loss_ot_weight_zero_is_snapshot_nll_sum():
    _, model = _factorized(dim=2)
    asm = cons.FluxAssembly(model)
    rng = np.random.default_rng(0)
    batches = [(0.0, rng.standard_normal((16, 2))),
               (1.0, rng.standard_normal((16, 2)))]
    total, rep = obj.loss_ot(asm, batches, kinetic_weight=0.0, rng=rng)
    expected = sum(float(obj.loss_gm(model, t, X)[0].data) for t, X in batches)
    assert float(total.data) == pytest.approx(expected, rel=1e-12)
    rep.check()


def test_loss_ot_requires_two_snapshots():
    _, model = _factorized()
    asm = cons.FluxAssembly(model)
    with pytest.raises(ad.ConfigError):
        obj.loss_ot(asm, [(0.0, np.zeros((4, 2)))], rng=np.random.default_rng(0))


def test_loss_ot_report_decomposition():
    _, model = _factorized(dim=2, K=2)
    asm = cons.FluxAssembly(model)
    rng = np.random.default_rng(1)
    batches = [(0.0, rng.standard_normal((8, 2))),
               (0.5, rng.standard_normal((8, 2))),
               (1.0, rng.standard_normal((8, 2)))]
    total, rep = obj.loss_ot(asm, batches, kinetic_weight=0.2, n_mc=32, rng=rng)
    recon = rep.terms["nll"] + 0.2 * rep.terms["kinetic"]
    assert abs(recon - float(total.data)) < 1e-10


def test_loss_ot_identical_snapshots_trained_kinetic_vanishes():
    # two identical marginals: the optimum is a static path, kinetic -> 0
    store, model = _translating(dim=2, vel=(0.9, -0.6), mu0=[[0.3], [-0.1]])
    asm = cons.FluxAssembly(model)
    rng = np.random.default_rng(2)
    data = 0.4 * rng.standard_normal((256, 2))
    batches = [(0.0, data), (1.0, data)]
    for step in range(200):
        loss, _ = obj.loss_ot(asm, batches, kinetic_weight=0.5, n_mc=64, rng=rng)
        store.zero_grad()
        ad.backward(loss)
        ad.adam_step(store, store.grads(), lr=0.05)
    ke = obj.kinetic_energy(asm, (0, 1), 256, np.random.default_rng(3))
    assert float(ke.data) < 1e-2


def test_loss_ot_gradient_matches_fd():
    store, model = _translating(dim=2, vel=(0.2, 0.1), mu0=[[0.1], [0.0]])
    asm = cons.FluxAssembly(model)
    rng = np.random.default_rng(4)
    batches = [(0.0, rng.standard_normal((6, 2))),
               (1.0, rng.standard_normal((6, 2)) + 0.5)]

    def build():
        return obj.loss_ot(asm, batches, kinetic_weight=0.3, n_mc=16,
                           rng=np.random.default_rng(7))[0]

    _check_grads(build, store)


# ---------------------------------------------------------------------------
# control loss

def _env(obstacles, eta=0.0, sigma_t=1.0, obstacle_weight=1.0):
    return ds.SocEnvironment(
        obstacles=obstacles, q0_mean=np.array([-1.4, 0.0]), q0_std=0.15,
        q1_mean=np.array([1.4, 0.0]), q1_std=0.15, sigma_t=sigma_t, eta=eta,
        obstacle_weight=obstacle_weight)


def test_loss_soc_reduces_to_endpoint_nll():
    _, model = _factorized(dim=2)
    asm = cons.FluxAssembly(model)
    env = _env([], eta=0.0, sigma_t=1e9)
    rng = np.random.default_rng(0)
    q0 = env.sample_q0(32, rng)
    q1 = env.sample_q1(32, rng)
    total, rep = obj.loss_soc(asm, env, q0, q1, n_mc=32, rng=np.random.default_rng(1))
    endpoints = rep.terms["endpoint_nll_0"] + rep.terms["endpoint_nll_1"]
    assert float(total.data) == pytest.approx(endpoints, abs=1e-6)


def test_loss_soc_obstacle_term_far_and_center():
    # tight path far from the obstacle: everything beyond the softplus tail
    store, model = _translating(dim=2, mu0=[[0.0], [0.0]])
    store["density.s_raw"].data[:] = 200.0  # very sharp: samples pile at 0
    asm = cons.FluxAssembly(model)
    rng = np.random.default_rng(2)
    far = _env([(np.array([10.0, 10.0]), 0.3)])
    _, rep = obj.loss_soc(asm, far, np.zeros((4, 2)), np.zeros((4, 2)),
                          n_mc=64, rng=rng, terms=("running",))
    assert rep.terms["obstacle"] < 1e-8
    centered = _env([(np.array([0.0, 0.0]), 0.3)])
    _, rep2 = obj.loss_soc(asm, centered, np.zeros((4, 2)), np.zeros((4, 2)),
                           n_mc=64, rng=np.random.default_rng(3), terms=("running",))
    assert rep2.terms["obstacle"] == pytest.approx(float(np.logaddexp(0, 0.09)), abs=1e-3)


def test_loss_soc_empty_endpoints_error():
    _, model = _factorized(dim=2)
    asm = cons.FluxAssembly(model)
    env = _env([])
    with pytest.raises(ad.ConfigError):
        obj.loss_soc(asm, env, np.zeros((0, 2)), np.zeros((4, 2)),
                     rng=np.random.default_rng(0))


def test_loss_soc_gradient_matches_fd():
    store, model = _translating(dim=2, vel=(0.3, 0.0), mu0=[[-0.5], [0.0]])
    asm = cons.FluxAssembly(model)
    env = _env([(np.array([0.2, 0.1]), 0.35)], eta=0.05)
    rng = np.random.default_rng(5)
    q0 = env.sample_q0(8, rng)
    q1 = env.sample_q1(8, rng)

    def build():
        return obj.loss_soc(asm, env, q0, q1, n_mc=16,
                            rng=np.random.default_rng(11))[0]

    _check_grads(build, store)


# ---------------------------------------------------------------------------
# Jacobian symmetry penalty

def test_jac_sym_factorized_is_zero():
    _, model = _factorized(dim=2, seed=6)
    asm = cons.FluxAssembly(model)
    rng = np.random.default_rng(0)
    xs = dm.sample(model, 0.5, 32, rng)
    # zero up to finite-difference truncation on the nonlinear 1D conditionals
    est = obj.loss_jac_sym(asm, 0.5, xs, rng=np.random.default_rng(1), n_probes=4)
    assert abs(float(est.data)) < 1e-5


def test_jac_sym_linear_field_frobenius():
    rng = np.random.default_rng(7)
    M = rng.standard_normal((3, 3))
    target = float(np.sum((M - M.T) ** 2))

    def field(x_node):
        return ad.matmul(x_node, ad.Tensor(M.T))

    xs = rng.standard_normal((100, 3))
    est = obj.loss_jac_sym(field, 0.0, xs, rng=np.random.default_rng(8),
                           n_probes=100)
    assert abs(float(est.data) - target) / target < 0.05


def test_jac_sym_rotation_field_is_eight():
    M = np.array([[0.0, -1.0], [1.0, 0.0]])

    def field(x_node):
        return ad.matmul(x_node, ad.Tensor(M.T))

    xs = np.random.default_rng(9).standard_normal((100, 2))
    est = obj.loss_jac_sym(field, 0.0, xs, rng=np.random.default_rng(10),
                           n_probes=100)
    assert abs(float(est.data) - 8.0) / 8.0 < 0.05


def test_jac_sym_gradient_matches_fd():
    store = ad.ParameterStore()
    model = dm.FactorizedModel(store, 2, n_logistics=2, hidden=6, n_layers=1,
                               embed_width=4, rng=np.random.default_rng(12))
    vnet = cons.AntisymmetricFluxNet(store, 2, hidden=4, n_layers=1, embed_width=4,
                                     rng=np.random.default_rng(13))
    asm = cons.FluxAssembly(model, vnet=vnet)
    xs = dm.sample(model, 0.5, 8, np.random.default_rng(14))

    def build():
        return obj.loss_jac_sym(asm, 0.5, xs, rng=np.random.default_rng(15),
                                n_probes=1)

    _check_grads(build, store, rtol=2e-4)


# ---------------------------------------------------------------------------
# schedule

def test_staged_schedule_defaults():
    stages = obj.staged_soc_schedule({})
    assert [s.steps for s in stages] == [1000, 1000, 20000]
    assert stages[0].terms == ("endpoints",)
    assert stages[1].terms == ("endpoints", "control")
    assert stages[2].terms == obj.SOC_ALL_TERMS


def test_staged_schedule_single_stage():
    stages = obj.staged_soc_schedule({"single_stage": True, "total_steps": 500})
    assert len(stages) == 1
    assert stages[0].terms == obj.SOC_ALL_TERMS
    assert stages[0].steps == 500


def test_staged_schedule_zero_budget_skipped():
    with pytest.warns(UserWarning):
        stages = obj.staged_soc_schedule({"stage_steps": [0, 10, 20]})
    assert len(stages) == 2
    assert stages[0].terms == ("endpoints", "control")


# ---------------------------------------------------------------------------
# simulation-free guarantee (static side)

def test_objectives_module_never_imports_integrator():
    src = Path(obj.__file__).read_text()
    tree = ast.parse(src)
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            names = [a.name for a in node.names]
            assert not any("evaluation" in n for n in names)
        if isinstance(node, ast.ImportFrom):
            mod = node.module or ""
            assert "evaluation" not in mod
            assert not any(a.name == "integrate" for a in node.names)
    assert "integrate(" not in src


def test_training_does_not_invoke_integrator():
    from pathflux import evaluation as ev
    ev.reset_integrator_call_count()
    store, model = _translating(dim=2, vel=(0.1, 0.1))
    asm = cons.FluxAssembly(model)
    rng = np.random.default_rng(0)
    batches = [(0.0, rng.standard_normal((8, 2))), (1.0, rng.standard_normal((8, 2)))]
    for _ in range(3):
        loss, _ = obj.loss_ot(asm, batches, kinetic_weight=0.1, n_mc=16, rng=rng)
        store.zero_grad()
        ad.backward(loss)
        ad.adam_step(store, store.grads(), 1e-3)
    env = _env([(np.array([0.0, 0.5]), 0.3)], eta=0.1)
    loss, _ = obj.loss_soc(asm, env, env.sample_q0(8, rng), env.sample_q1(8, rng),
                           n_mc=16, rng=rng)
    ad.backward(loss)
    assert ev.integrator_call_count() == 0
