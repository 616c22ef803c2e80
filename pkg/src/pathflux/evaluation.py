"""Evaluation-only machinery: SDE/ODE integration, Wasserstein-2 metrics,
and finite-difference certificates for the conservation properties.

Nothing here is reachable from the training objectives; the integrator keeps
a call counter so tests can assert that training never simulates.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import conservation as cons
from . import density_models as dm
from .autodiff import ConfigError

_integrator_calls = 0


def integrator_call_count():
    return _integrator_calls


def reset_integrator_call_count():
    global _integrator_calls
    _integrator_calls = 0


@dataclass
class TrajectoryBatch:
    times: np.ndarray          # (steps,)
    states: np.ndarray         # (n, steps, D)
    g_used: object
    integrator: str = "euler-maruyama"


def integrate(assembly, x0, t_grid, g=None, rng=None):
    """Euler-Maruyama under the assembly's velocity; g=0 degenerates to the
    explicit Euler ODE.  Evaluation only."""
    global _integrator_calls
    _integrator_calls += 1
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size < 2 or np.any(np.diff(t_grid) <= 0):
        raise ConfigError("t_grid must be strictly increasing with >= 2 entries")
    sched = assembly.g if g is None else (
        g if isinstance(g, cons.VolatilitySchedule) else cons.VolatilitySchedule(g))
    x = np.array(x0, dtype=np.float64, copy=True)
    n, D = x.shape
    states = np.empty((n, t_grid.size, D))
    states[:, 0] = x
    for k in range(t_grid.size - 1):
        dt = t_grid[k + 1] - t_grid[k]
        u = cons.velocity(assembly, t_grid[k], x).data
        gk = float(sched(t_grid[k]))
        x = x + u * dt
        if gk > 0.0:
            if rng is None:
                raise ConfigError("stochastic integration needs an rng")
            x = x + gk * np.sqrt(dt) * rng.standard_normal((n, D))
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"non-finite state at step {k + 1} "
                               f"(t={t_grid[k + 1]:.4f})")
        states[:, k + 1] = x
    return TrajectoryBatch(times=t_grid, states=states, g_used=sched)


# ---------------------------------------------------------------------------
# Wasserstein-2

def wasserstein2(a, b, method="auto", sinkhorn_iters=500):
    """W2 between equal-size sample clouds.

    Exact mode solves the assignment on squared Euclidean costs (up to 2048
    points); larger clouds fall back to a debiasing-free entropic estimate,
    reported as approximate.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError(f"sample clouds must be (n, D), got {a.shape} vs {b.shape}")
    exact = method == "exact" or (method == "auto" and max(len(a), len(b)) <= 2048)
    if exact:
        if len(a) != len(b):
            raise ConfigError(
                f"exact mode needs equal sample counts, got {len(a)} vs {len(b)}")
        cost = _sq_dists(a, b)
        rows, cols = linear_sum_assignment(cost)
        return float(np.sqrt(cost[rows, cols].mean()))
    return _sinkhorn_w2(a, b, iters=sinkhorn_iters)


def _sq_dists(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def _sinkhorn_w2(a, b, iters=500):
    C = _sq_dists(a, b)
    eps = 0.01 * np.median(C)
    log_mu = -np.log(len(a)) * np.ones(len(a))
    log_nu = -np.log(len(b)) * np.ones(len(b))
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    for _ in range(iters):
        g = -eps * _lse((f[:, None] - C) / eps + log_mu[:, None], axis=0)
        f = -eps * _lse((g[None, :] - C) / eps + log_nu[None, :], axis=1)
    logP = (f[:, None] + g[None, :] - C) / eps + log_mu[:, None] + log_nu[None, :]
    cost = float((np.exp(logP) * C).sum())
    return float(np.sqrt(max(cost, 0.0)))


def _lse(m, axis):
    mx = m.max(axis=axis, keepdims=True)
    out = mx + np.log(np.exp(m - mx).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


# ---------------------------------------------------------------------------
# finite-difference residuals (fourth-order central stencils)

_D1_OFFSETS = np.array([-2.0, -1.0, 1.0, 2.0])
_D1_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
_D2_OFFSETS = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
_D2_WEIGHTS = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def _h_for(x):
    return 1e-3 * (1.0 + np.abs(x))


def _dt_density(assembly, t, X):
    """d rho/dt by stencil in t; t (m,), X (m, D)."""
    m = t.shape[0]
    h = _h_for(t)
    ts = (t[None, :] + _D1_OFFSETS[:, None] * h[None, :]).reshape(-1)
    Xs = np.tile(X, (4, 1))
    rho = np.exp(dm.log_density(assembly.model, ts, Xs).data).reshape(4, m)
    return (rho * _D1_WEIGHTS[:, None]).sum(0) / h


def _div_field(field_fn, t, X):
    """sum_d d field_d / d x_d by per-axis stencils; field_fn(t, X) -> (m, D)."""
    m, D = X.shape
    rows = []
    hs = []
    for d in range(D):
        h = _h_for(X[:, d])
        hs.append(h)
        for off in _D1_OFFSETS:
            Xp = X.copy()
            Xp[:, d] += off * h
            rows.append(Xp)
    pts = np.concatenate(rows, axis=0)
    ts = np.tile(t, 4 * D)
    vals = field_fn(ts, pts)
    div = np.zeros(m)
    idx = 0
    for d in range(D):
        block = vals[idx:idx + 4 * m, d].reshape(4, m)
        div += (block * _D1_WEIGHTS[:, None]).sum(0) / hs[d]
        idx += 4 * m
    return div


def _laplacian_density(assembly, t, X):
    m, D = X.shape
    lap = np.zeros(m)
    for d in range(D):
        h = _h_for(X[:, d])
        pts = []
        for off in _D2_OFFSETS:
            Xp = X.copy()
            Xp[:, d] += off * h
            pts.append(Xp)
        pts = np.concatenate(pts, axis=0)
        ts = np.tile(t, 5)
        rho = np.exp(dm.log_density(assembly.model, ts, pts).data).reshape(5, m)
        lap += (rho * _D2_WEIGHTS[:, None]).sum(0) / (h * h)
    return lap


def continuity_residual(assembly, points):
    """|d_t rho + div j| per point; points is (t array (m,), X array (m, D)).

    Returns a dict with the residual, the |d_t rho| reference scale used in
    tolerances, and both raw terms.
    """
    t, X = points
    t = np.asarray(t, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    dt_rho = _dt_density(assembly, t, X)
    div_j = _div_field(lambda ts, xs: cons.flux(assembly, ts, xs).data, t, X)
    res = np.abs(dt_rho + div_j)
    return {"residual": res, "dt_rho": dt_rho, "div_j": div_j,
            "scale": 1.0 + np.abs(dt_rho)}


def fokker_planck_residual(assembly, points):
    """|d_t rho + div(u rho) - (g^2/2) lap rho| per point (diffusion form)."""
    t, X = points
    t = np.asarray(t, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    dt_rho = _dt_density(assembly, t, X)

    def u_rho(ts, xs):
        u = cons.velocity(assembly, ts, xs).data
        rho = np.exp(dm.log_density(assembly.model, ts, xs).data)
        return u * rho[:, None]

    div = _div_field(u_rho, t, X)
    g = assembly.g(t)
    lap = _laplacian_density(assembly, t, X) if np.any(g > 0) else 0.0
    res = np.abs(dt_rho + div - 0.5 * g * g * lap)
    return {"residual": res, "dt_rho": dt_rho, "scale": 1.0 + np.abs(dt_rho)}


def divergence_of_b(model, t, X):
    return _div_field(lambda ts, xs: cons.b_field(model, ts, xs).data, t, X)


def divergence_of_v(vnet, t, X):
    return _div_field(lambda ts, xs: cons.v_field(vnet, ts, xs).data, t, X)


def farfield_probe(assembly, t, directions, radii, base=None):
    """Max |flux coordinate| along rays, for the raw -d/dt a term and for the
    corrected flux -d/dt a + b.  Reproduces the leakage-vs-cancellation
    contrast far outside the support."""
    directions = np.asarray(directions, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(np.diff(radii) <= 0):
        raise ConfigError("radii must be increasing")
    k, D = directions.shape
    base = np.zeros(D) if base is None else np.asarray(base, dtype=np.float64)
    pts = (base[None, None, :] + radii[None, :, None] * directions[:, None, :])
    pts = pts.reshape(-1, D)
    ts = np.full(pts.shape[0], float(t))
    neg_dta, b = cons.spurious_flux_components(assembly.model, ts, pts)
    spurious = np.abs(neg_dta.data).max(axis=1).reshape(k, radii.size)
    corrected = np.abs(neg_dta.data + b.data).max(axis=1).reshape(k, radii.size)
    return {
        "radii": radii,
        "spurious": spurious.max(axis=0),
        "corrected": corrected.max(axis=0),
        "spurious_by_direction": spurious,
        "corrected_by_direction": corrected,
    }


def nll_eval(model, snapshots):
    """Mean negative log density per snapshot and overall."""
    if not snapshots:
        raise ConfigError("empty test set")
    per = []
    total, count = 0.0, 0
    for t_i, X in snapshots:
        X = np.asarray(X, dtype=np.float64)
        if X.size == 0:
            raise ConfigError(f"empty snapshot at t={t_i}")
        ld = dm.log_density(model, float(t_i), X).data
        per.append(float(-ld.mean()))
        total += float(-ld.sum())
        count += len(X)
    return {"per_snapshot": per, "overall": total / count}


# ---------------------------------------------------------------------------
# diagnostics bundle

@dataclass
class DiagnosticReport:
    continuity: dict
    divergence_b: dict
    divergence_v: dict
    farfield: dict
    normalization: dict
    tolerances: dict
    passed: bool = dc_field(default=False)

    def to_dict(self):
        def clean(obj):
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, np.ndarray):
                return obj.tolist()
            if isinstance(obj, (np.floating, np.integer)):
                return float(obj)
            if isinstance(obj, (np.bool_,)):
                return bool(obj)
            return obj

        return clean({
            "continuity": self.continuity,
            "divergence_b": self.divergence_b,
            "divergence_v": self.divergence_v,
            "farfield": self.farfield,
            "normalization": self.normalization,
            "tolerances": self.tolerances,
            "passed": self.passed,
        })


def _stats(values):
    values = np.asarray(values)
    return {"max": float(values.max()), "mean": float(values.mean()),
            "q95": float(np.quantile(values, 0.95))}


def sample_probe_points(assembly, n_points, rng, spread=1.5):
    """Random (t, x) pairs near the support: model samples with a mild
    multiplicative spread so tails are exercised too."""
    t = rng.uniform(0.05, 0.95, size=n_points)
    X = np.empty((n_points, assembly.model.dim))
    for i in range(n_points):
        X[i] = dm.sample(assembly.model, float(t[i]), 1, rng)[0]
    X = X * rng.uniform(1.0, spread, size=X.shape)
    return t, X


def quadrature_mass(model, t, n_grid=320, pad_widths=14.0, rng=None):
    """Trapezoid integral of the density over a covering grid (D <= 2).

    Bounds come from model samples at several times plus a tail pad in units
    of the narrowest mixture scale seen at those points.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    D = model.dim
    pts = np.concatenate(
        [dm.sample(model, tp, 128, rng) for tp in (0.0, 0.5, 1.0, float(t))], axis=0)
    s_min = np.full(D, np.inf)
    for tp in (0.0, 0.5, 1.0, float(t)):
        views = model.component_views(dm.time_node(tp, 64), dm.Tensor(pts[:64]))
        for v in views:
            s = v.heads.s.data  # (n, D, L)
            for i in range(D):
                s_min[v.ordering[i]] = min(s_min[v.ordering[i]],
                                           float(s[:, i, :].min()))
    lo = pts.min(axis=0) - pad_widths / s_min
    hi = pts.max(axis=0) + pad_widths / s_min
    if D == 1:
        xs = np.linspace(lo[0], hi[0], n_grid)
        ld = dm.log_density(model, t, xs[:, None]).data
        return float(np.exp(ld) @ np.gradient(xs))
    if D == 2:
        xs = np.linspace(lo[0], hi[0], n_grid)
        ys = np.linspace(lo[1], hi[1], n_grid)
        g = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
        ld = dm.log_density(model, t, g).data.reshape(n_grid, n_grid)
        return float(np.exp(ld).dot(np.gradient(ys)).dot(np.gradient(xs)))
    raise ConfigError("quadrature check supports D <= 2")


DEFAULT_TOLERANCES = {
    "continuity": 1e-4,          # relative to 1 + |d_t rho|
    "divergence": 1e-5,          # relative to 1 + max |field|
    "farfield_corrected": 1e-8,
    "normalization": 1e-3,
}


def run_diagnostics(assembly, rng, n_points=100, tolerances=None,
                    farfield_radius=40.0):
    tol = dict(DEFAULT_TOLERANCES)
    if tolerances:
        tol.update(tolerances)
    model = assembly.model
    D = model.dim

    t, X = sample_probe_points(assembly, n_points, rng)
    res = continuity_residual(assembly, (t, X))
    cont_ok = res["residual"] <= tol["continuity"] * res["scale"]
    continuity = {**_stats(res["residual"]), "passed": bool(np.all(cont_ok))}

    div_b = divergence_of_b(model, t, X)
    b_mag = np.abs(cons.b_field(model, t, X).data).max(axis=1)
    b_ok = np.abs(div_b) <= tol["divergence"] * (1.0 + b_mag)
    divergence_b = {**_stats(np.abs(div_b)), "passed": bool(np.all(b_ok))}

    if assembly.vnet is not None and D > 1:
        div_v = divergence_of_v(assembly.vnet, t, X)
        v_mag = np.abs(cons.v_field(assembly.vnet, t, X).data).max(axis=1)
        v_ok = np.abs(div_v) <= tol["divergence"] * (1.0 + v_mag)
        divergence_v = {**_stats(np.abs(div_v)), "passed": bool(np.all(v_ok))}
    else:
        divergence_v = {"max": 0.0, "mean": 0.0, "q95": 0.0, "passed": True}

    dirs = np.concatenate([np.eye(D), -np.eye(D)], axis=0)
    radii = np.linspace(5.0, farfield_radius, 8)
    probe = farfield_probe(assembly, 0.5, dirs, radii)
    tail = probe["corrected"][radii >= 10.0]
    monotone = bool(np.all(np.diff(tail) <= 1e-12 + 0.05 * tail[:-1]))
    ff_passed = bool(probe["corrected"][-1] <= tol["farfield_corrected"]) and monotone
    farfield = {"radii": radii, "spurious": probe["spurious"],
                "corrected": probe["corrected"], "monotone_tail": monotone,
                "passed": ff_passed}

    if D <= 2:
        masses = {str(tt): quadrature_mass(model, tt) for tt in (0.0, 0.3, 0.7, 1.0)}
        n_ok = all(abs(m - 1.0) <= tol["normalization"] for m in masses.values())
        normalization = {"masses": masses, "passed": bool(n_ok)}
    else:
        normalization = {"masses": {}, "passed": True, "note": "skipped for D > 2"}

    report = DiagnosticReport(continuity=continuity, divergence_b=divergence_b,
                              divergence_v=divergence_v, farfield=farfield,
                              normalization=normalization, tolerances=tol)
    report.passed = all([continuity["passed"], divergence_b["passed"],
                         divergence_v["passed"], farfield["passed"],
                         normalization["passed"]])
    return report


# ---------------------------------------------------------------------------
# snapshot-table protocols

def direct_sample_w2(model, t, test_samples, n=512, rng=None):
    """W2 between model samples at t and held-out snapshot samples."""
    rng = rng if rng is not None else np.random.default_rng(0)
    test_samples = np.asarray(test_samples, dtype=np.float64)
    take = min(n, len(test_samples))
    idx = rng.choice(len(test_samples), size=take, replace=False)
    draws = dm.sample(model, float(t), take, rng)
    return wasserstein2(draws, test_samples[idx])


def transported_w2(assembly, t_from, t_to, source_samples, target_samples,
                   n=512, steps=200, rng=None, g=0.0):
    """Push source snapshot samples through the learned dynamics to t_to and
    compare against the target snapshot."""
    rng = rng if rng is not None else np.random.default_rng(0)
    source_samples = np.asarray(source_samples, dtype=np.float64)
    target_samples = np.asarray(target_samples, dtype=np.float64)
    take = min(n, len(source_samples), len(target_samples))
    si = rng.choice(len(source_samples), size=take, replace=False)
    ti = rng.choice(len(target_samples), size=take, replace=False)
    grid = np.linspace(t_from, t_to, steps + 1)
    traj = integrate(assembly, source_samples[si], grid, g=g, rng=rng)
    return wasserstein2(traj.states[:, -1], target_samples[ti])
