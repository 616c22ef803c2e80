"""Training objectives, all simulation-free: cross-entropy density fitting,
kinetic-regularized snapshot transport, mean-field obstacle control, and the
optional Jacobian-symmetry penalty.

Expectations over the model path use reparameterized inverse-CDF samples
(fixed uniform noise per step), so every term is differentiable in the
parameters.  Time integrals use stratified Monte Carlo.  Nothing in this
module may touch the trajectory integrator.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import conservation as cons
from . import density_models as dm
from .autodiff import ConfigError, Tensor, tmean, tsum

DEFAULT_STRATA = 16


@dataclass
class ObjectiveReport:
    """Per-step loss decomposition; total must equal the weighted term sum."""

    total: float
    terms: dict
    weights: dict
    n_samples: int
    wall_time: float = 0.0

    def check(self, tol=1e-10):
        recon = sum(self.weights.get(k, 1.0) * v for k, v in self.terms.items())
        if abs(recon - self.total) > tol:
            raise AssertionError(
                f"report decomposition off by {abs(recon - self.total):.3e}")
        return True

    def row(self):
        out = {"total": self.total, "n_samples": self.n_samples}
        out.update({f"term_{k}": v for k, v in self.terms.items()})
        return out


def _report(total_node, terms, weights, n, t0):
    rep = ObjectiveReport(total=float(total_node.data), terms=terms,
                          weights=weights, n_samples=n,
                          wall_time=time.perf_counter() - t0)
    rep.check()
    return rep


def loss_gm(model, t_batch, x_batch):
    """Cross entropy: mean of -log rho_t(x) over observed (t, x) pairs."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.size == 0:
        raise ConfigError("empty batch")
    t0 = time.perf_counter()
    ld = dm.log_density(model, t_batch, x_batch)
    bad = np.nonzero(~np.isfinite(ld.data))[0]
    if bad.size:
        raise ValueError(f"non-finite log density at batch row {bad[0]}")
    loss = -tmean(ld)
    rep = _report(loss, {"nll": float(loss.data)}, {"nll": 1.0}, len(x_batch), t0)
    return loss, rep


def stratified_times(t_lo, t_hi, n, rng, strata=DEFAULT_STRATA, deterministic=False):
    """Stratified draws of t over [t_lo, t_hi]; deterministic=midpoints."""
    k = np.arange(n) % strata
    u = np.full(n, 0.5) if deterministic else rng.random(n)
    return t_lo + (t_hi - t_lo) * (k + u) / strata


def kinetic_energy(assembly, t_range=(0.0, 1.0), n_mc=256, rng=None,
                   strata=DEFAULT_STRATA, deterministic=False):
    """Monte Carlo estimate of the path kinetic energy
    int E_{x~rho_t} |u_t(x)|^2 dt, with x drawn by reparameterized
    inverse-CDF sampling (never by integrating the dynamics)."""
    if n_mc < 1:
        raise ConfigError(f"n_mc must be >= 1, got {n_mc}")
    rng = rng if rng is not None else np.random.default_rng(0)
    t_lo, t_hi = float(t_range[0]), float(t_range[1])
    t = stratified_times(t_lo, t_hi, n_mc, rng, strata, deterministic)
    x = dm.sample_reparam(assembly.model, t, n_mc, rng)
    u = cons.velocity(assembly, t, x)
    return tmean(tsum(u * u, axis=1)) * (t_hi - t_lo)


def loss_ot(assembly, snapshot_batches, kinetic_weight=0.1, n_mc=256, rng=None):
    """Snapshot NLL sum plus kinetic-energy regularization over the span."""
    if len(snapshot_batches) < 2:
        raise ConfigError("need at least 2 snapshots")
    t0 = time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng(0)
    nll_total = None
    count = 0
    for t_i, X in snapshot_batches:
        part, _ = loss_gm(assembly.model, float(t_i), X)
        nll_total = part if nll_total is None else nll_total + part
        count += len(X)
    times = [float(t_i) for t_i, _ in snapshot_batches]
    terms = {"nll": float(nll_total.data)}
    weights = {"nll": 1.0, "kinetic": kinetic_weight}
    total = nll_total
    if kinetic_weight > 0:
        ke = kinetic_energy(assembly, (min(times), max(times)), n_mc, rng)
        terms["kinetic"] = float(ke.data)
        total = total + ke * kinetic_weight
    else:
        terms["kinetic"] = 0.0
    rep = _report(total, terms, weights, count + (n_mc if kinetic_weight > 0 else 0), t0)
    return total, rep


SOC_ALL_TERMS = ("endpoints", "control", "running")


def loss_soc(assembly, env, q0_batch, q1_batch, n_mc=256, rng=None,
             terms=SOC_ALL_TERMS):
    """Mean-field control objective: endpoint NLLs, a quadratic control cost
    against the base drift, and a running cost of obstacle penetration plus
    an entropy mean-field term, all over direct model samples."""
    q0_batch = np.asarray(q0_batch, dtype=np.float64)
    q1_batch = np.asarray(q1_batch, dtype=np.float64)
    if q0_batch.size == 0 or q1_batch.size == 0:
        raise ConfigError("empty endpoint sample batch")
    t0 = time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng(0)
    vals = {}
    weights = {}
    total = None
    n_used = 0

    def accumulate(node, name, weight=1.0):
        nonlocal total
        vals[name] = float(node.data)
        weights[name] = weight
        part = node if weight == 1.0 else node * weight
        total = part if total is None else total + part

    if "endpoints" in terms:
        nll0, _ = loss_gm(assembly.model, 0.0, q0_batch)
        nll1, _ = loss_gm(assembly.model, 1.0, q1_batch)
        accumulate(nll0, "endpoint_nll_0")
        accumulate(nll1, "endpoint_nll_1")
        n_used += len(q0_batch) + len(q1_batch)

    needs_path = ("control" in terms) or ("running" in terms)
    if needs_path:
        t = stratified_times(0.0, 1.0, n_mc, rng)
        x = dm.sample_reparam(assembly.model, t, n_mc, rng)
        n_used += n_mc

    if "control" in terms:
        u = cons.velocity(assembly, t, x)
        if env.base_drift is not None:
            u = u - Tensor(np.asarray(env.base_drift(t, x.data), dtype=np.float64))
        control = tmean(tsum(u * u, axis=1)) * (0.5 / env.sigma_t ** 2)
        accumulate(control, "control")

    if "running" in terms:
        if env.obstacles:
            pens = []
            for c, r in env.obstacles:
                d2 = tsum((x - np.asarray(c, dtype=np.float64)[None, :]) ** 2, axis=1)
                pens.append(ad.softplus(r * r - d2))
            pen = pens[0]
            for p in pens[1:]:
                pen = pen + p
            accumulate(tmean(pen), "obstacle", env.obstacle_weight)
        else:
            vals["obstacle"] = 0.0
            weights["obstacle"] = env.obstacle_weight
        if env.eta != 0.0:
            ld = dm.log_density(assembly.model, t, x)
            accumulate(tmean(ld), "entropy", env.eta)
        else:
            vals["entropy"] = 0.0
            weights["entropy"] = env.eta

    rep = _report(total, vals, weights, n_used, t0)
    return total, rep


def loss_jac_sym(field, t, samples, rng=None, n_probes=1, fd_eps=1e-3):
    """Stochastic estimate of E |J - J^T|_F^2 for the spatial Jacobian of a
    velocity field, from Gaussian probes.

    Per probe v the products Jv and J(Jv) come from central differences of
    the field (two evaluations each), giving the unbiased combination
    2(|Jv|^2 - <v, J(Jv)>).  Exact for linear fields; differentiable in the
    field parameters.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ConfigError("empty sample batch")
    rng = rng if rng is not None else np.random.default_rng(0)
    if isinstance(field, cons.FluxAssembly):
        assembly = field

        def eval_field(x_node):
            return cons.velocity(assembly, t, x_node)
    else:
        eval_field = field

    m, D = samples.shape
    base = Tensor(samples)
    est = None
    for _ in range(n_probes):
        v = rng.standard_normal((m, D))
        w = (eval_field(Tensor(samples + fd_eps * v))
             - eval_field(Tensor(samples - fd_eps * v))) * (0.5 / fd_eps)
        w.tangent = None  # time tangents from the field must not leak into x
        # the second probe direction is itself parameter-dependent, so the
        # perturbed points stay in the graph
        jw = (eval_field(base + w * fd_eps)
              - eval_field(base - w * fd_eps)) * (0.5 / fd_eps)
        per_row = 2.0 * (tsum(w * w, axis=1) - tsum(Tensor(v) * jw, axis=1))
        term = tmean(per_row)
        est = term if est is None else est + term
    return est * (1.0 / n_probes)


@dataclass
class SocStage:
    terms: tuple
    steps: int


def staged_soc_schedule(config=None):
    """Term introduction schedule: endpoints, then control, then running."""
    config = config or {}
    if config.get("single_stage"):
        total = int(config.get("total_steps", 22000))
        return [SocStage(SOC_ALL_TERMS, total)]
    budgets = config.get("stage_steps", [1000, 1000, 20000])
    masks = [("endpoints",), ("endpoints", "control"), SOC_ALL_TERMS]
    stages = []
    for terms, steps in zip(masks, budgets):
        steps = int(steps)
        if steps < 0:
            raise ConfigError(f"negative stage budget: {steps}")
        if steps == 0:
            warnings.warn(f"skipping zero-budget stage {terms}")
            continue
        stages.append(SocStage(terms, steps))
    return stages
