"""Flux and velocity fields that conserve probability by construction.

The density is the divergence of a vector field a_t whose last coordinate is
the conditional-CDF/PDF product of the underlying model; the flux is
j_t = -d/dt a_t + b_t (+ v_t), where b_t is a divergence-free chain of
cancellation and compensation terms that removes flux leakage far outside
the support, and v_t is an optional learnable divergence-free field built
from an antisymmetric matrix potential.  The velocity follows from
u = j/rho + (g^2/2) grad log rho.

All products of densities and sigmoid derivatives are carried as sums of
logs; time derivatives enter through tangents of log quantities and are
multiplied back only at assembly time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import density_models as dm
from .autodiff import Mlp, Tensor, concat, exp, mul, reshape, sigmoid, softplus, tsum

LOG_DENSITY_FLOOR = -60.0


@dataclass
class VolatilitySchedule:
    """State-independent volatility g_t >= 0; constant or callable of t."""

    value: object = 0.0

    def __call__(self, t):
        if callable(self.value):
            g = np.asarray(self.value(np.asarray(t, dtype=np.float64)), dtype=np.float64)
        else:
            g = np.broadcast_to(np.float64(self.value), np.asarray(t, dtype=np.float64).shape)
        if np.any(g < 0):
            raise ad.ConfigError("volatility schedule produced a negative value")
        return np.array(g, copy=True)


class AntisymmetricFluxNet:
    """Matrix potential A_t(x); its antisymmetrization generates a
    divergence-free vector field via row divergence."""

    def __init__(self, store, dim, hidden=64, n_layers=2, embed_width=32,
                 activation="tanh", rng=None, name="vnet", out_scale=0.1):
        self.dim = dim
        self.embed_width = embed_width
        self.net = Mlp(store, f"{name}.net", embed_width + dim, dim * dim,
                       hidden=hidden, n_layers=n_layers, activation=activation,
                       rng=rng, out_scale=out_scale)

    def matrix(self, t_node, x_node):
        emb = ad.sinusoidal_embed(t_node, self.embed_width)
        return self.net(concat([emb, x_node], axis=1))


@dataclass
class FluxAssembly:
    """Density model plus flux modifiers: volatility schedule, optional
    learnable divergence-free field, and the cancellation-field switch.

    b_scale != 1 rescales only the first coordinate of b: a uniform rescale
    would stay divergence-free, so the partial one is the ablation that
    actually breaks conservation (negative control for diagnostics).
    """

    model: object
    g: VolatilitySchedule = field(default_factory=VolatilitySchedule)
    vnet: object = None
    use_bt: bool = True
    b_scale: float = 1.0


def _as_x_node(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _time_with_tangent(t, n):
    if isinstance(t, Tensor):
        t = t.data
    return dm.time_node(t, n, tangent=True)


def _plain_time(t, n):
    if isinstance(t, Tensor):
        t = t.data
    return dm.time_node(t, n)


def _with_x_tangent(x_node, direction):
    alias = mul(x_node, 1.0)
    alias.tangent = Tensor(np.broadcast_to(direction, alias.data.shape).copy())
    return alias


class _ViewQuantities:
    """Per-coordinate graph nodes of one component, in model order.

    The mixture algebra runs once on the (n, D, L) stacked head; the
    per-coordinate lists are column slices of the batched results, built
    lazily since the velocity fast path never touches them.
    """

    __slots__ = ("view", "logf_all", "F_all", "logF_all", "x_model", "dim",
                 "_logf", "_F", "_sigma", "_lsp")

    def __init__(self, view, x_node_data):
        D = view.heads.mu.data.shape[1]
        order = list(view.ordering)
        x_model = x_node_data if order == list(range(D)) else x_node_data[:, order]
        self.view = view
        self.x_model = x_model
        self.dim = D
        self.logf_all, self.F_all, self.logF_all = dm.mixture_bundle(
            view.heads, dm._x3(x_model))
        self._logf = None
        self._F = None
        self._sigma = None
        self._lsp = None

    @property
    def logf(self):
        if self._logf is None:
            self._logf = [self.logf_all[:, i] for i in range(self.dim)]
        return self._logf

    @property
    def F(self):
        if self._F is None:
            self._F = [self.F_all[:, i] for i in range(self.dim)]
        return self._F

    @property
    def sigma(self):
        if self._sigma is None:
            if self.view.autoregressive:
                self._sigma = [sigmoid(self.x_model[:, i]) for i in range(self.dim)]
            else:
                self._sigma = self.F
        return self._sigma

    @property
    def log_sig_prime(self):
        if self._lsp is None:
            if self.view.autoregressive:
                lsp_all = -(softplus(self.x_model) + softplus(-self.x_model))
                self._lsp = [lsp_all[:, i] for i in range(self.dim)]
            else:
                self._lsp = self.logf
        return self._lsp

    @property
    def log_cdf_last(self):
        return self.logF_all[:, self.dim - 1]

    def log_rho(self):
        return tsum(self.logf_all, axis=1)

    def prefix_logf(self):
        """prefix[i] = sum_{j<i} log f_j (zero node at i=0)."""
        n = self.logf[0].data.shape[0]
        out = [Tensor(np.zeros(n))]
        for lf in self.logf[:-1]:
            out.append(out[-1] + lf)
        return out

    def suffix_logf(self):
        """suffix[i] = sum_{j>=i} log f_j."""
        out = [None] * self.dim
        out[-1] = self.logf[-1]
        for i in range(self.dim - 2, -1, -1):
            out[i] = self.logf[i] + out[i + 1]
        return out

    def suffix_log_sig_prime(self):
        """suffix[i] = sum_{j>i} log sigma'_j (zero node at the last i)."""
        n = self.logf[0].data.shape[0]
        out = [None] * self.dim
        out[-1] = Tensor(np.zeros(n))
        for i in range(self.dim - 2, -1, -1):
            out[i] = self.log_sig_prime[i + 1] + out[i + 1]
        return out

    def prefix_dt_logf(self):
        """prefix[i] = sum_{j<i} d/dt log f_j, via tangents."""
        n = self.logf[0].data.shape[0]
        out = [Tensor(np.zeros(n))]
        for lf in self.logf[:-1]:
            out.append(out[-1] + ad.tangent_of(lf))
        return out


def _scatter_columns(cols_model, ordering, n):
    """Place per-model-coordinate columns at their data coordinates."""
    D = len(cols_model)
    cols_data = [None] * D
    for i, col in enumerate(cols_model):
        cols_data[ordering[i]] = reshape(col, (-1, 1))
    return concat(cols_data, axis=1)


def _a_view(q):
    """Nonzero only in the last model coordinate: F_D * prod_{j<D} f_j."""
    n = q.logf[0].data.shape[0]
    log_mag = q.log_cdf_last + q.prefix_logf()[-1]
    a_last = exp(log_mag)
    zero = Tensor(np.zeros(n))
    cols = [zero] * (q.dim - 1) + [a_last]
    return cols, a_last


def _b_view(q):
    """Cancellation/compensation chain; divergence-free coordinatewise."""
    D = q.dim
    n = q.logf[0].data.shape[0]
    if D == 1:
        # single coordinate: the CDF construction already has vanishing flux
        # at both ends, so no correction is required (or possible while
        # staying divergence-free)
        return [Tensor(np.zeros(n))]
    prefix = q.prefix_logf()
    suffix_sp = q.suffix_log_sig_prime()
    dt_prefix = q.prefix_dt_logf()
    cols = []
    for i in range(D):
        tF = ad.tangent_of(q.F[i])
        if i == D - 1:
            col = q.sigma[i] * exp(prefix[i]) * dt_prefix[i]
        elif i == 0:
            col = -(exp(suffix_sp[0]) * tF)
        else:
            bracket = (q.sigma[i] - q.F[i]) * dt_prefix[i] - tF
            col = exp(suffix_sp[i] + prefix[i]) * bracket
        cols.append(col)
    return cols


def _u_view(q):
    """Closed-form velocity of one component.

    Autoregressive: u_i = exp(sum_{j>i} log sigma'_j - sum_{j>=i} log f_j)
    * ((sigma_i - F_i) * sum_{j<i} dt log f_j - dt F_i).  Factorized: the
    sigma terms cancel exactly and u_i = -dt F_i / f_i, evaluated
    per-coordinate so u_i depends on x_i alone (diagonal Jacobian).
    """
    D = q.dim
    cols = []
    if not q.view.autoregressive:
        u_all = _u_view_batched(q)
        return [u_all[:, i] for i in range(D)]
    suffix_sp = q.suffix_log_sig_prime()
    suffix_lf = q.suffix_logf()
    dt_prefix = q.prefix_dt_logf()
    for i in range(D):
        tF = ad.tangent_of(q.F[i])
        bracket = (q.sigma[i] - q.F[i]) * dt_prefix[i] - tF
        cols.append(exp(suffix_sp[i] - suffix_lf[i]) * bracket)
    return cols


def _u_view_batched(q):
    """Factorized closed form for all coordinates at once: -dt F / f, (n, D)."""
    return -(ad.tangent_of(q.F_all) * exp(-q.logf_all))


def _component_quantities(model, t, x, tangent=True):
    x_node = _as_x_node(x)
    n = x_node.data.shape[0]
    t_node = _time_with_tangent(t, n) if tangent else _plain_time(t, n)
    views = model.component_views(t_node, x_node)
    return x_node, [ _ViewQuantities(v, x_node) for v in views ]


def _combine_linear(qs, per_view_cols, n):
    """sum_k exp(log_gamma_k) * field^k, scattered to data coordinates."""
    total = None
    for q, cols in zip(qs, per_view_cols):
        w = exp(q.view.log_gamma)
        fld = _scatter_columns([w * c for c in cols], q.view.ordering, n)
        total = fld if total is None else total + fld
    return total


def a_field(model, t, x):
    """Vector field whose divergence is the density."""
    x_node, qs = _component_quantities(model, t, x)
    n = x_node.data.shape[0]
    return _combine_linear(qs, [_a_view(q)[0] for q in qs], n)


def b_field(model, t, x):
    """Divergence-free cancellation field (three-case construction)."""
    x_node, qs = _component_quantities(model, t, x)
    n = x_node.data.shape[0]
    return _combine_linear(qs, [_b_view(q) for q in qs], n)


def v_field(vnet, t, x):
    """Row divergence of the antisymmetrized matrix potential.

    Computed with one spatial tangent pass per coordinate; divergence-free
    by antisymmetry.  A 1x1 antisymmetric matrix vanishes, so D=1 gives 0.
    """
    x_node = _as_x_node(x)
    n, D = x_node.data.shape
    if D == 1:
        return Tensor(np.zeros((n, 1)))
    t_node = _plain_time(t, n)
    cols = [None] * D
    for j in range(D):
        e = np.zeros((1, D))
        e[0, j] = 1.0
        xj = _with_x_tangent(x_node, e)
        A = vnet.matrix(t_node, xj)
        Tj = ad.tangent_of(A)
        for i in range(D):
            term = Tj[:, i * D + j] - Tj[:, j * D + i]
            cols[i] = term if cols[i] is None else cols[i] + term
    return concat([reshape(c, (-1, 1)) for c in cols], axis=1)


def spurious_flux_components(model, t, x):
    """The raw time-derivative term -d/dt a and the correction b, separately."""
    x_node, qs = _component_quantities(model, t, x)
    n = x_node.data.shape[0]
    neg_dta = _combine_linear(
        qs, [[-ad.tangent_of(c) for c in _a_view(q)[0]] for q in qs], n)
    b = _combine_linear(qs, [_b_view(q) for q in qs], n)
    return neg_dta, b


def flux(assembly, t, x):
    """j = -d/dt a + b (+ v when a learnable divergence-free net is set)."""
    neg_dta, b = spurious_flux_components(assembly.model, t, x)
    j = neg_dta
    if assembly.use_bt:
        if assembly.b_scale != 1.0:
            scale = np.ones((1, assembly.model.dim))
            scale[0, 0] = assembly.b_scale
            b = b * scale
        j = j + b
    if assembly.vnet is not None:
        j = j + v_field(assembly.vnet, t, x)
    return j


def log_density(model, t, x):
    return dm.log_density(model, t, x)


def spatial_score(model, t, x):
    """grad_x log rho.  Analytic (and parameter-differentiable) when every
    component is coordinatewise; otherwise one reverse pass per call,
    returned as constants."""
    x_node, qs = _component_quantities(model, t, x, tangent=False)
    n, D = x_node.data.shape
    if all(not q.view.autoregressive for q in qs):
        log_rho_ks = [q.log_rho() + q.view.log_gamma for q in qs]
        if len(qs) == 1:
            log_rho = log_rho_ks[0]
        else:
            log_rho = ad.logsumexp(
                concat([reshape(c, (-1, 1)) for c in log_rho_ks], axis=1), axis=1)
        total = None
        for q, lrk in zip(qs, log_rho_ks):
            w = reshape(exp(lrk - log_rho), (-1, 1))
            scores = dm.mixture_score(q.view.heads, dm._x3(q.x_model))
            cols = [(w * scores)[:, i] for i in range(D)]
            fld = _scatter_columns(cols, q.view.ordering, n)
            total = fld if total is None else total + fld
        return total
    leaf = Tensor(np.asarray(ad._raw(x), dtype=np.float64), requires_grad=True)
    ld = dm.log_density(model, t if not isinstance(t, Tensor) else t.data, leaf)
    ad.backward(tsum(ld), targets=[leaf])
    return Tensor(leaf.grad)


def velocity(assembly, t, x, return_flags=False):
    """Transport velocity u = j/rho + (g^2/2) grad log rho, assembled from
    per-component closed forms and posterior weights.

    Points with log rho below the far-field floor are flagged; the ratio is
    still returned (computed in log space), but it is diagnostic-only there.
    """
    model = assembly.model
    x_node, qs = _component_quantities(model, t, x)
    n, D = x_node.data.shape
    log_rho_ks = [q.log_rho() + q.view.log_gamma for q in qs]
    if len(qs) == 1:
        log_rho = log_rho_ks[0]
    else:
        log_rho = ad.logsumexp(
            concat([reshape(c, (-1, 1)) for c in log_rho_ks], axis=1), axis=1)
    u = None
    for q, lrk in zip(qs, log_rho_ks):
        w = exp(lrk - log_rho)
        if not q.view.autoregressive and list(q.view.ordering) == list(range(D)):
            fld = reshape(w, (-1, 1)) * _u_view_batched(q)
        else:
            cols = [w * c for c in _u_view(q)]
            fld = _scatter_columns(cols, q.view.ordering, n)
        u = fld if u is None else u + fld
    if assembly.vnet is not None:
        inv_rho = exp(-ad.maximum(log_rho, -700.0))
        u = u + v_field(assembly.vnet, t, x_node) * reshape(inv_rho, (-1, 1))
    tv = t.data if isinstance(t, Tensor) else t
    g = assembly.g(np.broadcast_to(np.asarray(tv, dtype=np.float64), (n,)))
    if np.any(g > 0):
        score = spatial_score(model, t, x)
        u = u + score * (0.5 * g * g)[:, None]
    flags = log_rho.data < LOG_DENSITY_FLOOR
    if return_flags:
        return u, flags
    return u


def velocity_generic(assembly, t, x):
    """Reference route: assemble j explicitly and divide by the density."""
    j = flux(assembly, t, x)
    log_rho = dm.log_density(assembly.model, t if not isinstance(t, Tensor) else t.data, x)
    inv_rho = exp(-ad.maximum(log_rho, -700.0))
    u = j * reshape(inv_rho, (-1, 1))
    n = j.data.shape[0]
    tv = t.data if isinstance(t, Tensor) else t
    g = assembly.g(np.broadcast_to(np.asarray(tv, dtype=np.float64), (n,)))
    if np.any(g > 0):
        u = u + spatial_score(assembly.model, t, x) * (0.5 * g * g)[:, None]
    return u


def velocity_factorized_closed_form(model, t, x):
    """-dt F_i / f_i per coordinate, defined for coordinatewise components."""
    x_node, qs = _component_quantities(model, t, x)
    for q in qs:
        if q.view.autoregressive:
            raise ad.ConfigError("closed form requires a factorized component")
    n = x_node.data.shape[0]
    if len(qs) == 1:
        q = qs[0]
        cols = []
        for i in range(q.dim):
            tF = ad.tangent_of(q.F[i])
            cols.append(-(tF * exp(-q.logf[i])))
        return _scatter_columns(cols, q.view.ordering, n)
    raise ad.ConfigError("closed form applies to single components; mixtures "
                         "combine componentwise in velocity()")
