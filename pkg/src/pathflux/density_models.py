"""Mixture-of-logistics probability paths.

Every model exposes, per coordinate, a conditional CDF
F(x_i | x_{<i}, t) = sum_l alpha_l sigmoid(s_l (x_i - mu_l)) whose parameters
are differentiable functions of t (factorized) or of (t, x_{<i})
(autoregressive, via a masked network).  Densities multiply across
coordinates; mixtures of such models combine on the simplex.

Head parameters are kept stacked as (n, B, L) tensors (B = components x
coordinates) so the mixture algebra runs batched; per-coordinate slices are
taken only where the flux assembly needs individual conditionals.  All log
quantities live in log space, and time derivatives arrive through forward
tangents on the t input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import (ConfigError, MaskedMlp, Mlp, Tensor, concat, exp,
                       logsumexp, reshape, sigmoid, sinusoidal_embed,
                       softplus, tsum)

S_FLOOR = 1e-4


class MixtureHead:
    """Logistic mixture parameters as graph nodes of shape (..., L).

    The leading axes are free: (n, L) for a single conditional, (n, D, L)
    for all coordinates of a component stacked together.
    """

    __slots__ = ("log_alpha", "alpha", "mu", "s", "log_s")

    def __init__(self, log_alpha, mu, s, alpha=None, log_s=None):
        self.log_alpha = log_alpha
        self.alpha = exp(log_alpha) if alpha is None else alpha
        self.mu = mu
        self.s = s
        self.log_s = ad.log(s) if log_s is None else log_s

    @property
    def n_logistics(self):
        return self.log_alpha.data.shape[-1]

    def slice(self, idx):
        """Sub-head along the middle axis; idx may be an int or a fancy
        (rows, cols) gather."""
        if isinstance(idx, int):
            key = (slice(None), idx)
        else:
            key = idx
        return MixtureHead(self.log_alpha[key], self.mu[key], self.s[key],
                           alpha=self.alpha[key], log_s=self.log_s[key])

    def numeric(self, idx=None):
        """Raw (log_alpha, mu, s) arrays, optionally gathered along axis 1."""
        la, mu, s = self.log_alpha.data, self.mu.data, self.s.data
        if idx is not None:
            la, mu, s = la[idx], mu[idx], s[idx]
        return la, mu, s


def head_from_raw(block, n_logistics, batch_dims=1):
    """Split a (..., 3L) net output block into a constrained MixtureHead."""
    L = n_logistics
    sl = (slice(None),) * batch_dims
    logits = block[sl + (slice(0, L),)]
    mu = block[sl + (slice(L, 2 * L),)]
    s_raw = block[sl + (slice(2 * L, 3 * L),)]
    log_alpha = logits - logsumexp(logits, axis=-1, keepdims=True)
    s = softplus(s_raw) + S_FLOOR
    return MixtureHead(log_alpha, mu, s)


def mixture_z(head, xi):
    return (xi - head.mu) * head.s


def mixture_cdf(head, xi):
    """F(x) = sum_l alpha_l sigmoid(z_l); strictly increasing, limits 0/1."""
    if not np.all(np.isfinite(ad._raw(xi))):
        raise ValueError("mixture CDF evaluated at non-finite input")
    return tsum(head.alpha * sigmoid(mixture_z(head, xi)), axis=-1)


def mixture_log_cdf(head, xi):
    z = mixture_z(head, xi)
    return logsumexp(head.log_alpha - softplus(-z), axis=-1)


def mixture_logpdf(head, xi):
    """log f via log-sum-exp; f_l = alpha_l s_l sigmoid(z)sigmoid(-z)."""
    if not np.all(np.isfinite(ad._raw(xi))):
        raise ValueError("mixture log-pdf evaluated at non-finite input")
    z = mixture_z(head, xi)
    return logsumexp(head.log_alpha + head.log_s - softplus(z) - softplus(-z),
                     axis=-1)


def mixture_score(head, xi):
    """d/dx log f(x), analytic posterior-weighted form."""
    z = mixture_z(head, xi)
    comp = head.log_alpha + head.log_s - softplus(z) - softplus(-z)
    w = exp(comp - logsumexp(comp, axis=-1, keepdims=True))
    return tsum(w * head.s * (1.0 - 2.0 * sigmoid(z)), axis=-1)


def mixture_bundle(head, xi):
    """(log f, F, log F) sharing one z evaluation; used by the flux assembly
    where all three are needed per coordinate."""
    if not np.all(np.isfinite(ad._raw(xi))):
        raise ValueError("mixture bundle evaluated at non-finite input")
    z = mixture_z(head, xi)
    sp_neg = softplus(-z)
    logf = logsumexp(head.log_alpha + head.log_s - softplus(z) - sp_neg, axis=-1)
    F = tsum(head.alpha * sigmoid(z), axis=-1)
    logF = logsumexp(head.log_alpha - sp_neg, axis=-1)
    return logf, F, logF


# spec'd operation names; identical math with argument order (xi, head)
def logistic_mixture_cdf(xi, head):
    return mixture_cdf(head, xi)


def logistic_mixture_logpdf(xi, head):
    return mixture_logpdf(head, xi)


def time_node(t, n, tangent=False):
    """A (n, 1) time column; optionally seeded with a unit tangent."""
    arr = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
    return ad.seed_tangent(arr) if tangent else Tensor(arr.copy())


def _x3(x_model):
    """(n, D) -> (n, D, 1) so coordinates broadcast against (n, D, L) heads."""
    n, D = x_model.data.shape
    return reshape(x_model, (n, D, 1))


@dataclass
class ComponentView:
    """One simple (non-mixture) component of a probability path.

    heads stacks all D coordinate conditionals as an (n, D, L) MixtureHead in
    the component's own coordinate order; ordering maps model coordinate i to
    the data coordinate it describes.
    """

    log_gamma: Tensor
    heads: MixtureHead
    autoregressive: bool
    ordering: tuple

    def head(self, i):
        return self.heads.slice(i)


def _identity_order(dim):
    return tuple(range(dim))


def _ordered_x(x, ordering):
    if list(ordering) == list(range(len(ordering))):
        return x
    return x[:, list(ordering)]


class _ModelBase:
    n_components = 1

    def component_views(self, t_node, x):
        raise NotImplementedError

    def log_density_node(self, t_node, x):
        views = self.component_views(t_node, x)
        per_comp = []
        for view in views:
            xo = _ordered_x(x, view.ordering)
            logf = mixture_logpdf(view.heads, _x3(xo))
            per_comp.append(tsum(logf, axis=1) + view.log_gamma)
        if len(per_comp) == 1:
            return per_comp[0]
        stacked = concat([reshape(c, (-1, 1)) for c in per_comp], axis=1)
        return logsumexp(stacked, axis=1)


class FactorizedModel(_ModelBase):
    """Coordinatewise model with t-only heads; K > 1 gives a mixture of
    factorized components sharing one trunk network."""

    kind = "factorized"

    def __init__(self, store, dim, n_logistics=16, n_components=1, hidden=256,
                 n_layers=4, embed_width=128, activation="tanh", rng=None,
                 name="density", mu_spread=1.0, learn_weights=True, out_scale=0.1):
        if dim < 1:
            raise ConfigError(f"dim must be >= 1, got {dim}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.n_logistics = n_logistics
        self.n_components = n_components
        self.embed_width = embed_width
        L, K = n_logistics, n_components
        out_bias = np.zeros(K * dim * 3 * L)
        for k in range(K):
            for i in range(dim):
                off = (k * dim + i) * 3 * L
                out_bias[off + L: off + 2 * L] = rng.standard_normal(L) * mu_spread
        self.net = Mlp(store, f"{name}.net", embed_width, K * dim * 3 * L,
                       hidden=hidden, n_layers=n_layers, activation=activation,
                       rng=rng, out_scale=out_scale, out_bias=out_bias)
        self.learn_weights = learn_weights and K > 1
        if self.learn_weights:
            self.gamma_logits = store.create(f"{name}.gamma", np.zeros(K))
        else:
            self.gamma_logits = None

    def log_gammas(self):
        K = self.n_components
        if self.gamma_logits is not None:
            lg = self.gamma_logits - logsumexp(self.gamma_logits, axis=0,
                                               keepdims=True)
            return [lg[k] for k in range(K)]
        return [Tensor(-np.log(K)) for _ in range(K)]

    def batched_heads(self, t_node):
        """All (component, coordinate) conditionals as an (n, K*D, L) head."""
        raw = self.net(sinusoidal_embed(t_node, self.embed_width))
        n = raw.data.shape[0]
        block = reshape(raw, (n, self.n_components * self.dim, 3 * self.n_logistics))
        return head_from_raw(block, self.n_logistics, batch_dims=2)

    def component_views(self, t_node, x=None):
        D, K = self.dim, self.n_components
        bh = self.batched_heads(t_node)
        order = _identity_order(D)
        if K == 1:
            return [ComponentView(Tensor(0.0), bh, False, order)]
        views = []
        for k, lg in enumerate(self.log_gammas()):
            sub = bh.slice((slice(None), slice(k * D, (k + 1) * D)))
            views.append(ComponentView(lg, sub, False, order))
        return views

    def log_density_node(self, t_node, x):
        bh = self.batched_heads(t_node)
        n, (D, K) = x.data.shape[0], (self.dim, self.n_components)
        x_rep = concat([x] * K, axis=1) if K > 1 else x
        logf = mixture_logpdf(bh, reshape(x_rep, (n, K * D, 1)))
        if K == 1:
            return tsum(logf, axis=1)
        per_comp = tsum(reshape(logf, (n, K, D)), axis=2)
        lg = concat([reshape(g, (1, 1)) for g in self.log_gammas()], axis=1)
        return logsumexp(per_comp + lg, axis=1)

    def _component_choice(self, n, rng):
        if self.n_components == 1:
            return np.zeros(n, dtype=np.int64)
        return _choose_components([float(g.data) for g in self.log_gammas()],
                                  n, rng)

    def sample(self, t, n, rng):
        bh = self.batched_heads(time_node(t, n))
        comp = self._component_choice(n, rng)
        u = rng.random((n, self.dim))
        out = np.empty((n, self.dim))
        rows = np.arange(n)
        for i in range(self.dim):
            la, mu, s = bh.numeric((rows, comp * self.dim + i))
            out[:, i] = _bisect_inverse_cdf(la, mu, s, u[:, i])
        return out

    def sample_reparam(self, t, n, rng):
        bh = self.batched_heads(time_node(t, n))
        comp = self._component_choice(n, rng)
        u = rng.random((n, self.dim))
        rows = np.arange(n)
        cols = []
        for i in range(self.dim):
            idx = comp * self.dim + i
            la, mu, s = bh.numeric((rows, idx))
            xi_star = _bisect_inverse_cdf(la, mu, s, u[:, i])
            head = bh.slice(i) if self.n_components == 1 else bh.slice((rows, idx))
            cols.append(reshape(_newton_refine(head, xi_star, u[:, i]), (-1, 1)))
        return concat(cols, axis=1)


class AutoregressiveModel(_ModelBase):
    """Masked-network conditionals: head i sees x_{<i} and the time features."""

    kind = "autoregressive"

    def __init__(self, store, dim, n_logistics=16, hidden=256, n_layers=4,
                 embed_width=128, activation="tanh", rng=None, name="density",
                 mu_spread=1.0, ordering=None, out_scale=0.1):
        if dim < 1:
            raise ConfigError(f"dim must be >= 1, got {dim}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.n_logistics = n_logistics
        self.embed_width = embed_width
        if ordering is None:
            ordering = _identity_order(dim)
        if sorted(ordering) != list(range(dim)):
            raise ConfigError(f"ordering must be a permutation of 0..{dim-1}")
        self.ordering = tuple(int(i) for i in ordering)
        L = n_logistics
        out_bias = np.zeros(dim * 3 * L)
        for i in range(dim):
            off = i * 3 * L
            out_bias[off + L: off + 2 * L] = rng.standard_normal(L) * mu_spread
        self.net = MaskedMlp(store, f"{name}.made", dim, embed_width, 3 * L,
                             hidden=hidden, n_layers=n_layers, activation=activation,
                             rng=rng, out_scale=out_scale, out_bias=out_bias)

    def _heads(self, t_node, x_model):
        raw = self.net(x_model, sinusoidal_embed(t_node, self.embed_width))
        n = raw.data.shape[0]
        block = reshape(raw, (n, self.dim, 3 * self.n_logistics))
        return head_from_raw(block, self.n_logistics, batch_dims=2)

    def component_views(self, t_node, x):
        if x is None:
            raise ConfigError("autoregressive model requires x to evaluate heads")
        if ad._raw(x).shape[1] != self.dim:
            raise ConfigError(
                f"dimension mismatch: model dim {self.dim}, x has {ad._raw(x).shape[1]}")
        xn = x if isinstance(x, Tensor) else Tensor(x)
        x_model = _ordered_x(xn, self.ordering)
        return [ComponentView(Tensor(0.0), self._heads(t_node, x_model), True,
                              self.ordering)]

    def log_density_node(self, t_node, x):
        view = self.component_views(t_node, x)[0]
        xo = _ordered_x(x, view.ordering)
        return tsum(mixture_logpdf(view.heads, _x3(xo)), axis=1)

    def sample(self, t, n, rng):
        t_node = time_node(t, n)
        u = rng.random((n, self.dim))
        x_model = np.zeros((n, self.dim))
        for i in range(self.dim):
            bh = self._heads(t_node, Tensor(x_model))
            la, mu, s = bh.numeric((slice(None), i))
            x_model[:, i] = _bisect_inverse_cdf(la, mu, s, u[:, i])
        out = np.empty_like(x_model)
        out[:, list(self.ordering)] = x_model
        return out

    def sample_reparam(self, t, n, rng):
        t_node = time_node(t, n)
        u = rng.random((n, self.dim))
        cols = []
        for i in range(self.dim):
            filled = cols + [Tensor(np.zeros((n, 1)))] * (self.dim - i)
            bh = self._heads(t_node, concat(filled, axis=1))
            la, mu, s = bh.numeric((slice(None), i))
            xi_star = _bisect_inverse_cdf(la, mu, s, u[:, i])
            cols.append(reshape(_newton_refine(bh.slice(i), xi_star, u[:, i]),
                                (-1, 1)))
        x_model = concat(cols, axis=1)
        if self.ordering == _identity_order(self.dim):
            return x_model
        inverse = np.argsort(self.ordering)
        return x_model[:, list(inverse)]


class TranslatingFactorizedModel(_ModelBase):
    """Factorized mixture whose means translate linearly in time.

    mu_l(t) = mu0_l + v_i t per coordinate; alpha and s are constant in t.
    An exactly solvable path: every coordinate moves at velocity v_i, so the
    generated velocity field is the constant vector v.
    """

    kind = "translating"

    def __init__(self, store, dim, n_logistics=1, mu0=None, velocity=None,
                 s_raw=None, alpha_logits=None, rng=None, name="density"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.n_logistics = n_logistics
        L = n_logistics
        mu0 = rng.standard_normal((dim, L)) if mu0 is None else np.asarray(mu0, float)
        velocity = (rng.standard_normal(dim) if velocity is None
                    else np.asarray(velocity, float))
        s_raw = np.zeros((dim, L)) if s_raw is None else np.asarray(s_raw, float)
        alpha_logits = (np.zeros((dim, L)) if alpha_logits is None
                        else np.asarray(alpha_logits, float))
        self.mu0 = store.create(f"{name}.mu0", mu0.reshape(dim, L))
        self.vel = store.create(f"{name}.vel", velocity.reshape(dim))
        self.s_raw = store.create(f"{name}.s_raw", s_raw.reshape(dim, L))
        self.alpha_logits = store.create(f"{name}.alpha", alpha_logits.reshape(dim, L))

    def component_views(self, t_node, x=None):
        n = t_node.data.shape[0]
        L = self.n_logistics
        t3 = reshape(t_node, (n, 1, 1))
        mu = self.mu0 + t3 * reshape(self.vel, (self.dim, 1))
        logits = self.alpha_logits - logsumexp(self.alpha_logits, axis=-1,
                                               keepdims=True)
        zeros = Tensor(np.zeros((n, 1, 1)))
        log_alpha = logits + zeros
        s = softplus(self.s_raw) + S_FLOOR
        s = s + zeros
        heads = MixtureHead(log_alpha, mu, s)
        return [ComponentView(Tensor(0.0), heads, False,
                              _identity_order(self.dim))]

    def sample(self, t, n, rng):
        bh = self.component_views(time_node(t, n))[0].heads
        u = rng.random((n, self.dim))
        out = np.empty((n, self.dim))
        for i in range(self.dim):
            la, mu, s = bh.numeric((slice(None), i))
            out[:, i] = _bisect_inverse_cdf(la, mu, s, u[:, i])
        return out

    def sample_reparam(self, t, n, rng):
        bh = self.component_views(time_node(t, n))[0].heads
        u = rng.random((n, self.dim))
        cols = []
        for i in range(self.dim):
            la, mu, s = bh.numeric((slice(None), i))
            xi_star = _bisect_inverse_cdf(la, mu, s, u[:, i])
            cols.append(reshape(_newton_refine(bh.slice(i), xi_star, u[:, i]),
                                (-1, 1)))
        return concat(cols, axis=1)


class PairMixture(_ModelBase):
    """Mixture of component probability paths with simplex weights.

    Each component supplies its own (density, velocity) pair; the mixture
    combines them with density-posterior weights, which preserves the
    governing transport equation componentwise.
    """

    kind = "pair"

    def __init__(self, components, weights=None, store=None, learn_weights=False,
                 name="pair"):
        if not components:
            raise ConfigError("pair mixture needs at least one component")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ConfigError(f"components disagree on dimension: {dims}")
        self.dim = dims.pop()
        self.components = list(components)
        K = len(components)
        if weights is None:
            weights = np.full(K, 1.0 / K)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (K,) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ConfigError("weights must lie on the simplex")
        if learn_weights:
            if store is None:
                raise ConfigError("learned mixture weights need a parameter store")
            self.gamma_logits = store.create(f"{name}.gamma",
                                             np.log(weights + 1e-12))
        else:
            self.gamma_logits = None
            self._log_weights = np.log(np.maximum(weights, 1e-300))

    @property
    def n_components(self):
        return len(self.components)

    def log_gammas(self):
        K = len(self.components)
        if self.gamma_logits is not None:
            lg = self.gamma_logits - logsumexp(self.gamma_logits, axis=0,
                                               keepdims=True)
            return [lg[k] for k in range(K)]
        return [Tensor(self._log_weights[k]) for k in range(K)]

    def component_views(self, t_node, x=None):
        views = []
        for lg, comp in zip(self.log_gammas(), self.components):
            for inner in comp.component_views(t_node, x):
                views.append(ComponentView(inner.log_gamma + lg, inner.heads,
                                           inner.autoregressive, inner.ordering))
        return views

    def sample(self, t, n, rng):
        lw = [float(lg.data) for lg in self.log_gammas()]
        comp = _choose_components(lw, n, rng)
        out = np.empty((n, self.dim))
        for k, sub in enumerate(self.components):
            rows = np.nonzero(comp == k)[0]
            if rows.size:
                out[rows] = sub.sample(_t_rows(t, rows), rows.size, rng)
        return out

    def sample_reparam(self, t, n, rng):
        lw = [float(lg.data) for lg in self.log_gammas()]
        comp = _choose_components(lw, n, rng)
        parts, row_order = [], []
        for k, sub in enumerate(self.components):
            rows = np.nonzero(comp == k)[0]
            if rows.size:
                parts.append(sub.sample_reparam(_t_rows(t, rows), rows.size, rng))
                row_order.append(rows)
        stacked = parts[0] if len(parts) == 1 else _vconcat(parts)
        perm = np.concatenate(row_order)
        inverse = np.argsort(perm)
        return stacked[inverse, :]


def _vconcat(parts):
    n_cols = parts[0].data.shape[1]
    flat = concat([reshape(p, (1, -1)) for p in parts], axis=1)
    return reshape(flat, (-1, n_cols))


def _choose_components(log_weights, n, rng):
    w = np.exp(np.asarray(log_weights, dtype=np.float64))
    w = w / w.sum()
    return rng.choice(len(w), size=n, p=w)


def _t_rows(t, rows):
    arr = np.asarray(t, dtype=np.float64)
    return arr[rows] if arr.ndim > 0 else t


# ---------------------------------------------------------------------------
# module-level operations

def log_density(model, t, x):
    """log rho_t(x) for any model; x is (n, D) array or Tensor."""
    xv = ad._raw(x)
    if xv.ndim != 2 or xv.shape[1] != model.dim:
        raise ConfigError(
            f"dimension mismatch: model dim {model.dim}, x shape {xv.shape}")
    t_node = t if isinstance(t, Tensor) else time_node(t, xv.shape[0])
    xn = x if isinstance(x, Tensor) else Tensor(xv)
    return model.log_density_node(t_node, xn)


def sample(model, t, n, rng):
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    return model.sample(t, n, rng)


def sample_reparam(model, t, n, rng):
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    return model.sample_reparam(t, n, rng)


def _single_view(model, t, x):
    xv = ad._raw(x)
    t_node = time_node(t, xv.shape[0], tangent=True)
    views = model.component_views(t_node, x)
    if len(views) != 1:
        raise ConfigError("per-coordinate CDF derivative is defined for "
                          "single-component models only")
    return views[0]


def dt_cdf(model, t, x, i):
    """Forward-mode d/dt of F(x_i | x_{<i}) as a graph node."""
    xv = np.asarray(ad._raw(x), dtype=np.float64)
    view = _single_view(model, t, Tensor(xv))
    xo = xv[:, list(view.ordering)]
    pos = view.ordering.index(i)
    F = mixture_cdf(view.head(pos), Tensor(xo[:, pos:pos + 1]))
    return ad.tangent_of(F)


def dt_pdf(model, t, x, i):
    """Forward-mode d/dt of f(x_i | x_{<i})."""
    xv = np.asarray(ad._raw(x), dtype=np.float64)
    view = _single_view(model, t, Tensor(xv))
    xo = xv[:, list(view.ordering)]
    pos = view.ordering.index(i)
    f = exp(mixture_logpdf(view.head(pos), Tensor(xo[:, pos:pos + 1])))
    return ad.tangent_of(f)


def pair_mixture_density_velocity(densities, velocities, weights):
    """Combine per-component (rho, u) numpy arrays: rho = sum w rho_k,
    u = sum (w rho_k / rho) u_k.  Zero total density falls back to uniform
    component weights."""
    densities = [np.asarray(d, dtype=np.float64) for d in densities]
    velocities = [np.asarray(v, dtype=np.float64) for v in velocities]
    w = np.asarray(weights, dtype=np.float64)
    rho = sum(wk * dk for wk, dk in zip(w, densities))
    K = len(densities)
    u = np.zeros_like(velocities[0])
    for wk, dk, uk in zip(w, densities, velocities):
        frac = np.where(rho > 0.0, wk * dk / np.where(rho > 0.0, rho, 1.0), 1.0 / K)
        u = u + frac[..., None] * uk if uk.ndim > frac.ndim else u + frac * uk
    return rho, u


# ---------------------------------------------------------------------------
# inverse-CDF machinery

def _cdf_np(log_alpha, mu, s, x):
    z = s * (x[:, None] - mu)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return (np.exp(log_alpha) * out).sum(axis=1)


def _bisect_inverse_cdf(log_alpha, mu, s, u, tol=1e-12, max_expand=200):
    """Solve F(x) = u per row by bracketed bisection on the mixture CDF."""
    lo = (mu - 4.0 / s).min(axis=1)
    hi = (mu + 4.0 / s).max(axis=1)
    for _ in range(max_expand):
        bad = _cdf_np(log_alpha, mu, s, lo) > u
        if not bad.any():
            break
        width = np.maximum(hi - lo, 1.0)
        lo = np.where(bad, lo - width, lo)
    else:
        raise RuntimeError("inverse-CDF bracket expansion failed after "
                           f"{max_expand} doublings (lower side)")
    for _ in range(max_expand):
        bad = _cdf_np(log_alpha, mu, s, hi) < u
        if not bad.any():
            break
        width = np.maximum(hi - lo, 1.0)
        hi = np.where(bad, hi + width, hi)
    else:
        raise RuntimeError("inverse-CDF bracket expansion failed after "
                           f"{max_expand} doublings (upper side)")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = _cdf_np(log_alpha, mu, s, mid)
        below = fm < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(np.abs(fm - u)) <= tol:
            break
    return 0.5 * (lo + hi)


def _newton_refine(head, x_star, u):
    """One implicit-function Newton step from the numeric root, as graph ops.

    Value stays at the bisection root (F(x*) = u to tolerance); gradients of
    the output w.r.t. head parameters follow dx = -(dF)/f, the derivative of
    the inverse CDF.  The returned node carries no time tangent.
    """
    xs = Tensor(np.asarray(x_star, dtype=np.float64).reshape(-1, 1))
    F = mixture_cdf(head, xs)
    # floor keeps off-support rows finite when branches are evaluated for all
    # rows and masked afterwards
    f = ad.maximum(exp(mixture_logpdf(head, xs)), 1e-300)
    node = xs[:, 0] - (F - Tensor(u)) / f
    node.tangent = None
    return node


# ---------------------------------------------------------------------------
# config-driven construction

def model_from_config(store, cfg, rng):
    """Build a model from a plain dict (the checkpoint/run config echo)."""
    kind = cfg.get("kind", "factorized")
    common = dict(
        dim=int(cfg.get("dim", 2)),
        n_logistics=int(cfg.get("n_logistics", 16)),
        hidden=int(cfg.get("hidden", 256)),
        n_layers=int(cfg.get("layers", 4)),
        embed_width=int(cfg.get("embed_width", 128)),
        activation=cfg.get("activation", "tanh"),
        mu_spread=float(cfg.get("mu_spread", 1.0)),
    )
    if kind == "factorized":
        return FactorizedModel(store, rng=rng,
                               n_components=int(cfg.get("n_components", 1)),
                               learn_weights=bool(cfg.get("learn_weights", True)),
                               **common)
    if kind == "autoregressive":
        ordering = cfg.get("ordering")
        return AutoregressiveModel(store, rng=rng, ordering=ordering, **common)
    raise ConfigError(f"unknown model kind {kind!r}")
