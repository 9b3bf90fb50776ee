"""Invertible flow layers with exact log-determinants.

Two families over action space R^d:

  radial:  f(z) = z + beta / (alpha + ||z - z0||) * (z - z0)
           log|det J| = (d-1) log(1 + beta*h) + log(1 + beta*h + beta*h'*r)
           with h = 1/(alpha + r), h' = -1/(alpha + r)^2, r = ||z - z0||.
           Invertible whenever beta >= -alpha; enforced exactly by the
           reparameterization alpha = softplus(raw_alpha),
           beta = -alpha + softplus(raw_beta).

  planar:  f(z) = z + u_hat * tanh(w . z + b)
           log|det J| = log|1 + (1 - tanh^2(w . z + b)) * (w . u_hat)|
           with u_hat = u + (m(w.u) - w.u) * w / ||w||^2, m(x) = -1 + softplus(x),
           which forces w . u_hat >= -1 + log 2 > -1.

Each layer exposes a graph path (differentiable through raw parameters and
the input) and a plain numpy path for rollouts and gradient-stopped targets.
Chains compose layers and add up log-determinants along the sampled path.
"""

from __future__ import annotations

import numpy as np

from sacnf.autodiff import (
    ConfigurationError,
    Var,
    affine,
    inv_softplus,
    softplus,
)

_DEGENERATE_W_NORM2 = 1e-24


def _sigmoid(x):
    return np.exp(x - np.logaddexp(0.0, x))


class RadialLayer:
    """Radial contraction/expansion around a learnable center z0.

    raw layout: [z0 (d), raw_alpha, raw_beta].
    """

    family = "radial"

    def __init__(self, dim: int, raw: np.ndarray | None = None):
        if dim < 1:
            raise ConfigurationError("radial layer needs dim >= 1")
        self.dim = dim
        if raw is None:
            raw = np.zeros(self.n_params, dtype=np.float64)
        raw = np.asarray(raw, dtype=np.float64)
        if raw.size != self.n_params:
            raise ConfigurationError(
                f"radial raw size {raw.size}, expected {self.n_params}"
            )
        self.raw = raw

    @property
    def n_params(self) -> int:
        return self.dim + 2

    def init_params(self, rng: np.random.Generator, scale: float = 0.01) -> None:
        # raw = 0 is the exact identity (beta = 0); jitter breaks symmetry
        # between stacked layers while keeping a near-identity start.
        self.raw[:] = scale * rng.standard_normal(self.n_params)

    def constrained(self):
        """(z0, alpha, beta) with beta >= -alpha guaranteed."""
        d = self.dim
        z0 = self.raw[:d].copy()
        alpha = float(softplus(self.raw[d]))
        beta = float(softplus(self.raw[d + 1])) - alpha
        return z0, alpha, beta

    def with_displacement_scale(self, factor: float) -> "RadialLayer":
        """Copy of the layer with its displacement field scaled by factor in [0, 1]."""
        z0, alpha, beta = self.constrained()
        raw = self.raw.copy()
        raw[self.dim + 1] = inv_softplus(alpha + factor * beta)
        return RadialLayer(self.dim, raw)

    def apply_np(self, z: np.ndarray):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.dim:
            raise ConfigurationError(f"radial layer dim {self.dim}, input dim {z.shape[1]}")
        z0, alpha, beta = self.constrained()
        delta = z - z0
        r = np.sqrt(np.sum(delta * delta, axis=1, keepdims=True))
        h = 1.0 / (alpha + r)
        bh = beta * h
        zp = z + bh * delta
        w1 = bh + 1.0
        u1 = w1 - bh * (r * h)
        logdet = (self.dim - 1) * np.log(w1) + np.log(u1)
        return zp, logdet[:, 0]

    def apply(self, z: Var, raw: Var):
        """Graph path; same formulas, differentiable in z and raw."""
        if z.shape[1] != self.dim:
            raise ConfigurationError(f"radial layer dim {self.dim}, input dim {z.shape[1]}")
        d = self.dim
        z0 = raw[:, :d]
        alpha = raw[:, d : d + 1].softplus()
        beta = raw[:, d + 1 : d + 2].softplus() - alpha
        delta = z - z0
        r = delta.square().rowsum().sqrt()
        h = _reciprocal(alpha + r)
        bh = beta * h
        zp = z + bh * delta
        w1 = bh + 1.0
        u1 = w1 - bh * (r * h)
        logdet = w1.log() * float(d - 1) + u1.log()
        return zp, logdet


def _reciprocal(v: Var) -> Var:
    vals = v.values
    with np.errstate(all="ignore"):
        out = 1.0 / vals
        d = -out * out
    return v._unary(out, d)


class PlanarLayer:
    """Rank-one perturbation of the identity, z + u_hat * tanh(w.z + b).

    raw layout: [u (d), w (d), b].  A zero-norm w degenerates the projection;
    the layer then acts as the constrained shift u * tanh(b) with log-det 0.
    """

    family = "planar"

    def __init__(self, dim: int, raw: np.ndarray | None = None):
        if dim < 1:
            raise ConfigurationError("planar layer needs dim >= 1")
        self.dim = dim
        if raw is None:
            raw = np.zeros(self.n_params, dtype=np.float64)
        raw = np.asarray(raw, dtype=np.float64)
        if raw.size != self.n_params:
            raise ConfigurationError(
                f"planar raw size {raw.size}, expected {self.n_params}"
            )
        self.raw = raw

    @property
    def n_params(self) -> int:
        return 2 * self.dim + 1

    def init_params(self, rng: np.random.Generator, scale: float = 0.01) -> None:
        # u = log(e - 1) * w makes u_hat = 0 exactly for a unit w, so the
        # layer starts at the identity up to the jitter.
        d = self.dim
        w = rng.standard_normal(d)
        w /= np.linalg.norm(w)
        self.raw[d : 2 * d] = w
        self.raw[:d] = np.log(np.e - 1.0) * w + scale * rng.standard_normal(d)
        self.raw[2 * d] = scale * rng.standard_normal()

    def constrained(self):
        """(u_hat, w, b) with w . u_hat > -1 guaranteed."""
        d = self.dim
        u = self.raw[:d].copy()
        w = self.raw[d : 2 * d].copy()
        b = float(self.raw[2 * d])
        wn2 = float(w @ w)
        if wn2 < _DEGENERATE_W_NORM2:
            return u, w, b
        wu = float(w @ u)
        m = -1.0 + float(softplus(wu))
        u_hat = u + (m - wu) * w / wn2
        return u_hat, w, b

    def with_displacement_scale(self, factor: float) -> "PlanarLayer":
        """Copy with the displacement field u_hat * tanh(.) scaled by factor."""
        d = self.dim
        u_hat, w, b = self.constrained()
        raw = self.raw.copy()
        wn2 = float(w @ w)
        if wn2 < _DEGENERATE_W_NORM2:
            raw[:d] = factor * u_hat
            return PlanarLayer(d, raw)
        m_old = float(w @ u_hat)
        u_perp = u_hat - m_old * w / wn2
        t_new = inv_softplus(1.0 + factor * m_old)
        raw[:d] = factor * u_perp + t_new * w / wn2
        return PlanarLayer(d, raw)

    def apply_np(self, z: np.ndarray):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.dim:
            raise ConfigurationError(f"planar layer dim {self.dim}, input dim {z.shape[1]}")
        u_hat, w, b = self.constrained()
        pre = z @ w[:, None] + b
        t = np.tanh(pre)
        zp = z + u_hat * t
        wn2 = float(w @ w)
        if wn2 < _DEGENERATE_W_NORM2:
            logdet = np.zeros(z.shape[0])
        else:
            inner = 1.0 + (1.0 - t * t) * float(w @ u_hat)
            logdet = np.log(np.abs(inner))[:, 0]
        return zp, logdet

    def apply(self, z: Var, raw: Var):
        if z.shape[1] != self.dim:
            raise ConfigurationError(f"planar layer dim {self.dim}, input dim {z.shape[1]}")
        d = self.dim
        u = raw[:, :d]
        w = raw[:, d : 2 * d]
        b = raw[:, 2 * d : 2 * d + 1]
        w_vals = w.values.ravel()
        wn2_val = float(w_vals @ w_vals)
        if wn2_val < _DEGENERATE_W_NORM2:
            # degenerate direction: constrained shift, unit Jacobian
            t = (affine(z, w, None) + b).tanh()
            zp = z + u * t
            logdet = t * 0.0
            return zp, logdet
        wu = (w * u).rowsum()
        wn2 = w.square().rowsum()
        m = wu.softplus() - 1.0
        u_hat = u + ((m - wu) / wn2) * w
        pre = affine(z, w, None) + b
        t = pre.tanh()
        zp = z + u_hat * t
        w_uhat = (w * u_hat).rowsum()
        inner = (1.0 - t.square()) * w_uhat + 1.0
        logdet = inner.log()
        return zp, logdet


_FAMILIES = {"radial": RadialLayer, "planar": PlanarLayer}


class FlowChain:
    """Ordered composition of flow layers sharing one dimension."""

    def __init__(self, layers):
        layers = list(layers)
        dims = {l.dim for l in layers}
        if len(dims) > 1:
            raise ConfigurationError(f"chain layers disagree on dimension: {sorted(dims)}")
        self.layers = layers

    def __len__(self):
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    def init_params(self, rng: np.random.Generator, scale: float = 0.01) -> None:
        for layer in self.layers:
            layer.init_params(rng, scale)

    def with_displacement_scale(self, factor: float) -> "FlowChain":
        return FlowChain([l.with_displacement_scale(factor) for l in self.layers])

    def apply_np(self, z: np.ndarray):
        """(z_N, sum of log-dets); the empty chain is the identity with 0."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        total = np.zeros(z.shape[0])
        for layer in self.layers:
            z, logdet = layer.apply_np(z)
            total = total + logdet
        return z, total

    def apply(self, z: Var, raw_vars):
        """Graph path; raw_vars holds one leaf Var per layer, in order."""
        if len(raw_vars) != len(self.layers):
            raise ConfigurationError(
                f"chain has {len(self.layers)} layers but got {len(raw_vars)} parameter Vars"
            )
        g = z.g
        total = None
        for layer, raw in zip(self.layers, raw_vars):
            z, logdet = layer.apply(z, raw)
            total = logdet if total is None else total + logdet
        if total is None:
            total = g.const(np.zeros((z.shape[0], 1)))
        return z, total


def make_chain(family: str, n_layers: int, dim: int, rng: np.random.Generator | None = None,
               init_scale: float = 0.01) -> FlowChain:
    """Build an n-layer chain of one family; n_layers = 0 gives the identity."""
    if n_layers == 0:
        return FlowChain([])
    if family not in _FAMILIES:
        raise ConfigurationError(f"unknown flow family {family!r}")
    layers = [_FAMILIES[family](dim) for _ in range(n_layers)]
    chain = FlowChain(layers)
    if rng is not None:
        chain.init_params(rng, init_scale)
    return chain
