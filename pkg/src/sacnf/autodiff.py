"""Reverse-mode automatic differentiation on a scalar tape.

Every node of the computation graph is a single float64 scalar with an
explicit list of (parent id, local partial derivative) pairs.  The tape
stores nodes in topological order (an op may only consume already-existing
ids), so the backward pass is one reverse sweep that accumulates adjoints
additively.  Node/parent storage is CSR-style in preallocated numpy arrays;
constructors create whole batches of scalar nodes per call so that building
the per-minibatch graphs stays cheap, and the backward sweep is a numba
kernel (with a pure-Python fallback that computes the identical result).

A `Var` is a view onto a rectangular (batch, dim) block of scalar node ids.
Slicing and concatenating Vars is free: it only rearranges ids.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


class NumericError(RuntimeError):
    """Non-finite value encountered; carries the offending node id if known."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message)
        self.node_id = node_id


class ConfigurationError(ValueError):
    """Structural misuse: dimension mismatch, unknown tag, bad layer spec."""


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(log sigmoid) is stable on both tails
    return np.exp(x - np.logaddexp(0.0, x))


def softplus(x):
    """log(1 + exp(x)), numerically stable."""
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


if _HAVE_NUMBA:

    @njit(cache=True)
    def _backward_kernel(adj, out, pstart, pidx, pval):  # pragma: no cover - jitted
        adj[out] = 1.0
        for k in range(out, 0, -1):
            a = adj[k]
            if a != 0.0:
                for e in range(pstart[k], pstart[k + 1]):
                    adj[pidx[e]] += a * pval[e]

else:  # pragma: no cover - exercised only without numba

    def _backward_kernel(adj, out, pstart, pidx, pval):
        adj_l = adj.tolist()
        pstart_l = pstart.tolist()
        pidx_l = pidx.tolist()
        pval_l = pval.tolist()
        adj_l[out] = 1.0
        for k in range(out, 0, -1):
            a = adj_l[k]
            if a != 0.0:
                for e in range(pstart_l[k], pstart_l[k + 1]):
                    adj_l[pidx[e]] += a * pval_l[e]
        adj[:] = adj_l


class Graph:
    """Scalar computation tape.

    Nodes are identified by integer ids; id 0 is a constant zero node so
    that "no parent" never aliases a real id.  `backward(out)` fills the
    adjoint array with d(out)/d(node) for every node id <= out.
    """

    def __init__(self, node_capacity: int = 1024, edge_capacity: int = 4096):
        self._vals = np.zeros(max(node_capacity, 16), dtype=np.float64)
        self._pstart = np.zeros(max(node_capacity, 16) + 1, dtype=np.int64)
        self._pidx = np.zeros(max(edge_capacity, 16), dtype=np.int64)
        self._pval = np.zeros(max(edge_capacity, 16), dtype=np.float64)
        self.n = 1  # node 0 is the constant 0.0
        self.ne = 0
        self._adj: np.ndarray | None = None

    def reset(self) -> None:
        """Drop all nodes (tape style: graphs are rebuilt per minibatch)."""
        self.n = 1
        self.ne = 0
        self._adj = None

    # -- storage ---------------------------------------------------------

    def _ensure(self, k_nodes: int, k_edges: int) -> None:
        need_n = self.n + k_nodes
        if need_n > self._vals.size:
            cap = max(need_n, 2 * self._vals.size)
            self._vals = np.resize(self._vals, cap)
            self._pstart = np.resize(self._pstart, cap + 1)
        need_e = self.ne + k_edges
        if need_e > self._pidx.size:
            cap = max(need_e, 2 * self._pidx.size)
            self._pidx = np.resize(self._pidx, cap)
            self._pval = np.resize(self._pval, cap)

    def _raw(self, values, pids, pvals) -> int:
        """Append len(values) scalar nodes sharing a parent count P.

        pids/pvals have shape (k, P); pass None for parentless nodes.
        Returns the id of the first appended node.
        """
        values = np.ascontiguousarray(values, dtype=np.float64).ravel()
        k = values.size
        P = 0 if pids is None else pids.shape[-1]
        self._ensure(k, k * P)
        no, eo = self.n, self.ne
        self._vals[no : no + k] = values
        if P:
            self._pidx[eo : eo + k * P] = pids.reshape(k, P).ravel()
            self._pval[eo : eo + k * P] = pvals.reshape(k, P).ravel()
        self._pstart[no + 1 : no + k + 1] = eo + P * np.arange(1, k + 1, dtype=np.int64)
        self.n += k
        self.ne += k * P
        self._adj = None
        return no

    def _new(self, values: np.ndarray, pids, pvals) -> "Var":
        off = self._raw(values, pids, pvals)
        ids = (off + np.arange(values.size, dtype=np.int64)).reshape(values.shape)
        return Var(self, ids)

    # -- node constructors -------------------------------------------------

    def leaf(self, values) -> "Var":
        """Embed parameter values as differentiable leaf nodes."""
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        return self._new(values, None, None)

    def const(self, values) -> "Var":
        """Embed fixed values; identical to leaf but marks intent (stop-grad)."""
        return self.leaf(values)

    # -- backward ----------------------------------------------------------

    def backward(self, out) -> None:
        """Reverse sweep from a scalar output node.

        Raises NumericError (with the offending node id) if any node value
        is non-finite, before touching adjoints.
        """
        if isinstance(out, Var):
            if out.ids.size != 1:
                raise ConfigurationError("backward output must be a single scalar node")
            out = int(out.ids.ravel()[0])
        vals = self._vals[: self.n]
        finite = np.isfinite(vals)
        if not finite.all():
            bad = int(np.argmin(finite))
            raise NumericError(
                f"non-finite value {vals[bad]!r} at node {bad}", node_id=bad
            )
        adj = np.zeros(self.n, dtype=np.float64)
        _backward_kernel(
            adj, out, self._pstart[: self.n + 1], self._pidx[: self.ne], self._pval[: self.ne]
        )
        finite = np.isfinite(adj)
        if not finite.all():
            bad = int(np.argmin(finite))
            raise NumericError(f"non-finite adjoint at node {bad}", node_id=bad)
        self._adj = adj

    def grad(self, v: "Var") -> np.ndarray:
        """Adjoints of v's nodes from the last backward pass."""
        if self._adj is None:
            raise RuntimeError("call backward() before grad()")
        return self._adj[v.ids]

    def adjoint(self, node_id: int) -> float:
        if self._adj is None:
            raise RuntimeError("call backward() before adjoint()")
        return float(self._adj[node_id])


class Var:
    """View onto a (batch, dim) block of scalar graph nodes."""

    __slots__ = ("g", "ids")

    def __init__(self, g: Graph, ids: np.ndarray):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 0:
            ids = ids.reshape(1, 1)
        elif ids.ndim == 1:
            ids = ids.reshape(1, -1)
        elif ids.ndim != 2:
            raise ConfigurationError(f"Var ids must be at most 2-D, got {ids.ndim}-D")
        self.g = g
        self.ids = ids

    @property
    def shape(self):
        return self.ids.shape

    @property
    def values(self) -> np.ndarray:
        return self.g._vals[self.ids]

    def item(self) -> float:
        if self.ids.size != 1:
            raise ConfigurationError("item() requires a single-node Var")
        return float(self.g._vals[self.ids[0, 0]])

    def __getitem__(self, key) -> "Var":
        return Var(self.g, self.ids[key])

    def reshape(self, *shape) -> "Var":
        return Var(self.g, self.ids.reshape(*shape))

    # -- elementwise arithmetic (broadcasting over batch or dim) -----------

    def _binary(self, other, vfun):
        g = self.g
        if isinstance(other, Var):
            va, vb = self.values, other.values
            out, da, db = vfun(va, vb)
            shape = out.shape
            ia = np.broadcast_to(self.ids, shape)
            ib = np.broadcast_to(other.ids, shape)
            k = out.size
            pids = np.empty((k, 2), dtype=np.int64)
            pids[:, 0] = ia.ravel()
            pids[:, 1] = ib.ravel()
            pvals = np.empty((k, 2), dtype=np.float64)
            pvals[:, 0] = np.broadcast_to(da, shape).ravel()
            pvals[:, 1] = np.broadcast_to(db, shape).ravel()
            return g._new(out, pids, pvals)
        # scalar / ndarray constant
        c = np.asarray(other, dtype=np.float64)
        va = self.values
        out, da, _ = vfun(va, c)
        shape = out.shape
        ia = np.broadcast_to(self.ids, shape)
        pids = ia.reshape(-1, 1).copy()
        pvals = np.broadcast_to(da, shape).reshape(-1, 1).astype(np.float64)
        return g._new(out, pids, pvals)

    def _unary(self, out, d):
        pids = self.ids.reshape(-1, 1).copy()
        pvals = np.asarray(d, dtype=np.float64).reshape(-1, 1)
        return self.g._new(out, pids, pvals)

    def __add__(self, other):
        return self._binary(other, lambda a, b: (a + b, np.ones_like(a + b), np.ones_like(a + b)))

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: (a - b, np.ones_like(a - b), -np.ones_like(a - b)))

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        return self._binary(other, lambda a, b: (a * b, np.broadcast_to(b, (a * b).shape), np.broadcast_to(a, (a * b).shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        def vfun(a, b):
            with np.errstate(all="ignore"):
                out = a / b
                da = np.broadcast_to(1.0 / b, out.shape)
                db = np.broadcast_to(-a / (b * b), out.shape)
            return out, da, db

        return self._binary(other, vfun)

    def __neg__(self):
        v = self.values
        return self._unary(-v, np.full(v.shape, -1.0))

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        v = np.exp(self.values)
        return self._unary(v, v)

    def log(self):
        v = self.values
        with np.errstate(all="ignore"):
            return self._unary(np.log(v), 1.0 / v)

    def tanh(self):
        t = np.tanh(self.values)
        return self._unary(t, 1.0 - t * t)

    def relu(self):
        v = self.values
        return self._unary(np.maximum(v, 0.0), (v > 0.0).astype(np.float64))

    def square(self):
        v = self.values
        return self._unary(v * v, 2.0 * v)

    def sqrt(self):
        v = self.values
        s = np.sqrt(v)
        # guarded partial: derivative set to 0 at v == 0 (norm kink)
        with np.errstate(all="ignore"):
            d = np.where(s > 0.0, 0.5 / s, 0.0)
        return self._unary(s, d)

    def softplus(self):
        v = self.values
        return self._unary(softplus(v), _sigmoid(v))

    def clip(self, lo: float, hi: float):
        v = self.values
        inside = ((v > lo) & (v < hi)).astype(np.float64)
        return self._unary(np.clip(v, lo, hi), inside)

    # -- reductions ---------------------------------------------------------

    def rowsum(self) -> "Var":
        """Sum over the dim axis: (m, d) -> (m, 1)."""
        v = self.values
        out = v.sum(axis=1, keepdims=True)
        return self.g._new(out, self.ids.copy(), np.ones_like(v))

    def batch_mean(self) -> "Var":
        """Mean over the batch axis: (m, 1) -> (1, 1)."""
        if self.ids.shape[1] != 1:
            raise ConfigurationError("batch_mean expects a (m, 1) Var")
        v = self.values
        m = v.shape[0]
        out = np.array([[v.mean()]])
        return self.g._new(out, self.ids.reshape(1, m).copy(), np.full((1, m), 1.0 / m))


def concat(vars_: list[Var]) -> Var:
    """Column-concatenate Vars that live on the same graph (free: ids only)."""
    g = vars_[0].g
    if any(v.g is not g for v in vars_):
        raise ConfigurationError("concat requires Vars on the same graph")
    return Var(g, np.concatenate([v.ids for v in vars_], axis=1))


def vmin(a: Var, b: Var) -> Var:
    """Elementwise minimum; subgradient follows the selected branch."""

    def vfun(x, y):
        out = np.minimum(x, y)
        pick_a = (x <= y).astype(np.float64)
        return out, pick_a, 1.0 - pick_a

    return a._binary(b, vfun)


def affine(x: Var, w: Var, b: Var | None) -> Var:
    """Batched affine map y[i, o] = sum_k w[o, k] * x[i, k] + b[o].

    Creates one scalar node per (sample, output) pair whose parents are the
    row of w, the row of x, and the bias entry, with exact local partials.
    """
    g = x.g
    xv = x.values  # (m, din)
    wv = w.values  # (dout, din)
    m, din = xv.shape
    dout = wv.shape[0]
    if wv.shape[1] != din:
        raise ConfigurationError(f"affine: weight shape {wv.shape} vs input dim {din}")
    out = xv @ wv.T
    P = 2 * din + (1 if b is not None else 0)
    pids = np.empty((m, dout, P), dtype=np.int64)
    pvals = np.empty((m, dout, P), dtype=np.float64)
    pids[:, :, :din] = w.ids[None, :, :]
    pvals[:, :, :din] = xv[:, None, :]
    pids[:, :, din : 2 * din] = x.ids[:, None, :]
    pvals[:, :, din : 2 * din] = wv[None, :, :]
    if b is not None:
        bv = b.values.reshape(-1)
        if bv.size != dout:
            raise ConfigurationError(f"affine: bias size {bv.size} vs output dim {dout}")
        out = out + bv
        pids[:, :, 2 * din] = b.ids.reshape(-1)[None, :]
        pvals[:, :, 2 * din] = 1.0
    return g._new(out, pids, pvals)


def affine_const(x: Var, w: np.ndarray, b: np.ndarray | None) -> Var:
    """Affine map with fixed (non-differentiable) weights; x stays differentiable."""
    g = x.g
    xv = x.values
    m, din = xv.shape
    w = np.asarray(w, dtype=np.float64)
    dout = w.shape[0]
    if w.shape[1] != din:
        raise ConfigurationError(f"affine_const: weight shape {w.shape} vs input dim {din}")
    out = xv @ w.T
    if b is not None:
        out = out + np.asarray(b, dtype=np.float64).reshape(-1)
    pids = np.broadcast_to(x.ids[:, None, :], (m, dout, din))
    pvals = np.broadcast_to(w[None, :, :], (m, dout, din))
    return g._new(out, pids, pvals)


_ACTIVATIONS = {
    "tanh": (np.tanh, Var.tanh),
    "relu": (lambda x: np.maximum(x, 0.0), Var.relu),
    "identity": (lambda x: x, lambda v: v),
}


class DenseNet:
    """Feed-forward network over a flat float64 parameter array.

    Layout per layer l: weights (out_l, in_l) row-major, then biases (out_l,).
    `params` may be an externally-owned view so that several nets can share
    one optimizer-updated array.
    """

    def __init__(self, layer_sizes, activations, params: np.ndarray | None = None):
        if len(layer_sizes) < 2:
            raise ConfigurationError("DenseNet needs at least input and output sizes")
        if len(activations) != len(layer_sizes) - 1:
            raise ConfigurationError(
                f"expected {len(layer_sizes) - 1} activation tags, got {len(activations)}"
            )
        for a in activations:
            if a not in _ACTIVATIONS:
                raise ConfigurationError(f"unknown activation tag {a!r}")
        self.layer_sizes = list(layer_sizes)
        self.activations = list(activations)
        n = self.n_params
        if params is None:
            params = np.zeros(n, dtype=np.float64)
        if params.size != n:
            raise ConfigurationError(f"parameter array size {params.size}, expected {n}")
        self.params = params

    @property
    def n_params(self) -> int:
        return sum(
            i * o + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def init_params(self, rng: np.random.Generator) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        ofs = 0
        for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = 1.0 / np.sqrt(i)
            k = i * o + o
            self.params[ofs : ofs + k] = rng.uniform(-bound, bound, size=k)
            ofs += k

    def _layers(self, flat):
        """Yield (W, b) views of a flat array (ndarray or id array)."""
        ofs = 0
        for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = flat[ofs : ofs + i * o].reshape(o, i)
            b = flat[ofs + i * o : ofs + i * o + o]
            ofs += i * o + o
            yield w, b

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass (no graph; for targets and rollouts)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"input dim {x.shape[1]} does not match first layer {self.in_dim}"
            )
        with np.errstate(all="ignore"):  # non-finite outputs are caught by callers
            for (w, b), act in zip(self._layers(self.params), self.activations):
                x = _ACTIVATIONS[act][0](x @ w.T + b)
        return x

    def apply(self, x: Var, params: Var | None) -> Var:
        """Graph forward pass.

        With `params` (a leaf Var over this net's flat parameters) the
        weights are differentiable; with None they are baked in as constants
        and only the input carries gradient.
        """
        if x.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"input dim {x.shape[1]} does not match first layer {self.in_dim}"
            )
        g = x.g
        if params is None:
            for (w, b), act in zip(self._layers(self.params), self.activations):
                x = _ACTIVATIONS[act][1](affine_const(x, w, b))
            return x
        flat_ids = params.ids.reshape(-1)
        if flat_ids.size != self.n_params:
            raise ConfigurationError("params Var size does not match net")
        for (wi, bi), act in zip(self._layers(flat_ids), self.activations):
            x = _ACTIVATIONS[act][1](affine(x, Var(g, wi), Var(g, bi)))
        return x


class Adam:
    """Bias-corrected Adam over one flat parameter array."""

    def __init__(self, n_params: int, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(n_params, dtype=np.float64)
        self.v = np.zeros(n_params, dtype=np.float64)

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        """Update params in place; refuses (without mutation) non-finite grads."""
        grads = np.asarray(grads, dtype=np.float64)
        if grads.shape != params.shape or grads.shape != self.m.shape:
            raise ConfigurationError("gradient array does not align with parameters")
        if not np.isfinite(grads).all():
            raise NumericError("non-finite gradient passed to Adam")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
