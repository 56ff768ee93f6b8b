"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the graph network needs are provided: matmul, bias
add, relu, fused layer norm, concat, row gather, segment sum, and the
reductions used by the loss.  Every op is written so that calling it on
plain ndarrays (no Tensor argument anywhere) performs just the forward
numpy math; the same model code therefore serves both the training path
(build tape, call backward) and the rollout hot path (zero tape
overhead).

Gradients follow the dtype of the data: float32 during training, float64
when checking gradients numerically.
"""

import numpy as np

__all__ = [
    "Tensor", "value", "matmul", "add", "relu", "layer_norm", "concat",
    "gather", "segment_sum", "sub", "mul", "absolute", "sum_all", "mean_all",
    "backward", "scatter_plan", "mlp_init", "mlp_apply", "Adam",
    "numerical_gradient",
]


class Tensor:
    """A node in the computation tape."""

    __slots__ = ("data", "grad", "parents", "bw", "requires_grad")

    def __init__(self, data, parents=(), bw=None, requires_grad=True):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.bw = bw
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def accum(self, g):
        # copy on first deposit: ops hand over views or pass-through
        # references, and a shared buffer must not see later += updates
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g


def value(x):
    return x.data if isinstance(x, Tensor) else x


def _is_t(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _req(x):
    return isinstance(x, Tensor) and x.requires_grad


def backward(out, seed=None):
    """Reverse pass from `out`, accumulating into .grad of every tensor."""
    topo = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Tensor) and id(p) not in seen:
                stack.append((p, False))
    out.grad = np.ones_like(out.data) if seed is None else np.array(seed)
    for node in reversed(topo):
        if node.bw is not None and node.grad is not None:
            node.bw(node.grad)


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    av, bv = value(a), value(b)
    out_data = av @ bv
    if not _is_t(a, b):
        return out_data
    out = Tensor(out_data, (a, b))

    def bw(g):
        if _req(a):
            a.accum(g @ bv.T)
        if _req(b):
            b.accum(av.T @ g)
    out.bw = bw
    return out


def add(a, b):
    """Elementwise add; b may be a 1-d bias broadcast over rows."""
    av, bv = value(a), value(b)
    out_data = av + bv
    if not _is_t(a, b):
        return out_data
    out = Tensor(out_data, (a, b))

    def bw(g):
        if _req(a):
            a.accum(g if av.shape == g.shape else g.sum(axis=0))
        if _req(b):
            b.accum(g if bv.shape == g.shape else g.sum(axis=0))
    out.bw = bw
    return out


def sub(a, b):
    av, bv = value(a), value(b)
    out_data = av - bv
    if not _is_t(a, b):
        return out_data
    out = Tensor(out_data, (a, b))

    def bw(g):
        if _req(a):
            a.accum(g if av.shape == g.shape else g.sum(axis=0))
        if _req(b):
            b.accum(-g if bv.shape == g.shape else -g.sum(axis=0))
    out.bw = bw
    return out


def mul(a, b):
    """Elementwise product.  A differentiable operand must already have the
    full broadcast shape; only a non-Tensor factor may broadcast."""
    av, bv = value(a), value(b)
    out_data = av * bv
    if not _is_t(a, b):
        return out_data
    out = Tensor(out_data, (a, b))

    def bw(g):
        if _req(a):
            ga = g * bv
            a.accum(ga if av.shape == ga.shape else ga.sum(axis=0))
        if _req(b):
            gb = g * av
            b.accum(gb if bv.shape == gb.shape else gb.sum(axis=0))
    out.bw = bw
    return out


def relu(x):
    xv = value(x)
    out_data = np.maximum(xv, 0.0)
    if not _is_t(x):
        return out_data
    out = Tensor(out_data, (x,))

    def bw(g):
        if _req(x):
            x.accum(g * (out_data > 0.0))
    out.bw = bw
    return out


def absolute(x):
    xv = value(x)
    out_data = np.abs(xv)
    if not _is_t(x):
        return out_data
    out = Tensor(out_data, (x,))

    def bw(g):
        if _req(x):
            x.accum(g * np.sign(xv))
    out.bw = bw
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xv, gv, bv = value(x), value(gain), value(bias)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gv + bv
    if not _is_t(x, gain, bias):
        return out_data
    out = Tensor(out_data, (x, gain, bias))

    def bw(g):
        if _req(gain):
            gain.accum((g * xhat).sum(axis=0))
        if _req(bias):
            bias.accum(g.sum(axis=0))
        if _req(x):
            dxhat = g * gv
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accum(inv * (dxhat - m1 - xhat * m2))
    out.bw = bw
    return out


def concat(parts, axis=1):
    vals = [value(p) for p in parts]
    out_data = np.concatenate(vals, axis=axis)
    if not _is_t(*parts):
        return out_data
    out = Tensor(out_data, tuple(parts))
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        for p, piece in zip(parts, pieces):
            if _req(p):
                p.accum(piece)
    out.bw = bw
    return out


def scatter_plan(idx, num_rows):
    """Precomputed plan for accumulating rows back through a gather.

    Returns (order, starts, unique_rows): a stable argsort of idx, the run
    starts within the sorted index list, and the row each run maps to.
    """
    idx = np.asarray(idx)
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.diff(sidx, prepend=-1))
    return order, starts, sidx[starts]


def _scatter_rows(g, idx, num_rows, plan):
    # sum rows of g that share an index, without np.add.at
    if plan is None:
        plan = scatter_plan(idx, num_rows)
    order, starts, rows = plan
    sums = np.add.reduceat(g[order], starts, axis=0)
    out = np.zeros((num_rows,) + g.shape[1:], dtype=g.dtype)
    out[rows] = sums
    return out


def gather(x, idx, plan=None):
    """Row gather y = x[idx]; backward scatter-adds into x."""
    xv = value(x)
    out_data = xv[idx]
    if not _is_t(x):
        return out_data
    out = Tensor(out_data, (x,))

    def bw(g):
        if _req(x):
            x.accum(_scatter_rows(g, idx, xv.shape[0], plan))
    out.bw = bw
    return out


def segment_sum(x, segment_ids, num_segments):
    """Sum rows of x by segment id.  Ids must be sorted ascending."""
    xv = value(x)
    ids = np.asarray(segment_ids)
    if ids.size == 0:
        out_data = np.zeros((num_segments,) + xv.shape[1:], dtype=xv.dtype)
    else:
        starts = np.flatnonzero(np.diff(ids, prepend=-1))
        sums = np.add.reduceat(xv, starts, axis=0)
        out_data = np.zeros((num_segments,) + xv.shape[1:], dtype=xv.dtype)
        out_data[ids[starts]] = sums
    if not _is_t(x):
        return out_data
    out = Tensor(out_data, (x,))

    def bw(g):
        if _req(x):
            x.accum(g[ids])
    out.bw = bw
    return out


def sum_all(x):
    xv = value(x)
    out_data = np.asarray(xv.sum())
    if not _is_t(x):
        return out_data
    out = Tensor(out_data, (x,))

    def bw(g):
        if _req(x):
            x.accum(np.full(xv.shape, float(g), dtype=xv.dtype))
    out.bw = bw
    return out


def mean_all(x):
    xv = value(x)
    n = xv.size
    out_data = np.asarray(xv.mean())
    if not _is_t(x):
        return out_data
    out = Tensor(out_data, (x,))

    def bw(g):
        if _req(x):
            x.accum(np.broadcast_to(g / n, xv.shape).astype(xv.dtype, copy=True))
    out.bw = bw
    return out


# ---------------------------------------------------------------------------
# MLP building block


def mlp_init(rng, in_size, hidden, out_size, with_layer_norm, dtype=np.float32):
    """Two-hidden-layer MLP parameters with Kaiming-uniform weights."""

    def kaiming(fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)

    p = {
        "w1": kaiming(in_size, hidden),
        "b1": np.zeros(hidden, dtype=dtype),
        "w2": kaiming(hidden, hidden),
        "b2": np.zeros(hidden, dtype=dtype),
        "w3": kaiming(hidden, out_size),
        "b3": np.zeros(out_size, dtype=dtype),
    }
    if with_layer_norm:
        p["ln_g"] = np.ones(out_size, dtype=dtype)
        p["ln_b"] = np.zeros(out_size, dtype=dtype)
    return p


def _mlp_fast(params, x, eps=1e-5):
    """Inference-only MLP path: the same arithmetic as the op graph, with
    in-place destinations so rollouts are not allocation-bound."""
    h = x @ params["w1"]
    h += params["b1"]
    np.maximum(h, 0.0, out=h)
    h = h @ params["w2"]
    h += params["b2"]
    np.maximum(h, 0.0, out=h)
    y = h @ params["w3"]
    y += params["b3"]
    if "ln_g" in params:
        mu = y.mean(axis=-1, keepdims=True)
        y -= mu
        var = np.mean(y * y, axis=-1, keepdims=True)
        y *= 1.0 / np.sqrt(var + eps)
        y *= params["ln_g"]
        y += params["ln_b"]
    return y


def mlp_apply(params, x):
    """Apply the MLP; a trailing layer norm runs iff the params carry one."""
    if not _is_t(x, *params.values()):
        return _mlp_fast(params, x)
    h = relu(add(matmul(x, params["w1"]), params["b1"]))
    h = relu(add(matmul(h, params["w2"]), params["b2"]))
    y = add(matmul(h, params["w3"]), params["b3"])
    if "ln_g" in params:
        y = layer_norm(y, params["ln_g"], params["ln_b"])
    return y


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam on a flat dict of parameter arrays (updated in place)."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for k, g in grads.items():
            if g is None:
                continue
            p = self.params[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (self.lr / bias1) * m / (np.sqrt(v / bias2) + self.eps)


def numerical_gradient(fn, arrays, eps=1e-6):
    """Central-difference gradients of scalar fn w.r.t. a dict of arrays."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(fn())
            flat[i] = keep - eps
            lo = float(fn())
            flat[i] = keep
            gflat[i] = (hi - lo) / (2 * eps)
        grads[name] = g
    return grads
