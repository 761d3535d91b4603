"""Reverse-mode automatic differentiation over dense numpy arrays.

Small, strict engine sized for the CNNs in this package: no broadcasting
(elementwise ops demand equal shapes, scalars must be plain Python numbers),
no higher-order derivatives, and graphs are rebuilt on every forward pass.
Arrays are float32 or float64; tolerance-sensitive work (gradient checks)
should run in float64.

A :class:`Var` wraps an array value together with the plumbing ``backward``
needs: its parent nodes and a closure that routes the node's cotangent to
those parents. Node ids increase monotonically with creation, so walking the
recorded nodes in descending id order visits every consumer before its
producer — an implicit tape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, NumericError, ShapeError

LOG_CLAMP_MIN = 1e-6

_node_ids = itertools.count()


class Var:
    """Tensor-valued node in a computation graph.

    ``value`` is a numpy array (never mutated by the engine), ``grad`` is
    populated by :func:`backward` for nodes with ``requires_grad``.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_grad_fn", "_nid")

    def __init__(self, value, requires_grad: bool = False):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError("tensor constructed with non-finite values")
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable[[np.ndarray], None]] = None
        self._nid = next(_node_ids)

    @classmethod
    def _op(cls, value: np.ndarray, parents: Sequence["Var"], grad_fn) -> "Var":
        """Build an interior node; records backward plumbing only when needed."""
        out = object.__new__(cls)
        out.value = value
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        out._nid = next(_node_ids)
        return out

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _accumulate(var: Var, g: np.ndarray) -> None:
    if var.requires_grad or var._grad_fn is not None:
        var.grad = g.copy() if var.grad is None else var.grad + g


def as_var(x) -> Var:
    """Wrap arrays/scalars as constant Vars; pass Vars through."""
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def backward(root: Var) -> None:
    """Reverse pass from a scalar root; populates ``.grad`` on every
    requires_grad node reachable from it.

    Deterministic: nodes are processed in descending creation order, which is
    a reverse topological order because children are always created after
    their parents. One call per graph; a second call would accumulate twice.
    """
    if root.value.size != 1:
        raise ValueError(
            f"backward root must be scalar, got shape {root.value.shape}"
        )
    if not root.requires_grad:
        return
    seen = {root._nid}
    stack = [root]
    nodes = []
    while stack:
        node = stack.pop()
        nodes.append(node)
        for p in node._parents:
            if p._nid not in seen:
                seen.add(p._nid)
                stack.append(p)
    nodes.sort(key=lambda n: n._nid, reverse=True)
    root.grad = np.ones_like(root.value)
    for node in nodes:
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _check_same_shape(a: Var, b: Var, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def _split(other):
    """Classify the second operand: (Var, None) or (None, float scalar)."""
    if isinstance(other, Var):
        return other, None
    if np.isscalar(other) or (isinstance(other, np.ndarray) and other.ndim == 0):
        return None, float(other)
    return Var(np.asarray(other)), None


def add(a: Var, b) -> Var:
    bv, s = _split(b)
    if bv is None:
        def grad_fn(g, a=a):
            _accumulate(a, g)
        return Var._op(a.value + s, (a,), grad_fn)
    _check_same_shape(a, bv, "add")

    def grad_fn(g, a=a, bv=bv):
        _accumulate(a, g)
        _accumulate(bv, g)

    return Var._op(a.value + bv.value, (a, bv), grad_fn)


def sub(a: Var, b) -> Var:
    bv, s = _split(b)
    if bv is None:
        def grad_fn(g, a=a):
            _accumulate(a, g)
        return Var._op(a.value - s, (a,), grad_fn)
    _check_same_shape(a, bv, "sub")

    def grad_fn(g, a=a, bv=bv):
        _accumulate(a, g)
        _accumulate(bv, -g)

    return Var._op(a.value - bv.value, (a, bv), grad_fn)


def mul(a: Var, b) -> Var:
    bv, s = _split(b)
    if bv is None:
        def grad_fn(g, a=a, s=s):
            _accumulate(a, g * s)
        return Var._op(a.value * s, (a,), grad_fn)
    _check_same_shape(a, bv, "mul")

    def grad_fn(g, a=a, bv=bv):
        _accumulate(a, g * bv.value)
        _accumulate(bv, g * a.value)

    return Var._op(a.value * bv.value, (a, bv), grad_fn)


def neg(a: Var) -> Var:
    def grad_fn(g, a=a):
        _accumulate(a, -g)

    return Var._op(-a.value, (a,), grad_fn)


def sum_all(a: Var) -> Var:
    def grad_fn(g, a=a):
        _accumulate(a, np.full_like(a.value, g.item()))

    return Var._op(np.asarray(a.value.sum()), (a,), grad_fn)


def mean_all(a: Var) -> Var:
    n = a.value.size

    def grad_fn(g, a=a, n=n):
        _accumulate(a, np.full_like(a.value, g.item() / n))

    return Var._op(np.asarray(a.value.mean()), (a,), grad_fn)


def reshape(a: Var, shape) -> Var:
    orig = a.value.shape

    def grad_fn(g, a=a, orig=orig):
        _accumulate(a, g.reshape(orig))

    return Var._op(a.value.reshape(shape), (a,), grad_fn)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
                  ho: int, wo: int) -> np.ndarray:
    """Read-only strided view [N, C, ho, wo, kh, kw] over a padded input."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )


def conv2d(x: Var, kernel: Var, bias: Optional[Var] = None,
           stride=(1, 1), padding=(0, 0), groups: int = 1) -> Var:
    """2D cross-correlation, NCHW layout, kernel [Cout, Cin/groups, kh, kw].

    Output spatial dims: (H + 2*ph - kh)//sh + 1 (floor), same for W.
    Backward produces gradients for input, kernel, and bias.
    """
    xv, kv = x.value, kernel.value
    if xv.ndim != 4 or kv.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4D input/kernel, got {xv.shape} and {kv.shape}"
        )
    n, cin, h, w = xv.shape
    cout, cin_g, kh, kw = kv.shape
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if groups < 1 or cin % groups != 0:
        raise ConfigError(f"conv2d: groups={groups} does not divide Cin={cin}")
    if cout % groups != 0:
        raise ConfigError(f"conv2d: groups={groups} does not divide Cout={cout}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv2d: kernel channel axis {cin_g} != Cin/groups = {cin // groups}"
        )
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} does not fit padded input "
            f"{h + 2 * ph}x{w + 2 * pw} on axes HxW"
        )
    if bias is not None and bias.value.shape != (cout,):
        raise ShapeError(
            f"conv2d: bias shape {bias.value.shape} != ({cout},) on axis Cout"
        )

    xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xv
    cg_out = cout // groups
    out = np.empty((n, cout, ho, wo), dtype=xv.dtype)
    cols = []
    for g in range(groups):
        xg = xp[:, g * cin_g:(g + 1) * cin_g]
        col = _conv_windows(xg, kh, kw, sh, sw, ho, wo)
        col = col.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin_g * kh * kw)
        wmat = kv[g * cg_out:(g + 1) * cg_out].reshape(cg_out, -1)
        og = col @ wmat.T
        out[:, g * cg_out:(g + 1) * cg_out] = (
            og.reshape(n, ho, wo, cg_out).transpose(0, 3, 1, 2)
        )
        cols.append(col)
    if bias is not None:
        out += bias.value[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(grad, x=x, kernel=kernel, bias=bias, cols=cols):
        kv = kernel.value
        need_dx = x.requires_grad
        need_dk = kernel.requires_grad
        dxp = (np.zeros((n, cin, h + 2 * ph, w + 2 * pw), dtype=grad.dtype)
               if need_dx else None)
        dk = np.empty_like(kv) if need_dk else None
        for g in range(groups):
            go = grad[:, g * cg_out:(g + 1) * cg_out]
            go_flat = go.transpose(0, 2, 3, 1).reshape(n * ho * wo, cg_out)
            if need_dk:
                dk[g * cg_out:(g + 1) * cg_out] = (
                    (go_flat.T @ cols[g]).reshape(cg_out, cin_g, kh, kw)
                )
            if not need_dx:
                continue
            wmat = kv[g * cg_out:(g + 1) * cg_out].reshape(cg_out, -1)
            dcol = (go_flat @ wmat).reshape(n, ho, wo, cin_g, kh, kw)
            dxg = dxp[:, g * cin_g:(g + 1) * cin_g]
            # scatter-add: within a fixed kernel offset the target slices
            # never overlap, so sliced += is exact
            for u in range(kh):
                for v in range(kw):
                    dxg[:, :, u:u + sh * ho:sh, v:v + sw * wo:sw] += (
                        dcol[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                    )
        if need_dx:
            if ph or pw:
                dxp = dxp[:, :, ph:ph + h, pw:pw + w]
            _accumulate(x, dxp)
        if need_dk:
            _accumulate(kernel, dk)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, grad.sum(axis=(0, 2, 3)))

    return Var._op(out, parents, grad_fn)


def depthwise_pointwise(x: Var, depth_kernel: Var, point_kernel: Var,
                        padding=(0, 0)) -> Var:
    """Depthwise conv (groups == Cin) followed by a 1x1 pointwise conv."""
    cin = x.value.shape[1]
    if depth_kernel.value.shape[1] != 1:
        raise ShapeError(
            f"depthwise kernel must have channel axis 1, got "
            f"{depth_kernel.value.shape}"
        )
    if point_kernel.value.shape[2:] != (1, 1):
        raise ShapeError(
            f"pointwise kernel spatial size must be 1x1, got "
            f"{point_kernel.value.shape}"
        )
    mid = conv2d(x, depth_kernel, stride=(1, 1), padding=padding, groups=cin)
    return conv2d(mid, point_kernel)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def pool(x: Var, kind: str, window, stride=None) -> Var:
    if kind == "avg":
        return avg_pool(x, window, stride)
    if kind == "max":
        return max_pool(x, window, stride)
    raise ConfigError(f"unknown pool kind {kind!r}")


def _pool_dims(x: Var, window, stride):
    if stride is None:
        stride = window
    n, c, h, w = x.value.shape
    wh, ww = window
    sh, sw = stride
    if wh > h or ww > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - wh) // sh + 1
    wo = (w - ww) // sw + 1
    return (n, c, h, w, wh, ww, sh, sw, ho, wo)


def avg_pool(x: Var, window, stride=None) -> Var:
    n, c, h, w, wh, ww, sh, sw, ho, wo = _pool_dims(x, window, stride)
    view = _conv_windows(x.value, wh, ww, sh, sw, ho, wo)
    out = view.mean(axis=(4, 5))
    scale = 1.0 / (wh * ww)

    def grad_fn(g, x=x):
        dx = np.zeros_like(x.value)
        gs = g * scale
        for u in range(wh):
            for v in range(ww):
                dx[:, :, u:u + sh * ho:sh, v:v + sw * wo:sw] += gs
        _accumulate(x, dx)

    return Var._op(out, (x,), grad_fn)


def max_pool(x: Var, window, stride=None) -> Var:
    n, c, h, w, wh, ww, sh, sw, ho, wo = _pool_dims(x, window, stride)
    view = _conv_windows(x.value, wh, ww, sh, sw, ho, wo)
    flat = view.reshape(n, c, ho, wo, wh * ww)
    idx = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g, x=x, idx=idx):
        dx = np.zeros_like(x.value)
        ni, ci, hi, wi = np.indices(idx.shape)
        hp = hi * sh + idx // ww
        wp = wi * sw + idx % ww
        np.add.at(dx, (ni, ci, hp, wp), g)
        _accumulate(x, dx)

    return Var._op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNormStats:
    """Per-channel running statistics, updated in train mode."""

    __slots__ = ("mean", "var", "momentum", "eps")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Var, gamma: Var, beta: Var, stats: BatchNormStats,
               training: bool) -> Var:
    """Channel-wise batch normalization over NCHW input.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running stats in place; eval mode uses the running stats.
    """
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"batch_norm: expected NCHW input, got {xv.shape}")
    c = xv.shape[1]
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {gamma.value.shape}/"
            f"{beta.value.shape} != ({c},)"
        )
    eps = stats.eps
    axes = (0, 2, 3)
    if training:
        if xv.shape[0] < 2:
            raise ConfigError(
                "batch_norm: train mode requires batch size >= 2 "
                "(zero-variance hazard)"
            )
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        stats.mean = ((1 - stats.momentum) * stats.mean
                      + stats.momentum * mu).astype(stats.mean.dtype)
        stats.var = ((1 - stats.momentum) * stats.var
                     + stats.momentum * var).astype(stats.var.dtype)
    else:
        mu = stats.mean.astype(xv.dtype)
        var = stats.var.astype(xv.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]
    m = xv.shape[0] * xv.shape[2] * xv.shape[3]

    def grad_fn(g, x=x, gamma=gamma, beta=beta, xhat=xhat, inv_std=inv_std):
        _accumulate(beta, g.sum(axis=axes))
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        dxhat = g * gamma.value[None, :, None, None]
        if training:
            # closed-form backward through the batch statistics
            s1 = dxhat.sum(axis=axes)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            dx = (inv_std[None, :, None, None] / m) * (
                m * dxhat - s1 - xhat * s2
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        _accumulate(x, dx)

    return Var._op(out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# dense / activations / dropout
# ---------------------------------------------------------------------------


def dense(x: Var, weight: Var, bias: Var) -> Var:
    """Affine map: [N,F] x [K,F] + [K] -> [N,K]."""
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(
            f"dense: input {xv.shape} incompatible with weight {wv.shape} "
            "on the feature axis"
        )
    if bv.shape != (wv.shape[0],):
        raise ShapeError(f"dense: bias shape {bv.shape} != ({wv.shape[0]},)")
    out = xv @ wv.T + bv

    def grad_fn(g, x=x, weight=weight, bias=bias):
        if x.requires_grad:
            _accumulate(x, g @ weight.value)
        if weight.requires_grad:
            _accumulate(weight, g.T @ x.value)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return Var._op(out, (x, weight, bias), grad_fn)


def activation(x: Var, kind: str) -> Var:
    fns = {"elu": elu, "relu": relu, "square": square,
           "log_clamped": log_clamped}
    if kind not in fns:
        raise ConfigError(f"unknown activation {kind!r}")
    return fns[kind](x)


def elu(x: Var) -> Var:
    xv = x.value
    neg_mask = xv <= 0
    expm1 = np.expm1(np.where(neg_mask, xv, 0.0))
    out = np.where(neg_mask, expm1, xv)

    def grad_fn(g, x=x, neg_mask=neg_mask, expm1=expm1):
        _accumulate(x, g * np.where(neg_mask, expm1 + 1.0, 1.0))

    return Var._op(out, (x,), grad_fn)


def relu(x: Var) -> Var:
    out = np.maximum(x.value, 0)

    def grad_fn(g, x=x):
        _accumulate(x, g * (x.value > 0))

    return Var._op(out, (x,), grad_fn)


def square(x: Var) -> Var:
    def grad_fn(g, x=x):
        _accumulate(x, g * (2.0 * x.value))

    return Var._op(x.value * x.value, (x,), grad_fn)


def log_clamped(x: Var) -> Var:
    """log(max(x, 1e-6)); gradient is zero on the clamped region."""
    xv = x.value
    clamped = np.maximum(xv, LOG_CLAMP_MIN)
    out = np.log(clamped)

    def grad_fn(g, x=x, clamped=clamped):
        _accumulate(x, g * np.where(x.value > LOG_CLAMP_MIN, 1.0 / clamped, 0.0))

    return Var._op(out, (x,), grad_fn)


def dropout(x: Var, rate: float, rng: np.random.Generator) -> Var:
    """Inverted dropout; callers apply it in train mode only."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.value.dtype)

    def grad_fn(g, x=x, keep=keep):
        _accumulate(x, g * keep)

    return Var._op(x.value * keep, (x,), grad_fn)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_labels(logits: Var, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.value.ndim != 2:
        raise ShapeError(f"expected [N,K] logits, got {logits.value.shape}")
    n, k = logits.value.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    labels = _check_labels(logits, labels)
    z = logits.value
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    lse = np.log(np.exp(zs).sum(axis=1))
    loss = np.asarray((lse - zs[np.arange(n), labels]).mean())

    def grad_fn(g, logits=logits, labels=labels, zs=zs, lse=lse):
        p = np.exp(zs - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, (g.item() / n) * p)

    return Var._op(loss, (logits,), grad_fn)


def margin_loss(logits: Var, labels) -> Var:
    """Hinge on the gap between the true logit and the best other logit,
    max(Z_true - max_other, 0), mean over the batch.

    Zero exactly when every sample has some non-true logit >= its true
    logit; the subgradient at the kink takes the zero branch, so samples at
    or past the decision boundary contribute no gradient.
    """
    labels = _check_labels(logits, labels)
    z = logits.value
    n, k = z.shape
    if k < 2:
        raise ConfigError(f"margin_loss needs >= 2 classes, got {k}")
    rows = np.arange(n)
    z_true = z[rows, labels]
    masked = z.copy()
    masked[rows, labels] = -np.inf
    other_idx = masked.argmax(axis=1)  # first maximal non-true index
    margin = z_true - masked[rows, other_idx]
    active = margin > 0
    loss = np.asarray(np.maximum(margin, 0.0).mean())

    def grad_fn(g, logits=logits, labels=labels, other_idx=other_idx,
                active=active):
        dz = np.zeros_like(logits.value)
        scale = g.item() / n
        dz[rows[active], labels[active]] = scale
        dz[rows[active], other_idx[active]] -= scale
        _accumulate(logits, dz)

    return Var._op(loss, (logits,), grad_fn)
