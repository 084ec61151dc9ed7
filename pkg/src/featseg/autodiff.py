"""Reverse-mode differentiation over a small set of dense numpy operators.

Values are held in ``Var`` nodes.  Constants (no learnable ancestor) drop
their parent links at construction, so inference-only forward passes keep
no graph alive and are garbage-collected as they go.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit as _njit
except ImportError:          # pure-numpy fallback keeps everything working
    _njit = None

# Reductions longer than this accumulate in float64 before casting back.
_LONG_REDUCTION = 4096


class ShapeError(ValueError):
    """Operand shapes do not conform for an operator."""


def _shape_check(op, cond, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class Var:
    """A node in the operator DAG: a numpy value plus an optional backward rule."""

    __slots__ = ("value", "grad", "name", "requires_grad", "needs_grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.name = name
        self.requires_grad = requires_grad
        self.grad = None
        needs = requires_grad or any(p.needs_grad for p in parents)
        self.needs_grad = needs
        if needs:
            self._parents = tuple(parents)
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def detach(self):
        return Var(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, needs_grad={self.needs_grad}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x))


class Parameter(Var):
    """A named learnable leaf."""

    def __init__(self, value, name):
        super().__init__(np.array(value, copy=True), requires_grad=True, name=name)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _sum_acc(x, axis=None, keepdims=False):
    """Sum with float64 accumulation for long reductions."""
    if x.size > _LONG_REDUCTION and x.dtype == np.float32:
        return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)
    return np.sum(x, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_var(a), as_var(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape}, {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Var(out, (a, b), backward)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    try:
        out = a.value - b.value
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape}, {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Var(out, (a, b), backward)


def mul(a, b):
    a, b = as_var(a), as_var(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape}, {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Var(out, (a, b), backward)


def div(a, b):
    a, b = as_var(a), as_var(b)
    try:
        out = a.value / b.value
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape}, {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g / b.value, a.shape)
        gb = _unbroadcast(-g * a.value / (b.value * b.value), b.shape)
        return ga, gb

    return Var(out, (a, b), backward)


def exp(x):
    x = as_var(x)
    out = np.exp(x.value)
    return Var(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_var(x)
    return Var(np.log(x.value), (x,), lambda g: (g / x.value,))


def tanh(x):
    x = as_var(x)
    out = np.tanh(x.value)
    return Var(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x):
    x = as_var(x)
    mask = x.value > 0
    return Var(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def power(x, p):
    """x ** p for a fixed float exponent."""
    x = as_var(x)
    out = x.value ** p
    return Var(out, (x,), lambda g: (g * p * x.value ** (p - 1.0),))


def sqrt(x):
    return power(x, 0.5)


# ---------------------------------------------------------------------------
# shape & reductions


def reshape(x, shape):
    x = as_var(x)
    return Var(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_var(x)
    inv = None if axes is None else np.argsort(axes)
    return Var(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, key):
    x = as_var(x)

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, key, g)
        return (gx,)

    return Var(x.value[key], (x,), backward)


def vsum(x, axis=None, keepdims=False):
    x = as_var(x)
    out = _sum_acc(x.value, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Var(out, (x,), backward)


def vmean(x, axis=None, keepdims=False):
    x = as_var(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def vmax_const(x, axis=None, keepdims=False):
    """Max as a detached constant (used for softmax stabilization)."""
    x = as_var(x)
    return Var(np.max(x.value, axis=axis, keepdims=keepdims))


def gather2d(x, iy, ix):
    """Pick rows/cols of an (H, W, ...) array by integer index grids.

    ``iy`` and ``ix`` share a shape; output is that shape plus trailing dims.
    Backward scatter-adds into the source.
    """
    x = as_var(x)
    iy = np.asarray(iy)
    ix = np.asarray(ix)
    _shape_check("gather2d", iy.shape == ix.shape, iy.shape, ix.shape)
    out = x.value[iy, ix]

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (iy, ix), g)
        return (gx,)

    return Var(out, (x,), backward)


def _pad_index(n, before, after, mode):
    idx = np.arange(n)
    if before == 0 and after == 0:
        return idx
    if mode == "replicate":
        return np.pad(idx, (before, after), mode="edge")
    if mode == "reflect":
        return np.pad(idx, (before, after), mode="reflect")
    raise ValueError(f"unknown padding mode {mode!r}")


def pad2d(x, pad, mode="replicate"):
    """Pad the two leading spatial axes of an (H, W, C) array."""
    x = as_var(x)
    h, w = x.shape[0], x.shape[1]
    iy = _pad_index(h, pad, pad, mode)[:, None]
    ix = _pad_index(w, pad, pad, mode)[None, :]
    iy, ix = np.broadcast_arrays(iy, ix)
    return gather2d(x, iy, ix)


# ---------------------------------------------------------------------------
# linear algebra & composites


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    _shape_check("matmul", a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0],
                 a.shape, b.shape)
    out = a.value @ b.value

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return Var(out, (a, b), backward)


def softmax(x, axis=-1):
    x = as_var(x)
    m = vmax_const(x, axis=axis, keepdims=True)
    e = exp(sub(x, m))
    return div(e, vsum(e, axis=axis, keepdims=True))


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, optional affine."""
    x = as_var(x)
    mu = vmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = vmean(mul(xc, xc), axis=-1, keepdims=True)
    out = div(xc, sqrt(add(var, eps)))
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def extract_patches(x, radius, mode="replicate"):
    """All (2r+1)^2 shifted copies of an (H, W, C) array.

    Returns shape (H, W, (2r+1)^2, C); window positions run row-major over
    offsets dy, dx in [-r, r].
    """
    x = as_var(x)
    _shape_check("extract_patches", x.ndim == 3, x.shape)
    h, w = x.shape[0], x.shape[1]
    k = 2 * radius + 1
    py = _pad_index(h, radius, radius, mode)
    px = _pad_index(w, radius, radius, mode)
    iy = np.empty((h, w, k * k), dtype=np.int64)
    ix = np.empty((h, w, k * k), dtype=np.int64)
    base_y = np.arange(h)[:, None]
    base_x = np.arange(w)[None, :]
    pos = 0
    for dy in range(k):
        for dx in range(k):
            iy[:, :, pos] = py[base_y + dy]
            ix[:, :, pos] = px[base_x + dx]
            pos += 1
    return gather2d(x, iy, ix)


if _njit is not None:

    @_njit(cache=True)
    def _corr_fwd_jit(x, padded, r):
        h, w, g = x.shape
        k = 2 * r + 1
        out = np.zeros((h, w, k * k), x.dtype)
        for y in range(h):
            for c in range(w):
                pos = 0
                for dy in range(k):
                    for dx in range(k):
                        acc = 0.0
                        for j in range(g):
                            acc += x[y, c, j] * padded[y + dy, c + dx, j]
                        out[y, c, pos] = acc
                        pos += 1
        return out

    @_njit(cache=True)
    def _corr_bwd_jit(x, padded, grad, r):
        # Replicate padding folds the scatter term back via clamped indices.
        h, w, g = x.shape
        k = 2 * r + 1
        gx = np.zeros_like(x)
        for y in range(h):
            for c in range(w):
                pos = 0
                for dy in range(k):
                    for dx in range(k):
                        gv = grad[y, c, pos]
                        sy = min(max(y + dy - r, 0), h - 1)
                        sx = min(max(c + dx - r, 0), w - 1)
                        for j in range(g):
                            gx[y, c, j] += gv * padded[y + dy, c + dx, j]
                            gx[sy, sx, j] += gv * x[y, c, j]
                        pos += 1
        return gx

    @_njit(cache=True)
    def _wsum_fwd_jit(weights, padded, r):
        h, w, _ = weights.shape
        c = padded.shape[2]
        k = 2 * r + 1
        out = np.zeros((h, w, c), padded.dtype)
        for y in range(h):
            for xx in range(w):
                pos = 0
                for dy in range(k):
                    for dx in range(k):
                        wv = weights[y, xx, pos]
                        for j in range(c):
                            out[y, xx, j] += wv * padded[y + dy, xx + dx, j]
                        pos += 1
        return out

    @_njit(cache=True)
    def _wsum_bwd_jit(weights, padded, grad, r, need_gp):
        h, w, _ = weights.shape
        c = padded.shape[2]
        k = 2 * r + 1
        gw = np.zeros_like(weights)
        gp = np.zeros_like(padded)
        for y in range(h):
            for xx in range(w):
                pos = 0
                for dy in range(k):
                    for dx in range(k):
                        acc = 0.0
                        wv = weights[y, xx, pos]
                        for j in range(c):
                            gv = grad[y, xx, j]
                            acc += gv * padded[y + dy, xx + dx, j]
                            if need_gp:
                                gp[y + dy, xx + dx, j] += wv * gv
                        gw[y, xx, pos] = acc
                        pos += 1
        return gw, gp

    def _warm_jit_kernels():
        # Trigger compilation (or disk-cache load) of both dtype
        # specializations at import so no caller pays it mid-computation.
        for dt in (np.float32, np.float64):
            x = np.zeros((2, 2, 1), dt)
            p = np.zeros((4, 4, 1), dt)
            g3 = np.zeros((2, 2, 1), dt)
            wts = np.zeros((2, 2, 9), dt)
            gk = np.zeros((2, 2, 9), dt)
            _corr_fwd_jit(x, p, 1)
            _corr_bwd_jit(x, p, gk, 1)
            _wsum_fwd_jit(wts, p, 1)
            _wsum_bwd_jit(wts, p, g3, 1, True)

    _warm_jit_kernels()


def window_correlation(x, radius, mode="replicate"):
    """Dot product of each pixel's feature with every neighbor in its window.

    ``x`` is (H, W, g); output is (H, W, (2r+1)^2) with offsets row-major over
    dy, dx in [-r, r].  Fused so the (H, W, k^2, g) neighbor tensor is never
    materialized.
    """
    x = as_var(x)
    _shape_check("window_correlation", x.ndim == 3 and radius >= 1, x.shape)
    h, w, g = x.shape
    k = 2 * radius + 1
    py = _pad_index(h, radius, radius, mode)
    px = _pad_index(w, radius, radius, mode)
    padded = np.ascontiguousarray(x.value[py][:, px])
    if _njit is not None and mode == "replicate":
        out = _corr_fwd_jit(np.ascontiguousarray(x.value), padded, radius)

        def backward(grad):
            return (_corr_bwd_jit(np.ascontiguousarray(x.value), padded,
                                  np.ascontiguousarray(grad), radius),)

        return Var(out, (x,), backward)

    view = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    out = np.einsum("hwg,hwgij->hwij", x.value, view, optimize=True).reshape(h, w, k * k)

    def backward(grad):
        g4 = grad.reshape(h, w, k, k)
        gx = np.einsum("hwij,hwgij->hwg", g4, view, optimize=True)
        gp = np.zeros_like(padded)
        for dy in range(k):
            for dx in range(k):
                gp[dy:dy + h, dx:dx + w] += g4[:, :, dy, dx, None] * x.value
        folded = np.zeros_like(x.value)
        np.add.at(folded, (py[:, None], px[None, :]), gp)
        return (gx + folded,)

    return Var(out.astype(x.value.dtype), (x,), backward)


def window_weighted_sum(weights, padded, radius):
    """Per-pixel weighted sum over a (2r+1)^2 window of a pre-padded map.

    ``weights`` is (H, W, k^2); ``padded`` is (H + 2r, W + 2r, C).  Output is
    (H, W, C).  Fused like :func:`window_correlation`.
    """
    weights = as_var(weights)
    padded = as_var(padded)
    k = 2 * radius + 1
    _shape_check("window_weighted_sum",
                 weights.ndim == 3 and padded.ndim == 3
                 and weights.shape[2] == k * k
                 and padded.shape[0] == weights.shape[0] + 2 * radius
                 and padded.shape[1] == weights.shape[1] + 2 * radius,
                 weights.shape, padded.shape)
    h, w = weights.shape[0], weights.shape[1]
    if _njit is not None:
        wval = np.ascontiguousarray(weights.value)
        pval = np.ascontiguousarray(padded.value)
        out = _wsum_fwd_jit(wval, pval, radius)

        def backward(grad):
            gw, gp = _wsum_bwd_jit(wval, pval, np.ascontiguousarray(grad),
                                   radius, padded.needs_grad)
            return (gw if weights.needs_grad else None,
                    gp if padded.needs_grad else None)

        return Var(out, (weights, padded), backward)

    w4 = weights.value.reshape(h, w, k, k)
    view = np.lib.stride_tricks.sliding_window_view(padded.value, (k, k), axis=(0, 1))
    out = np.einsum("hwij,hwcij->hwc", w4, view, optimize=True)

    def backward(grad):
        gw = None
        if weights.needs_grad:
            gw = np.einsum("hwc,hwcij->hwij", grad, view, optimize=True).reshape(h, w, k * k)
        gp = None
        if padded.needs_grad:
            gp = np.zeros_like(padded.value)
            for dy in range(k):
                for dx in range(k):
                    gp[dy:dy + h, dx:dx + w] += w4[:, :, dy, dx, None] * grad
        return gw, gp

    return Var(out.astype(padded.value.dtype), (weights, padded), backward)


def concat(parts, axis=0):
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return Var(out, tuple(parts), backward)


def conv2d(x, weight, bias=None, mode="replicate"):
    """Same-size 2D convolution of an (H, W, Cin) map.

    ``weight`` has shape (k, k, Cin, Cout) with odd k; padding is replicate
    unless another mode is given.
    """
    x = as_var(x)
    weight = as_var(weight)
    _shape_check("conv2d", x.ndim == 3 and weight.ndim == 4 and weight.shape[0] == weight.shape[1]
                 and weight.shape[0] % 2 == 1 and weight.shape[2] == x.shape[2],
                 x.shape, weight.shape)
    h, w, cin = x.shape
    k = weight.shape[0]
    cout = weight.shape[3]
    patches = extract_patches(x, k // 2, mode=mode)          # (H, W, k*k, Cin)
    flat = reshape(patches, (h * w, k * k * cin))
    out = matmul(flat, reshape(weight, (k * k * cin, cout)))
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (h, w, cout))


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize of an (H, W, C) array (half-pixel centers, edges clamped)."""
    x = as_var(x)
    _shape_check("bilinear_resize", x.ndim == 3 and out_h > 0 and out_w > 0, x.shape)
    h, w = x.shape[0], x.shape[1]
    sy = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(x.value.dtype)[:, None, None]
    fx = (sx - x0).astype(x.value.dtype)[None, :, None]
    gy0 = np.broadcast_to(y0[:, None], (out_h, out_w))
    gy1 = np.broadcast_to(y1[:, None], (out_h, out_w))
    gx0 = np.broadcast_to(x0[None, :], (out_h, out_w))
    gx1 = np.broadcast_to(x1[None, :], (out_h, out_w))
    a = mul(gather2d(x, gy0, gx0), (1 - fy) * (1 - fx))
    b = mul(gather2d(x, gy0, gx1), (1 - fy) * fx)
    c = mul(gather2d(x, gy1, gx0), fy * (1 - fx))
    d = mul(gather2d(x, gy1, gx1), fy * fx)
    return add(add(a, b), add(c, d))


def nearest_resize(x, out_h, out_w):
    x = np.asarray(x.value if isinstance(x, Var) else x)
    h, w = x.shape[0], x.shape[1]
    iy = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    ix = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return x[iy[:, None], ix[None, :]]


def mse(a, b):
    a, b = as_var(a), as_var(b)
    _shape_check("mse", a.shape == b.shape, a.shape, b.shape)
    d = sub(a, b)
    return vmean(mul(d, d))


# ---------------------------------------------------------------------------
# backward pass & gradient checking


def backward(loss: Var):
    """Backpropagate from a scalar loss; returns {name: grad} for named Parameters.

    A Parameter the loss never touches keeps ``grad = None``; callers read it
    as zero via :func:`grad_or_zero`.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.value)}
    params = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                params[node.name] = node.grad
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.needs_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=p.value.dtype)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return params


def grad_or_zero(p: Parameter):
    return p.grad if p.grad is not None else np.zeros_like(p.value)


def zero_grads(params):
    for p in params:
        p.grad = None


def finite_difference_check(fn, params: dict, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a {name: Parameter} dict to a scalar Var.  Leaves are promoted
    to float64 so the difference quotient is not drowned by float32 rounding.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    leaves = {k: Parameter(np.asarray(v, dtype=np.float64), k) for k, v in params.items()}
    loss = fn(leaves)
    backward(loss)
    worst = 0.0
    for name, p in leaves.items():
        analytic = grad_or_zero(p)
        flat = p.value.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(leaves).value)
            flat[i] = orig - step
            lo = float(fn(leaves).value)
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * step)
        a = analytic.reshape(-1)
        # The 1e-6 floor keeps difference-quotient noise on near-zero
        # components from dominating the relative error.
        err = np.abs(a - num) / (np.maximum(np.abs(a), np.abs(num)) + 1e-6)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
