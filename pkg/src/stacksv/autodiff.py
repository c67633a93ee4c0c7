"""Minimal reverse-mode autodiff over NumPy arrays.

Every operation the embedding backend needs is defined here with an explicit
backward rule: elementwise math, broadcasted matmul, axis reductions,
concat/slice, softmax, batch norm, and same-padded dilated convolution (the
convolution inner loops are dispatched through ``kernels``, which selects the
compiled or pure backend at import).

Gradients accumulate: a node consumed twice receives the sum of both
upstream contributions.  ``grad_check`` compares the whole reverse pass
against central finite differences.
"""

import contextlib

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (used for eval-mode embedding extraction)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents",
                 "_backward", "_grad_owned")

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = ()
        self._backward = None
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    def backward(self, seed=None):
        if seed is None:
            seed = np.ones_like(self.data)
        order = _toposort(self)
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        self._grad_owned = True
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
            if node is not self and node._parents:
                node.grad = None  # free intermediate buffers early
                node._grad_owned = False

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _accum(t, g, own=False):
    """Accumulate a gradient contribution.

    ``own=True`` promises ``g`` is a fresh writable array no one else
    references.  A shared/viewed first contribution is never mutated; a
    second contribution reallocates instead.
    """
    if t.grad is None:
        t.grad = g
        t._grad_owned = own
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _make(data, parents, backward, op):
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, op=op)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _norm_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim} dimensions")
    return axis % ndim


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast to reach g.shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def constant(value, dtype=np.float64):
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(value):
    return Tensor(np.asarray(value), requires_grad=True, op="param")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        out = _make(a.data + b, (a,), None, "add")
        if out.requires_grad:
            out._backward = lambda g: _accum(a, _unbroadcast(g, a.data.shape))
        return out
    out = _make(a.data + b.data, (a, b), None, "add")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))
        out._backward = backward
    return out


def neg(a):
    out = _make(-a.data, (a,), None, "neg")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, -g, own=True)
    return out


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -b)
    return add(a, neg(b))


def mul(a, b):
    if not isinstance(b, Tensor):
        out = _make(a.data * b, (a,), None, "mul")
        if out.requires_grad:
            out._backward = lambda g: _accum(a, _unbroadcast(g * b, a.data.shape), own=True)
        return out
    out = _make(a.data * b.data, (a, b), None, "mul")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape), own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape), own=True)
        out._backward = backward
    return out


def div(a, b):
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    out = _make(a.data / b.data, (a, b), None, "div")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.data.shape), own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape), own=True)
        out._backward = backward
    return out


def relu(a):
    out = _make(np.maximum(a.data, 0), (a,), None, "relu")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * (a.data > 0), own=True)
    return out


def sigmoid(a):
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = _make(s, (a,), None, "sigmoid")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * (s * (1.0 - s)), own=True)
    return out


def tanh(a):
    t = np.tanh(a.data)
    out = _make(t, (a,), None, "tanh")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * (1.0 - t * t), own=True)
    return out


def exp(a):
    e = np.exp(a.data)
    out = _make(e, (a,), None, "exp")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * e, own=True)
    return out


def log(a):
    out = _make(np.log(a.data), (a,), None, "log")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g / a.data, own=True)
    return out


def sqrt(a):
    r = np.sqrt(a.data)
    out = _make(r, (a,), None, "sqrt")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g / (2.0 * r), own=True)
    return out


def square(a):
    out = _make(a.data * a.data, (a,), None, "square")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * (2.0 * a.data), own=True)
    return out


def clamp_min(a, floor):
    """max(a, floor); gradient passes only where a > floor."""
    out = _make(np.maximum(a.data, floor), (a,), None, "clamp_min")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * (a.data > floor), own=True)
    return out


def clip(a, lo, hi):
    """Gradient passes only strictly inside (lo, hi)."""
    out = _make(np.clip(a.data, lo, hi), (a,), None, "clip")
    if out.requires_grad:
        mask = (a.data > lo) & (a.data < hi)
        out._backward = lambda g: _accum(a, g * mask, own=True)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """np.matmul semantics, incl. batched broadcasting on leading axes."""
    out = _make(np.matmul(a.data, b.data), (a, b), None, "matmul")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accum(a, _unbroadcast(ga, a.data.shape), own=True)
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accum(b, _unbroadcast(gb, b.data.shape), own=True)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _restore_axes(g, axis, keepdims, shape):
    if keepdims or axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), None, "sum")
    if out.requires_grad:
        out._backward = lambda g: _accum(
            a, _restore_axes(g, axis, keepdims, a.data.shape))
    return out


def mean(a, axis=None, keepdims=False):
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), None, "mean")
    if out.requires_grad:
        if axis is None:
            n = a.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([a.data.shape[ax] for ax in axes]))
        out._backward = lambda g: _accum(
            a, _restore_axes(g / n, axis, keepdims, a.data.shape))
    return out


def max_(a, axis, keepdims=False):
    """Max over one axis.  Ties route the gradient to the lowest index."""
    axis = _norm_axis(axis, a.data.ndim)
    if a.data.shape[axis] == 0:
        raise ValueError("max over empty axis")
    if _GRAD_ENABLED and a.requires_grad:
        # single scan: argmax (lowest index on ties), then gather
        idx = np.argmax(a.data, axis=axis)
        m = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            m = np.squeeze(m, axis=axis)
        out = _make(m, (a,), None, "max")

        def backward(g):
            full = np.zeros_like(a.data)
            gk = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis=axis)
            _accum(a, full, own=True)
        out._backward = backward
        return out
    return _make(a.data.max(axis=axis, keepdims=keepdims), (a,), None, "max")


def std(a, axis, keepdims=False, eps=0.0):
    """Biased standard deviation over an axis (composite primitive)."""
    mu = mean(a, axis=axis, keepdims=True)
    var = mean(square(sub(a, mu)), axis=axis, keepdims=keepdims)
    return sqrt(add(var, eps)) if eps else sqrt(var)


def softmax(a, axis):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, (a,), None, "softmax")
    if out.requires_grad:
        def backward(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(a, s * (g - dot), own=True)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    out = _make(a.data.reshape(shape), (a,), None, "reshape")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def transpose(a, axes=None):
    out = _make(np.transpose(a.data, axes), (a,), None, "transpose")
    if out.requires_grad:
        inv = None if axes is None else np.argsort(axes)
        out._backward = lambda g: _accum(a, np.transpose(g, inv))
    return out


def concat(tensors, axis):
    axis = _norm_axis(axis, tensors[0].data.ndim)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis),
                tensors, None, "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    _accum(t, g[tuple(sl)])
        out._backward = backward
    return out


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    axis = _norm_axis(axis, a.data.ndim)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ValueError(
            f"slice [{start}, {start + length}) out of range for axis {axis} "
            f"of extent {a.data.shape[axis]}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    out = _make(a.data[tuple(sl)], (a,), None, "narrow")
    if out.requires_grad:
        def backward(g):
            full = np.zeros_like(a.data)
            full[tuple(sl)] = g
            _accum(a, full, own=True)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, kernel, dilation=(1, 1)):
    """Same-padded dilated cross-correlation.

    x: (Cin, H, W) or (B, Cin, H, W); kernel: (Cout, Cin, kh, kw).
    Output spatial dims equal input dims (zero padding).
    """
    if dilation[0] < 1 or dilation[1] < 1:
        raise ValueError(f"dilation must be >= (1, 1), got {dilation}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects a 3-d/4-d input and a 4-d kernel")
    if xd.shape[1] != kernel.data.shape[1]:
        raise ValueError(
            f"input has {xd.shape[1]} channels but kernel expects "
            f"{kernel.data.shape[1]}")
    xc = np.ascontiguousarray(xd)
    kc = np.ascontiguousarray(kernel.data)
    y = kernels.conv2d_forward(xc, kc, dilation)
    out = _make(y[0] if squeeze else y, (x, kernel), None, "conv2d")
    if out.requires_grad:
        def backward(g):
            g4 = np.ascontiguousarray(g[None] if squeeze else g)
            if x.requires_grad:
                gx = kernels.conv2d_backward_input(g4, kc, dilation, xc.shape[1])
                _accum(x, gx[0] if squeeze else gx, own=True)
            if kernel.requires_grad:
                gk = kernels.conv2d_backward_kernel(xc, g4, kc.shape, dilation)
                _accum(kernel, gk, own=True)
        out._backward = backward
    return out


def pointwise_conv(x, weight, bias=None):
    """1x1 convolution: per-position channel mix.  weight: (Cout, Cin)."""
    squeeze = x.data.ndim == 3
    x4 = reshape(x, (1,) + x.data.shape) if squeeze else x
    B, Cin, H, W = x4.data.shape
    if Cin != weight.data.shape[1]:
        raise ValueError(
            f"input has {Cin} channels but weight expects {weight.data.shape[1]}")
    flat = reshape(x4, (B, Cin, H * W))
    y = matmul(weight, flat)                      # (B, Cout, H*W)
    y = reshape(y, (B, weight.data.shape[0], H, W))
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1, 1)))
    return reshape(y, y.data.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

class BatchNormState:
    """Per-layer running statistics (not learnable)."""

    def __init__(self, channels, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self):
        other = BatchNormState(len(self.running_mean), self.running_mean.dtype)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


def batch_norm(x, gamma, beta, state, training, momentum=0.9, eps=1e-5,
               channel_axis=1):
    """Normalize over all axes except ``channel_axis``.

    Training mode uses biased batch statistics and updates
    ``state.running_* = momentum * running + (1 - momentum) * batch``.
    """
    nd = x.data.ndim
    channel_axis = channel_axis % nd
    axes = tuple(i for i in range(nd) if i != channel_axis)
    bshape = tuple(x.data.shape[channel_axis] if i == channel_axis else 1
                   for i in range(nd))
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    if training:
        m = x.data.mean(axis=axes, keepdims=True)
        v = x.data.var(axis=axes, keepdims=True)
        state.running_mean = (momentum * state.running_mean
                              + (1.0 - momentum) * m.reshape(-1))
        state.running_var = (momentum * state.running_var
                             + (1.0 - momentum) * v.reshape(-1))
    else:
        m = state.running_mean.reshape(bshape)
        v = state.running_var.reshape(bshape)

    ivar = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m) * ivar
    y = gam * xhat + bet
    out = _make(y, (x, gamma, beta), None, "batch_norm")
    if out.requires_grad:
        n = int(np.prod([x.data.shape[i] for i in axes]))

        def backward(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=axes), own=True)
            if beta.requires_grad:
                _accum(beta, g.sum(axis=axes), own=True)
            if x.requires_grad:
                gxhat = g * gam
                if training:
                    s1 = gxhat.sum(axis=axes, keepdims=True)
                    s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
                    gx = ivar / n * (n * gxhat - s1 - xhat * s2)
                else:
                    gx = gxhat * ivar
                _accum(x, gx, own=True)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# parameters, primitive registry, gradient checking
# ---------------------------------------------------------------------------

class ParamStore:
    """Named learnable parameters with deterministic iteration order."""

    def __init__(self):
        self._params = {}

    def register(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = value if isinstance(value, Tensor) else parameter(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def total_count(self):
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None
            t._grad_owned = False

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, arrays):
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


def primitive_suite():
    """Differentiable primitives with registered backward rules."""
    return {
        "add": add,
        "multiply": mul,
        "matmul": matmul,
        "relu": relu,
        "tanh": tanh,
        "sigmoid": sigmoid,
        "softmax": softmax,
        "batch_norm": batch_norm,
        "mean": mean,
        "std": std,
        "max": max_,
        "sum": sum_,
        "concat": concat,
        "slice": narrow,
        "sqrt": sqrt,
        "square": square,
        "conv2d": conv2d,
        "pointwise_conv": pointwise_conv,
    }


def grad_check(scalar_fn, params, eps=1e-5, max_entries_per_param=None,
               rng=None, refine_threshold=None, floor=1e-8):
    """Worst relative error between reverse-mode and central differences.

    ``scalar_fn`` must be a deterministic closure over ``params`` returning a
    scalar Tensor.  Every parameter is checked; entries within a parameter
    may be subsampled via ``max_entries_per_param``.  Caller is responsible
    for keeping inputs away from non-differentiable points (e.g. ReLU at 0).

    With ``refine_threshold`` set, an entry whose error exceeds it is
    re-measured at eps/10, eps/100 and eps/1000 and the best result kept:
    a central difference that straddles a ReLU/argmax kink is meaningless
    and shrinking eps steps off the kink, while a genuinely wrong gradient
    stays wrong at every step size.

    ``floor`` is the denominator floor of the relative error
    |a - n| / max(|a|, |n|, floor).  Raising it declares gradients below
    that magnitude to be compared absolutely at that scale (central
    differences cannot resolve entries much smaller than the rounding
    noise of the loss).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params.zero_grad()
    y = scalar_fn()
    if not np.isfinite(y.data):
        raise FloatingPointError("scalar function produced a non-finite value")
    y.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in params.items()}

    def measure(flat, i, a, name, e):
        orig = flat[i]
        flat[i] = orig + e
        fp = float(scalar_fn().data)
        flat[i] = orig - e
        fm = float(scalar_fn().data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"non-finite value while perturbing {name}[{i}]")
        numeric = (fp - fm) / (2.0 * e)
        return abs(a - numeric) / max(abs(a), abs(numeric), floor)

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            r = rng if rng is not None else np.random.default_rng(0)
            idxs = r.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            a = analytic[name].reshape(-1)[i]
            rel = measure(flat, i, a, name, eps)
            if refine_threshold is not None and rel > refine_threshold:
                for smaller in (eps / 10.0, eps / 100.0, eps / 1000.0):
                    rel = min(rel, measure(flat, i, a, name, smaller))
                    if rel <= refine_threshold:
                        break
            worst = max(worst, rel)
    return worst
