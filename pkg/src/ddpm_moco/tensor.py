"""Dense tensors with a closed set of differentiable operations.

Every operation is a plain function that returns a new, immutable :class:`Tensor`.
When any input requires a gradient, the result remembers its parents and a
closure mapping the output gradient to input gradients. :func:`backward` walks
that implicit graph in reverse topological order.

Gradients are returned as plain ``numpy`` arrays keyed the same way as the
leaves that were asked for, so training loops can keep parameters as
``dict[str, np.ndarray]`` and wrap them in leaves only for the forward pass.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from typing import Any

import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An immutable n-d array, optionally tracked for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data: Any, requires_grad: bool = False, *, _check: bool = True):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if _check and not np.isfinite(arr).all():
            raise NumericError("tensor contains NaN or Inf")
        # read-only view: the caller's array keeps its own flags
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, _check=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{grad})"

    # operator sugar; each maps onto one op of the suite
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis, keepdims)


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _lift(x: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data, _check=False)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _node(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# convolution and resampling


def _im2col(xc: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Channel-major padded input (c, n, H, W) -> (c*kh*kw, n*ho*wo) patch matrix."""
    c, n = xc.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xc.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (out, in, kh, kw) weights, zero padding."""
    x, w = _lift(x), _lift(w)
    if stride not in (1, 2):
        raise ParameterError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    p, s = padding, stride
    if h + 2 * p < kh or wd + 2 * p < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    ho, wo = (h + 2 * p - kh) // s + 1, (wd + 2 * p - kw) // s + 1
    xpc = np.zeros((cin, n, h + 2 * p, wd + 2 * p), dtype=x.dtype)
    xpc[:, :, p : p + h, p : p + wd] = x.data.transpose(1, 0, 2, 3)
    cols2d = _im2col(xpc, kh, kw, s, ho, wo)
    w2d = w.data.reshape(cout, -1)
    out = (w2d @ cols2d).reshape(cout, n, ho, wo)
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = _lift(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
        out += b.data[:, None, None, None]
        parents = (x, w, b)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    # input gradient = correlation of the dilated, padded output gradient with
    # the spatially flipped, in/out-swapped kernel
    w_flip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, -1)
    rem_h = (h + 2 * p - kh) - s * (ho - 1)
    rem_w = (wd + 2 * p - kw) - s * (wo - 1)

    def backward(g):
        gc = g.transpose(1, 0, 2, 3)
        g2d = gc.reshape(cout, -1)
        gw = (g2d @ cols2d.T).reshape(cout, cin, kh, kw)
        lo_h, lo_w = kh - 1 - p, kw - 1 - p
        dil = np.zeros((cout, n, s * (ho - 1) + 1 + rem_h, s * (wo - 1) + 1 + rem_w), dtype=g.dtype)
        dil[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s] = gc
        # pad by k-1-p on both sides, or crop when padding exceeded k-1
        ph, pw = max(lo_h, 0), max(lo_w, 0)
        gpad = np.pad(dil, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        ch, cw = max(-lo_h, 0), max(-lo_w, 0)
        gpad = gpad[:, :, ch : gpad.shape[2] - ch, cw : gpad.shape[3] - cw]
        gx = (w_flip @ _im2col(gpad, kh, kw, 1, h, wd)).reshape(cin, n, h, wd)
        gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        if len(parents) == 3:
            return gx, gw, g2d.sum(axis=1)
        return gx, gw

    return _node(out, parents, backward, "conv2d")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _node(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2x")


def avg_pool2x2(x) -> Tensor:
    x = _lift(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avg_pool2x2 expects NCHW with even H, W, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return ((g * 0.25).repeat(2, axis=2).repeat(2, axis=3),)

    return _node(out, (x,), backward, "avg_pool2x2")


def global_avg_pool(x) -> Tensor:
    """(n, c, h, w) -> (n, c)."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), shape).copy(),)

    return _node(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def silu(x) -> Tensor:
    x = _lift(x)
    s = _sigmoid(x.data)
    xd = x.data
    return _node(xd * s, (x,), lambda g: (g * s * (1 + xd * (1 - s)),), "silu")


def group_norm(x, gamma, beta, groups: int = 4, eps: float = 1e-5) -> Tensor:
    """Group normalization over (C/groups, H, W) blocks with per-channel affine."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine params must have shape ({c},)")
    xr = x.data.reshape(n, groups, -1)
    mu = xr.mean(axis=-1, keepdims=True)
    var = xr.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xr - mu) * inv_std
    xhat4 = xhat.reshape(n, c, h, w)
    gd = gamma.data
    out = xhat4 * gd[None, :, None, None] + beta.data[None, :, None, None]
    m = xr.shape[-1]

    def backward(g):
        ggamma = (g * xhat4).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gd[None, :, None, None]).reshape(n, groups, -1)
        dx = (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx.reshape(n, c, h, w), ggamma, gbeta

    return _node(out, (x, gamma, beta), backward, "group_norm")


def softmax(x) -> Tensor:
    """Softmax along the last axis."""
    x = _lift(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward, "softmax")


def logsumexp(x) -> Tensor:
    """log(sum(exp(x))) along the last axis; the axis is dropped."""
    x = _lift(x)
    if x.shape[-1] == 0:
        raise ShapeError("logsumexp over an empty axis")
    mx = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - mx)
    tot = e.sum(axis=-1, keepdims=True)
    out = (np.log(tot) + mx)[..., 0]
    sm = e / tot
    return _node(out, (x,), lambda g: (sm * g[..., None],), "logsumexp")


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis row to unit Euclidean norm."""
    x = _lift(x)
    norm = np.maximum(np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)), eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _node(y, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = tuple(_lift(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, ts, backward, "concat")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _lift(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _lift(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for ndim {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# losses


def mse(a, b) -> Tensor:
    """Mean squared error over every element."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    k = 2.0 / diff.size
    return _node(np.asarray((diff * diff).mean()), (a, b), lambda g: (g * k * diff, -g * k * diff), "mse")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = _lift(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ParameterError("softmax_cross_entropy: label out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    tot = e.sum(axis=1, keepdims=True)
    logp = z - np.log(tot)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean())
    probs = e / tot

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _node(out, (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Tracked nodes reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor]):
    """Gradients of a scalar ``loss`` with respect to the leaves in ``wrt``.

    Returns a dict (for a mapping) or a list (for a sequence) of arrays shaped
    like the corresponding leaves. Leaves the loss does not depend on get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape, dtype=loss.dtype)
        for node in reversed(topological_order(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def pick(t: Tensor) -> np.ndarray:
        g = grads.get(id(t))
        return np.zeros(t.shape, dtype=t.dtype) if g is None else np.asarray(g).reshape(t.shape)

    if isinstance(wrt, Mapping):
        return {name: pick(t) for name, t in wrt.items()}
    return [pick(t) for t in wrt]


def leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap a parameter store in fresh leaf tensors."""
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``coords`` restricts the check to a subset of flat indices (default: all).
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    (analytic,) = backward(f(leaf), [leaf])
    analytic = analytic.reshape(-1)
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst


def grad_check_params(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    per_tensor: int | None = None,
    seed: int = 0,
) -> float:
    """:func:`grad_check` over a named parameter store.

    With ``per_tensor`` set, only that many randomly chosen coordinates of each
    tensor are perturbed; the analytic gradient is always computed in full.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    rng = np.random.default_rng(seed)
    tracked = leaves(params)
    grads = backward(f(tracked), tracked)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        if per_tensor is None or per_tensor >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=per_tensor, replace=False)
        ga = grads[name].reshape(-1)
        for i in idx:
            probe = dict(params)
            bumped = flat.copy()
            bumped[i] += h
            probe[name] = bumped.reshape(value.shape)
            fp = f(leaves(probe, requires_grad=False)).item()
            bumped[i] -= 2 * h
            probe[name] = bumped.reshape(value.shape)
            fm = f(leaves(probe, requires_grad=False)).item()
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(ga[i] - numeric) / max(1.0, abs(ga[i])))
    return worst
