"""A small NCHW tensor type with reverse-mode differentiation.

Only the operations needed by the depth networks and their loss are
provided: convolution (strided, dilated, transposed), ELU, dropout,
channel concatenation, nearest upsampling, and a handful of elementwise
and reduction ops. Storage is float32 by default; float64 tensors are used
for gradient checks.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

PADDING_MODES = ("sphere", "zero")
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf needing it."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topological(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.dtype, copy=True)
                else:
                    parent.grad += g
            if node._parents:
                node.grad = None  # free intermediate buffers; leaves keep theirs


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, dtype=np.float32, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward):
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _check_same(x, y, what):
    if x.shape != y.shape:
        raise ValueError(f"{what}: shape mismatch {x.shape} vs {y.shape}")


# elementwise and reductions ---------------------------------------------

def add(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y, x.dtype if isinstance(x, Tensor) else None)
    _check_same(x, y, "add")
    return _result(x.data + y.data, (x, y), lambda g: (g, g))


def sub(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y, x.dtype if isinstance(x, Tensor) else None)
    _check_same(x, y, "sub")
    return _result(x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y, x.dtype if isinstance(x, Tensor) else None)
    _check_same(x, y, "mul")
    xd, yd = x.data, y.data
    return _result(xd * yd, (x, y), lambda g: (g * yd, g * xd))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2 * g * xd,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.sum(x.data, dtype=x.dtype).reshape(()), (x,), lambda g: (np.broadcast_to(g, shape),))


def roll(x: Tensor, shift: int, axis: int = -1) -> Tensor:
    return _result(np.roll(x.data, shift, axis), (x,), lambda g: (np.roll(g, -shift, axis),))


def crop(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` along ``axis``."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _result(x.data[index], (x,), backward)


def elu(x: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise."""
    xd = x.data
    neg = xd <= 0
    out = np.where(neg, np.expm1(np.minimum(xd, 0)), xd)
    return _result(out, (x,), lambda g: (g * np.where(neg, out + 1, 1).astype(g.dtype),))


def dropout_mask(shape, rate: float, seed: int, layer_id: int, step: int) -> np.ndarray:
    """Keep-mask from a counter-based generator keyed by (seed, layer id, step)."""
    bits = np.random.Philox(key=(int(seed) % 2**64) | (int(layer_id) << 64), counter=[0, 0, 0, int(step)])
    return np.random.Generator(bits).random(shape) >= rate


def dropout(x: Tensor, rate: float, seed: int = 0, train: bool = False, layer_id: int = 0, step: int = 0) -> Tensor:
    """Inverted dropout; identity unless ``train`` is set."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = dropout_mask(x.shape, rate, seed, layer_id, step)
    factor = (keep / (1.0 - rate)).astype(x.dtype)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def concat(xs, axis: int = 1) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _result(np.concatenate([t.data for t in xs], axis), xs, lambda g: tuple(np.split(g, sizes, axis)))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


# convolution --------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer."""
    in_ch: int
    out_ch: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: str = "sphere"
    transpose: bool = False

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or self.stride < 1 or self.dilation < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")
        if self.transpose and (self.stride != 2 or self.dilation != 1):
            raise ValueError("transposed convolutions support stride 2, dilation 1 only")

    @property
    def weight_shape(self):
        kh, kw = self.kernel
        if self.transpose:
            return (self.in_ch, self.out_ch, kh, kw)
        return (self.out_ch, self.in_ch, kh, kw)

    @property
    def n_params(self) -> int:
        return int(np.prod(self.weight_shape)) + self.out_ch


def same_padding(size: int, k: int, stride: int, dilation: int):
    """Output size ceil(size/stride) and (before, after) pads; extra pad goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + (k - 1) * dilation + 1 - size, 0)
    return out, total // 2, total - total // 2


def _fold_columns(gp: np.ndarray, left: int, width: int) -> np.ndarray:
    """Sum gradients of circularly padded columns back onto ``width`` columns."""
    lead = -(-left // width) * width - left
    total = lead + gp.shape[-2]
    trail = -(-total // width) * width - total
    padded = np.pad(gp, [(0, 0), (0, 0), (lead, trail), (0, 0)])
    n, h, _, c = gp.shape
    return padded.reshape(n, h, -1, width, c).sum(axis=2)


class _Conv:
    """Numpy-level correlation on NCHW arrays with explicit padding.

    Output row ``y`` reads input rows ``y*stride - top + i*dilation``;
    columns likewise, wrapping circularly under sphere padding. Internally
    the patch matrix is channels-last, which keeps the GEMM shapes fast.
    """

    def __init__(self, xd, wd, pads, stride, dilation, padding):
        n, c, h, w = xd.shape
        cout, _, kh, kw = wd.shape
        top, bottom, left, right = pads
        ho = (h + top + bottom - (kh - 1) * dilation - 1) // stride + 1
        wo = (w + left + right - (kw - 1) * dilation - 1) // stride + 1
        # negative pads crop (a shift), applied after padding the other side
        pt, pb, pl, pr = (max(p, 0) for p in pads)
        xp = np.pad(xd.transpose(0, 2, 3, 1), ((0, 0), (pt, pb), (0, 0), (0, 0)))
        xp = np.pad(xp, ((0, 0), (0, 0), (pl, pr), (0, 0)), mode="wrap" if padding == "sphere" else "constant")
        self.full = xp.shape
        self.crop = (max(-top, 0), xp.shape[1] - max(-bottom, 0), max(-left, 0), xp.shape[2] - max(-right, 0))
        r0, r1, c0, c1 = self.crop
        self.xp = np.ascontiguousarray(xp[:, r0:r1, c0:c1])
        self.wd = wd
        self.geom = (n, c, h, w, cout, kh, kw, ho, wo, pt, pl, stride, dilation, padding)
        sn, sh, sw, sc = self.xp.strides
        view = np.lib.stride_tricks.as_strided(
            self.xp,
            shape=(n, ho, wo, kh, kw, c),
            strides=(sn, sh * stride, sw * stride, sh * dilation, sw * dilation, sc),
            writeable=False,
        )
        self.cols = view.reshape(n * ho * wo, kh * kw * c)

    def forward(self):
        n, c, h, w, cout, kh, kw, ho, wo = self.geom[:9]
        w2 = self.wd.transpose(0, 2, 3, 1).reshape(cout, -1)
        out = self.cols @ w2.T
        return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(self, g, need_x=True, need_w=True):
        n, c, h, w, cout, kh, kw, ho, wo, top, left, stride, dil, padding = self.geom
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gx = gw = None
        if need_w:
            gw = (g2.T @ self.cols).reshape(cout, kh, kw, c).transpose(0, 3, 1, 2)
        if need_x:
            wt = np.ascontiguousarray(self.wd.transpose(2, 3, 0, 1))  # (kh, kw, out, in)
            gp = np.zeros(self.xp.shape, dtype=g.dtype)
            hspan, wspan = (ho - 1) * stride + 1, (wo - 1) * stride + 1
            for i in range(kh):
                for j in range(kw):
                    gtap = (g2 @ wt[i, j]).reshape(n, ho, wo, c)
                    gp[:, i * dil:i * dil + hspan:stride, j * dil:j * dil + wspan:stride] += gtap
            r0, r1, c0, c1 = self.crop
            if (r0, r1, c0, c1) != (0, self.full[1], 0, self.full[2]):
                whole = np.zeros(self.full, dtype=gp.dtype)
                whole[:, r0:r1, c0:c1] = gp
                gp = whole
            gp = gp[:, top:top + h]
            if padding == "sphere":
                gp = _fold_columns(gp, left, w)
            else:
                gp = gp[:, :, left:left + w]
            gx = np.ascontiguousarray(gp.transpose(0, 3, 1, 2))
        return gx, gw


def _check_conv_args(x, w, b, padding, in_axis):
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[in_axis]:
        raise ValueError(f"input {x.shape} incompatible with weights {w.shape}")
    out_ch = w.shape[1 - in_axis]
    if b is not None and b.shape != (out_ch,):
        raise ValueError(f"bias {b.shape} does not match weights {w.shape}")
    if padding not in PADDING_MODES:
        raise ValueError(f"padding must be one of {PADDING_MODES}, got {padding!r}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, dilation: int = 1, padding: str = "sphere") -> Tensor:
    """Cross-correlation with "same" sizing: output is ceil(in / stride).

    ``padding="sphere"`` wraps columns circularly and zero-pads rows;
    ``"zero"`` zero-pads both. Weights are (out, in, kh, kw).
    """
    _check_conv_args(x, w, b, padding, 1)
    _, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    _, top, bottom = same_padding(h, kh, stride, dilation)
    _, left, right = same_padding(wd, kw, stride, dilation)
    conv = _Conv(x.data, w.data, (top, bottom, left, right), stride, dilation, padding)
    out = conv.forward()
    if b is not None:
        out += b.data[:, None, None]
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        gx, gw = conv.backward(g, x.requires_grad, w.requires_grad)
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def _phase_taps(k: int, parity: int):
    """Kernel taps feeding output positions of one parity in a stride-2
    transposed conv, ordered by input offset, plus (before, after) pads."""
    off = k // 2
    taps = [a for a in range(k) if (a - off - parity) % 2 == 0]
    if not taps:
        return [], 0, 0
    deltas = [(parity + off - a) // 2 for a in taps]
    order = np.argsort(deltas)
    taps = [taps[i] for i in order]
    deltas = sorted(deltas)
    return taps, -deltas[0], deltas[-1]


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, padding: str = "sphere") -> Tensor:
    """Fractionally strided convolution; output is ``stride`` times the input.

    Weights are (in, out, kh, kw). Input (i, j) scatters ``w[:, :, a, c]`` to
    output ``(2*i + a - kh//2, 2*j + c - kw//2)``; columns wrap under sphere
    padding, rows falling outside are dropped. Evaluated as four stride-1
    correlations, one per output parity.
    """
    if stride != 2:
        raise ValueError("conv_transpose2d supports stride 2 only")
    _check_conv_args(x, w, b, padding, 0)
    n, _, h, wd = x.shape
    cin, cout, kh, kw = w.shape
    phases = []
    for r in range(2):
        rtaps, top, bottom = _phase_taps(kh, r)
        for c in range(2):
            ctaps, left, right = _phase_taps(kw, c)
            if not rtaps or not ctaps:
                continue  # this parity receives no taps
            sub = w.data[:, :, rtaps][:, :, :, ctaps].transpose(1, 0, 2, 3)
            phases.append((r, c, rtaps, ctaps, _Conv(x.data, np.ascontiguousarray(sub), (top, bottom, left, right), 1, 1, padding)))
    out = np.zeros((n, cout, 2 * h, 2 * wd), dtype=x.dtype)
    for r, c, _, _, conv in phases:
        out[:, :, r::2, c::2] = conv.forward()
    if b is not None:
        out += b.data[:, None, None]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype) if x.requires_grad else None
        gw = np.zeros(w.shape, dtype=g.dtype) if w.requires_grad else None
        for r, c, rtaps, ctaps, conv in phases:
            px, pw = conv.backward(np.ascontiguousarray(g[:, :, r::2, c::2]), x.requires_grad, w.requires_grad)
            if gx is not None:
                gx += px
            if gw is not None:
                gw[np.ix_(range(cin), range(cout), rtaps, ctaps)] += pw.transpose(1, 0, 2, 3)
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


# gradient checking ------------------------------------------------------

def grad_check(loss_fn, params, eps: float = 1e-5, floor: float = 1e-6,
               samples: int | None = None, seed: int = 0) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``loss_fn()`` must rebuild the graph from ``params`` (float64 tensors) and
    return a scalar. The relative error of each entry is
    ``|a - n| / max(|a|, |n|, floor * max(1, |loss|))``; the floor tracks the
    loss scale because that sets the rounding noise of the differences. With
    ``samples`` set, only that many entries per tensor (chosen from ``seed``)
    are probed.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    base = loss_fn()
    floor = floor * max(1.0, abs(base.item()))
    base.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            ga = a.reshape(-1)
            idx = range(flat.size)
            if samples is not None and flat.size > samples:
                idx = np.sort(rng.choice(flat.size, samples, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss_fn().item()
                flat[i] = orig - eps
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
                worst = max(worst, err)
    return worst
