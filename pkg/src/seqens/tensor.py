"""Dense tensors with reverse-mode automatic differentiation.

Everything trainable in this package flows through the small op set below:
conv2d, relu, channel softmax, bilinear resize, affine modulation, channel
concatenation and per-pixel cross entropy, plus the elementwise glue needed
to compose them. Gradients are recorded on an explicit :class:`Graph` tape
and replayed in reverse topological order by :func:`backward`.

Training runs in float32; :func:`grad_check` re-executes in float64 so the
finite-difference oracle is not limited by single precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Invalid use of the autodiff tape (e.g. double backward)."""


class Tensor:
    """Dense N-d array of reals with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward_fn: object  # callable(grad_out) -> tuple of grads aligned with inputs


class Graph:
    """Tape of executed operations, replayable exactly once in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self


_GRAPH_STACK: list[Graph] = []


def _active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    g = _active_graph()
    if g is not None and any(t.requires_grad for t in inputs if isinstance(t, Tensor)):
        out.requires_grad = True
        g.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate grads of every requires_grad leaf with d(loss)/d(leaf)."""
    if graph.consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise GraphError("backward requires a scalar loss")
    produced = {id(n.out) for n in graph.nodes}
    if id(loss) not in produced:
        raise GraphError("loss was not produced by this graph")
    graph.consumed = True

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(graph.nodes):
        gout = flowing.pop(id(node.out), None)
        if gout is None:
            continue
        gins = node.backward_fn(gout)
        for inp, gin in zip(node.inputs, gins):
            if gin is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if id(inp) in produced:
                key = id(inp)
                if key in flowing:
                    flowing[key] = flowing[key] + gin
                else:
                    flowing[key] = gin
            else:
                key = id(inp)
                if key in leaf_grads:
                    leaf_grads[key] = (inp, leaf_grads[key][1] + gin)
                else:
                    leaf_grads[key] = (inp, gin)
    for t, g in leaf_grads.values():
        t.accumulate_grad(g)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + a.dtype.type(c))
    return _record(out, (a,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(dtype=a.dtype), dtype=a.dtype))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, x.dtype.type(0)))
    mask = x.data > 0  # subgradient at 0 is 0
    return _record(out, (x,), lambda g: (g * mask,))


def affine_modulate(x: Tensor, sigma: Tensor, beta: Tensor) -> Tensor:
    if not (x.shape == sigma.shape == beta.shape):
        raise ShapeError(
            f"affine_modulate: shapes differ {x.shape}, {sigma.shape}, {beta.shape}"
        )
    out = Tensor(sigma.data * x.data + beta.data)
    return _record(out, (x, sigma, beta), lambda g: (g * sigma.data, g * x.data, g))


def concat_channels(xs: list[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ShapeError(f"concat_channels: incompatible shape {t.shape}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return _record(out, tuple(xs), bwd)


# ---------------------------------------------------------------------------
# conv2d


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding. x: (N,Cin,H,W), weight: (Cout,Cin,kh,kw)."""
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel dims must be odd")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    # accumulate one kernel offset at a time; each term is a channel matmul
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            out += np.einsum("oc,nchw->nohw", weight.data[:, :, i, j], patch, optimize=True)
    out += bias.data[None, :, None, None]
    out_t = Tensor(out)

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3))
        gw = np.zeros_like(weight.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch, optimize=True)
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.einsum(
                    "oc,nohw->nchw", weight.data[:, :, i, j], g, optimize=True
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    return _record(out_t, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# channel softmax


def channel_softmax(logits: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1 of an (N,C,H,W) tensor, max-stabilized."""
    if logits.data.ndim != 4 or logits.shape[1] < 2:
        raise ShapeError("channel_softmax expects (N,C,H,W) with C >= 2")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return ((g - dot) * p,)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centers, clamped borders)

_RESIZE_CACHE: dict[tuple[int, int, int, int], sp.csr_matrix] = {}


def _resize_matrix(h: int, w: int, oh: int, ow: int) -> sp.csr_matrix:
    key = (h, w, oh, ow)
    mat = _RESIZE_CACHE.get(key)
    if mat is not None:
        return mat

    def axis_weights(size, out_size):
        src = (np.arange(out_size, dtype=np.float64) + 0.5) * (size / out_size) - 0.5
        src = np.clip(src, 0.0, size - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, size - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, fy = axis_weights(h, oh)
    xlo, xhi, fx = axis_weights(w, ow)
    rows, cols, vals = [], [], []
    out_idx = np.arange(oh * ow)
    for ys, wy in ((ylo, 1.0 - fy), (yhi, fy)):
        for xs, wx in ((xlo, 1.0 - fx), (xhi, fx)):
            rows.append(out_idx)
            cols.append((ys[:, None] * w + xs[None, :]).ravel())
            vals.append((wy[:, None] * wx[None, :]).ravel())
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(oh * ow, h * w),
    )
    mat.sum_duplicates()
    _RESIZE_CACHE[key] = mat
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: target dims must be >= 1")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        out = Tensor(x.data.copy())
        return _record(out, (x,), lambda g: (g,))
    mat = _resize_matrix(h, w, out_h, out_w)
    flat = x.data.reshape(n * c, h * w)
    out = Tensor((flat @ mat.T.astype(x.dtype.type)).reshape(n, c, out_h, out_w).astype(x.dtype))

    def bwd(g):
        gflat = g.reshape(n * c, out_h * out_w)
        return ((gflat @ mat.astype(x.dtype.type)).reshape(n, c, h, w).astype(x.dtype),)

    return _record(out, (x,), bwd)


def resize_nearest(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the trailing two axes (labels, not differentiable)."""
    h, w = data.shape[-2:]
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), 0, h - 1)
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), 0, w - 1)
    return data[..., ys[:, None], xs[None, :]]


# ---------------------------------------------------------------------------
# loss

LOG_CLAMP = 1e-12


def pixel_cross_entropy(p: Tensor, y: np.ndarray, ignore_label: int | None = None) -> Tensor:
    """Mean over non-ignored pixels of -log p[y]. p: (N,C,H,W), y: (N,H,W) ints."""
    n, c, h, w = p.shape
    y = np.asarray(y)
    if y.shape != (n, h, w):
        raise ShapeError(f"pixel_cross_entropy: labels {y.shape} vs probs {p.shape}")
    valid = np.ones_like(y, dtype=bool) if ignore_label is None else (y != ignore_label)
    if np.any((y[valid] < 0) | (y[valid] >= c)):
        raise ShapeError("pixel_cross_entropy: label out of range")
    n_valid = int(valid.sum())
    if n_valid == 0:
        # empty-mean convention: loss 0, no gradient
        out = Tensor(np.asarray(0.0, dtype=p.dtype))
        return _record(out, (p,), lambda g: (np.zeros_like(p.data),))

    ys = np.where(valid, y, 0)
    ni, hi, wi = np.meshgrid(np.arange(n), np.arange(h), np.arange(w), indexing="ij")
    picked = p.data[ni, ys, hi, wi]
    clamped = np.maximum(picked, p.dtype.type(LOG_CLAMP))
    loss = -(np.log(clamped) * valid).sum(dtype=np.float64) / n_valid
    out = Tensor(np.asarray(loss, dtype=p.dtype))

    def bwd(g):
        gp = np.zeros_like(p.data)
        coeff = np.where(valid & (picked >= LOG_CLAMP), -1.0 / (clamped * n_valid), 0.0)
        gp[ni, ys, hi, wi] = (coeff * float(g)).astype(p.dtype)
        return (gp,)

    return _record(out, (p,), bwd)


def all_pixels_ignored(y: np.ndarray, ignore_label: int | None) -> bool:
    return ignore_label is not None and bool(np.all(y == ignore_label))


# ---------------------------------------------------------------------------
# finite-difference gradient oracle


def grad_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Runs both sides in float64 regardless of x's dtype.
    """
    if not (0 < eps <= 1e-2):
        raise ValueError("grad_check: eps must lie in (0, 1e-2]")
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Graph() as g:
        loss = f(x64)
    if loss.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    backward(g, loss)
    g_ad = np.zeros_like(x64.data) if x64.grad is None else x64.grad

    flat = x64.data.ravel()
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(Tensor(x64.data.astype(np.float64))).data)
        flat[i] = orig - eps
        f_minus = float(f(Tensor(x64.data.astype(np.float64))).data)
        flat[i] = orig
        g_fd[i] = (f_plus - f_minus) / (2.0 * eps)
    g_fd = g_fd.reshape(x64.data.shape)
    denom = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class LrSchedule:
    """Polynomial decay: lr(t) = lr0 * (1 - t/total_steps)^power."""

    lr0: float
    total_steps: int
    power: float = 0.9

    def __post_init__(self):
        if self.lr0 <= 0 or self.total_steps <= 0 or self.power <= 0:
            raise ValueError("LrSchedule fields must be positive")


def poly_lr_at(sched: LrSchedule, step: int) -> float:
    step = min(max(step, 0), sched.total_steps)
    return sched.lr0 * (1.0 - step / sched.total_steps) ** sched.power


@dataclass
class SgdMomentum:
    """SGD with momentum and decoupled-from-nothing classic weight decay."""

    params: list[Tensor]
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not self.velocity:
            self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        for p, v in zip(self.params, self.velocity):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            v *= p.data.dtype.type(self.momentum)
            v += g
            if self.weight_decay:
                v += p.data.dtype.type(self.weight_decay) * p.data
            p.data -= p.data.dtype.type(lr) * v
