"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every primitive returns a new :class:`Tensor`. When any input requires a
gradient the primitive appends a node (inputs, output, backward rule) to the
active :class:`Tape`. ``backward`` walks the tape in reverse from the root and
accumulates (``+=``) into the ``grad`` slot of every leaf that requires one.

Shapes are never broadcast implicitly. The two exceptions are ``scale`` (a
python scalar) and ``add`` with a per-channel bias whose shape equals the last
axis of the other operand.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
NORM_FLOOR = 1e-8


class ShapeError(ValueError):
    pass


class NumericOverflowError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as primitives run, so the list is already in
    topological order. Use as a context manager to make it the active tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        node = _Node(out, tuple(inputs), backward)
        # weak link back to the tape: a strong one would form a tape <-> tensor
        # cycle and keep every step's activations alive until cyclic GC runs
        out._node = (weakref.ref(self), len(self.nodes))
        self.nodes.append(node)

    def reset(self):
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state().tapes.remove(self)
        return False


# the active-tape stack and the grad switch are per thread, so inference can
# run on worker threads while the main thread records
_LOCAL = threading.local()


def _state():
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
        _LOCAL.grad = [True]
        _LOCAL.default = Tape()
    return _LOCAL


def current_tape() -> Tape:
    st = _state()
    return st.tapes[-1] if st.tapes else st.default


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording anything on the tape."""
    st = _state()
    st.grad.append(False)
    try:
        yield
    finally:
        st.grad.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(name, data, inputs, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericOverflowError(f"{name}: non-finite output")
    needs = _state().grad[-1] and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_tape().record(out, inputs, backward)
    return out


def _shape_error(name, *tensors, why=""):
    shapes = ", ".join(str(tuple(t.shape)) for t in tensors)
    msg = f"{name}: incompatible shapes {shapes}"
    if why:
        msg += f" ({why})"
    return ShapeError(msg)


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    """``a @ b`` with a 2-D ``b`` shared over the leading axes of ``a``, or
    matching batch axes on both sides."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a, b)
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise _shape_error("matmul", a, b, why="batch axes differ")
    A, B = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if shared:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _finish("matmul", A @ B, (a, b), backward)


def conv1x1(x, w, b=None) -> Tensor:
    """Pointwise convolution on a channels-last map: ``x (..., Cin)`` with
    ``w (Cin, Cout)`` and optional bias ``b (Cout,)``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise _shape_error("conv1x1", x, w)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise _shape_error("conv1x1", x, w, b, why="bias must be (Cout,)")
        inputs.append(b)
    X, W = x.data, w.data
    flat = X.reshape(-1, X.shape[-1])
    out = (flat @ W).reshape(X.shape[:-1] + (W.shape[1],))
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [(g2 @ W.T).reshape(X.shape), flat.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _finish("conv1x1", out, inputs, backward)


def conv2d(x, w, stride=1, pad=0) -> Tensor:
    """Dense k x k convolution on ``x (B, H, W, Cin)`` with ``w (k, k, Cin, Cout)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or x.shape[-1] != w.shape[2]:
        raise _shape_error("conv2d", x, w)
    k = w.shape[0]
    X = x.data
    n, h, wd, c = X.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise _shape_error("conv2d", x, w, why="kernel larger than padded input")
    xp = np.pad(X, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else X
    s0, s1, s2, s3 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, k, k, c), (s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False
    )
    cols = patches.reshape(n * ho * wo, k * k * c)
    W = w.data.reshape(k * k * c, -1)
    out = (cols @ W).reshape(n, ho, wo, -1)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ W.T).reshape(n, ho, wo, k, k, c)
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for di in range(k):
            for dj in range(k):
                gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += gcols[:, :, :, di, dj, :]
        gx = gxp[:, pad:pad + h, pad:pad + wd, :] if pad else gxp
        return gx, gw

    return _finish("conv2d", out, (x, w), backward)


def concat(tensors: Sequence, axis=-1) -> Tensor:
    """Concatenate along ``axis`` (channels by default); other extents must agree."""
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] != ref[:ax] or t.shape[ax + 1:] != ref[ax + 1:]:
            raise _shape_error("concat", *tensors)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _finish("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = b.ndim == 1 and a.ndim > 1 and b.shape[0] == a.shape[-1]
    if a.shape != b.shape and not bias:
        raise _shape_error("add", a, b)

    def backward(g):
        return g, (g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g)

    return _finish("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    A, B = a.data, b.data
    return _finish("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _finish("scale", x.data * c, (x,), lambda g: (g * c,))


def shift(x, c: float) -> Tensor:
    """Add a python scalar (margins, temperatures, masks)."""
    x = as_tensor(x)
    return _finish("shift", x.data + float(c), (x,), lambda g: (g,))


def softmax(x) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", y, (x,), backward)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", y, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _finish("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _finish("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _finish("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def l2_normalize(x) -> Tensor:
    """Unit-normalize the last axis; the norm is floored at ``NORM_FLOOR``."""
    x = as_tensor(x)
    raw = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    active = raw > NORM_FLOOR
    n = np.where(active, raw, NORM_FLOOR)
    y = x.data / n

    def backward(g):
        proj = np.where(active, (g * y).sum(axis=-1, keepdims=True), 0.0)
        return ((g - y * proj) / n,)

    return _finish("l2_normalize", y, (x,), backward)


def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _finish("sum", np.sum(x.data, axis=axis), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / count)


def max_lastdim(x) -> Tensor:
    """Max over the last axis; the gradient goes to the first maximizer."""
    x = as_tensor(x)
    idx = x.data.argmax(axis=-1)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _finish("max_lastdim", out, (x,), backward)


def gather(x, indices, axis=0) -> Tensor:
    """``np.take`` along ``axis``; repeated indices accumulate in backward."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise _shape_error("gather", x, why=f"index out of range for axis {ax}")

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (gx,)

    return _finish("gather", np.take(x.data, idx, axis=ax), (x,), backward)


def take_along(x, indices, axis) -> Tensor:
    """Per-row gather (``np.take_along_axis``); ``indices`` has the same rank as ``x``."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    if idx.ndim != x.ndim:
        raise _shape_error("take_along", x, why="index rank must match")
    out = np.take_along_axis(x.data, idx, axis=ax)

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        grid = list(np.indices(g.shape, sparse=True))
        grid[ax] = np.broadcast_to(idx, g.shape)
        np.add.at(gx, tuple(grid), g)
        return (gx,)

    return _finish("take_along", out, (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _finish("reshape", out, (x,), lambda g: (g.reshape(old),))


def repeat(x, n: int, axis: int) -> Tensor:
    """Insert a new axis of extent ``n`` at ``axis`` by gathering a singleton."""
    x = as_tensor(x)
    shape = list(x.shape)
    ax = axis % (x.ndim + 1)
    shape.insert(ax, 1)
    return gather(reshape(x, shape), np.zeros(n, dtype=np.intp), axis=ax)


PRIMITIVES = {
    "matmul": matmul,
    "conv1x1": conv1x1,
    "conv2d": conv2d,
    "concat-channels": concat,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-scale": scale,
    "shift": shift,
    "softmax-lastdim": softmax,
    "log-softmax-lastdim": log_softmax,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "l2-normalize-lastdim": l2_normalize,
    "relu": relu,
    "sum": sum,
    "mean": mean,
    "max-lastdim": max_lastdim,
    "gather": gather,
    "take-along": take_along,
    "transpose": transpose,
    "reshape": reshape,
}


def primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by its id, e.g. ``primitive("softmax-lastdim", x)``."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Calling it twice without zeroing grads adds the gradients twice.
    """
    if root.size != 1 or root.ndim != 0:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if root._node is None:
        if root.requires_grad:
            root.grad = (root.grad if root.grad is not None else 0.0) + np.ones((), DTYPE)
            return
        raise ValueError("backward: root is not on any tape (no input requires grad)")
    tape_ref, pos = root._node
    tape = tape_ref()
    if tape is None:
        raise ValueError("backward: the tape that recorded root no longer exists")
    if pos >= len(tape.nodes) or tape.nodes[pos].out is not root:
        raise ValueError("backward: root is not on its tape anymore (tape was reset)")

    grads = {id(root): np.ones((), dtype=DTYPE)}
    for node in reversed(tape.nodes[: pos + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               indices=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per component is ``|analytic - fd| / max(1, |analytic|)``. Pass
    ``indices`` (flat positions) to check a subset of components.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    saved = x.grad
    x.grad = None
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape():
            y = f(x)
            if y.size != 1 or y.ndim != 0:
                raise ValueError(f"grad_check: f must return a scalar, got shape {y.shape}")
            backward(y)
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        positions = range(flat.size) if indices is None else indices
        worst = 0.0
        with no_grad():
            for i in positions:
                orig = flat[i]
                flat[i] = orig + eps
                hi = f(x).item()
                flat[i] = orig - eps
                lo = f(x).item()
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
        return worst
    finally:
        x.grad = saved
        x.requires_grad = was


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict, eps: float = 1e-6,
                      n_samples: int = 20, rng=None, per_tensor: int = 0) -> float:
    """Spot-check a scalar loss against finite differences on random parameter entries.

    With ``per_tensor > 0`` every parameter tensor contributes that many
    entries instead of ``n_samples`` draws weighted by tensor size.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params.values():
        p.grad = None
    with Tape():
        loss = loss_fn()
        backward(loss)
    names = sorted(params)
    if per_tensor > 0:
        picks = [(n, int(i)) for n in names
                 for i in rng.choice(params[n].size, min(per_tensor, params[n].size), replace=False)]
    else:
        sizes = np.array([params[k].size for k in names], dtype=float)
        picks = []
        for _ in range(n_samples):
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
            picks.append((name, int(rng.integers(params[name].size))))
    worst = 0.0
    with no_grad():
        for name, i in picks:
            p = params[name]
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            a = 0.0 if p.grad is None else p.grad.reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
