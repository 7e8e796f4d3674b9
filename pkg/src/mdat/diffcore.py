"""Minimal dense-tensor reverse-mode differentiation on top of numpy.

Every primitive in this module takes ``DiffValue`` operands (plain arrays and
scalars are promoted to constants), computes its result eagerly and, when any
operand requires a gradient, appends a node to the active tape.  The tape is
recorded in creation order, so it is already topologically sorted and the
backward pass simply walks it in reverse.

All data is held as float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DiffValue",
    "Graph",
    "NonFiniteError",
    "GraphError",
    "evaluate",
    "backward",
    "input_gradient",
    "finite_difference_check",
    "as_value",
    "primitive",
    "constant",
    "parameter",
    "detach",
    "sign",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "conv2d",
    "batch_norm",
    "leaky_relu",
    "max_pool2x2",
    "reshape",
    "transpose",
    "stack",
    "concat",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "log",
    "gather",
    "normalize",
    "cosine_similarity",
    "mean_cov",
    "trace",
]

_state = threading.local()


class GraphError(RuntimeError):
    """Raised on misuse of a graph (bad shapes, backward before forward, ...)."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or inf during the forward pass."""

    def __init__(self, op: str, index: int):
        super().__init__(f"non-finite output from node #{index} ({op})")
        self.op = op
        self.index = index


class DiffValue:
    """A float64 array that may take part in a differentiable computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffValue(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "parents", "out", "backward_fn", "index")

    def __init__(self, op, parents, out, backward_fn, index):
        self.op = op
        self.parents = parents
        self.out = out
        self.backward_fn = backward_fn
        self.index = index


class _Tape:
    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite


def _active_tape() -> _Tape | None:
    return getattr(_state, "tape", None)


def as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def constant(x) -> DiffValue:
    return DiffValue(x, requires_grad=False)


def parameter(x, name: str | None = None) -> DiffValue:
    return DiffValue(x, requires_grad=True, name=name)


def _record(op: str, out_data: np.ndarray, parents: Sequence[DiffValue], backward_fn) -> DiffValue:
    """Wrap ``out_data`` and register a tape node if a gradient can flow."""
    tape = _active_tape()
    if tape is not None and tape.check_finite and not np.isfinite(np.sum(out_data)):
        raise NonFiniteError(op, len(tape.nodes))
    needs = any(p.requires_grad for p in parents)
    out = DiffValue.__new__(DiffValue)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out._node = None
    if needs:
        index = len(tape.nodes) if tape is not None else -1
        node = _Node(op, tuple(parents), out, backward_fn, index)
        out._node = node
        if tape is not None:
            tape.nodes.append(node)
    return out


def primitive(op: str, out_data: np.ndarray, parents: Sequence, backward_fn) -> DiffValue:
    """Register a custom primitive.

    ``backward_fn(grad_out, mask)`` must return one gradient (or ``None``) per
    parent; ``mask[i]`` says whether parent ``i`` needs one.
    """
    return _record(op, np.asarray(out_data, dtype=np.float64), [as_value(p) for p in parents], backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph plumbing


class Graph:
    """A forward function over named leaves plus the tape of its last run.

    ``fn`` receives the bindings as keyword arguments and must build its result
    out of the primitives in this module.
    """

    def __init__(self, fn: Callable[..., DiffValue] | None = None, check_finite: bool = True):
        self.fn = fn
        self.check_finite = check_finite
        self.tape: _Tape | None = None
        self.bindings: dict[str, DiffValue] = {}
        self.output: DiffValue | None = None

    @contextmanager
    def record(self):
        """Record primitives built inside the block onto a fresh tape."""
        tape = _Tape(self.check_finite)
        previous = _active_tape()
        _state.tape = tape
        self.tape = tape
        self.bindings = {}
        self.output = None
        try:
            yield self
        finally:
            _state.tape = previous

    def evaluate(self, bindings: Mapping[str, object]) -> DiffValue:
        if self.fn is None:
            raise GraphError("this graph has no forward function; use record()")
        values = {k: as_value(v) for k, v in bindings.items()}
        for v in values.values():
            v.zero_grad()
        tape = _Tape(self.check_finite)
        previous = _active_tape()
        _state.tape = tape
        try:
            out = as_value(self.fn(**values))
        finally:
            _state.tape = previous
        self.tape = tape
        self.bindings = values
        self.output = out
        return out

    def _backprop(self, output: DiffValue, targets: Iterable[DiffValue] | None) -> dict[int, np.ndarray]:
        if self.tape is None:
            raise GraphError("backward called before evaluate")
        if output.data.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
        nodes = self.tape.nodes
        if output._node is not None and (output._node.index >= len(nodes) or nodes[output._node.index] is not output._node):
            raise GraphError("output was not produced by the current forward pass")

        live: set[int] | None = None
        if targets is not None:
            # keep only nodes that sit on a path from a target leaf
            wanted = {id(t) for t in targets}
            live = set()
            for node in nodes:
                if any(id(p) in wanted or id(p) in live for p in node.parents):
                    live.add(id(node.out))
            wanted |= live
            live = wanted

        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        stop = output._node.index if output._node is not None else -1
        for node in reversed(nodes[: stop + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            mask = [
                p.requires_grad and (live is None or id(p) in live) for p in node.parents
            ]
            if not any(mask):
                continue
            parent_grads = node.backward_fn(g, mask)
            for p, pg, m in zip(node.parents, parent_grads, mask):
                if not m or pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads

    def backward(self, output: DiffValue | None = None) -> None:
        output = self.output if output is None else output
        if output is None:
            raise GraphError("backward called before evaluate")
        grads = self._backprop(output, None)
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)

    def leaves(self) -> list[DiffValue]:
        seen: dict[int, DiffValue] = {}
        for v in self.bindings.values():
            if v.requires_grad and v.is_leaf:
                seen[id(v)] = v
        for node in self.tape.nodes if self.tape else ():
            for p in node.parents:
                if p.requires_grad and p.is_leaf:
                    seen.setdefault(id(p), p)
        return list(seen.values())


def evaluate(graph: Graph, bindings: Mapping[str, object]) -> DiffValue:
    return graph.evaluate(bindings)


def backward(graph: Graph, output: DiffValue | None = None) -> None:
    graph.backward(output)


def input_gradient(graph: Graph, loss: DiffValue, input: DiffValue) -> np.ndarray:
    """d(loss)/d(input) without touching any other leaf's ``grad``."""
    if not input.is_leaf:
        raise GraphError("input_gradient: input must be a leaf of the graph")
    if not input.requires_grad:
        raise GraphError("input_gradient: input does not require grad")
    grads = graph._backprop(loss, [input])
    g = grads.get(id(input))
    return np.zeros_like(input.data) if g is None else g.reshape(input.shape)


def finite_difference_check(
    graph: Graph,
    bindings: Mapping[str, object],
    input_name: str,
    step: float = 1e-5,
    coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between the analytic and central-difference gradient.

    The error at a coordinate is ``|a - n| / max(|a| + |n|, floor)``, so
    gradients far below ``floor`` are compared in absolute terms instead of
    amplifying round-off.  ``coords`` limits the check to a random subset of
    coordinates of the named input; ``None`` checks every coordinate.
    """
    if not 0.0 < step <= 1e-3:
        raise ValueError("step must lie in (0, 1e-3]")
    values = {k: as_value(v) for k, v in bindings.items()}
    target = values[input_name]
    if not target.requires_grad:
        target = DiffValue(target.data.copy(), requires_grad=True)
        values[input_name] = target
    out = graph.evaluate(values)
    if out.data.size != 1:
        raise GraphError("finite_difference_check needs a scalar output")
    analytic = input_gradient(graph, out, target).ravel().copy()

    flat = target.data.ravel()
    idx = np.arange(flat.size)
    if coords is not None and coords < flat.size:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, size=coords, replace=False))

    def f_at(i, delta):
        data = flat.copy()
        data[i] += delta
        probe = dict(values)
        probe[input_name] = DiffValue(data.reshape(target.shape))
        return graph.evaluate(probe).item()

    worst = 0.0
    for i in idx:
        numeric = (f_at(i, step) - f_at(i, -step)) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
        worst = max(worst, err)
    # leave the graph in the state of the unperturbed pass
    graph.evaluate(values)
    return worst


# ---------------------------------------------------------------------------
# primitives


def detach(x) -> DiffValue:
    x = as_value(x)
    return DiffValue(x.data)


def sign(x) -> np.ndarray:
    """Elementwise sign with sign(0) = 0; has no gradient."""
    data = x.data if isinstance(x, DiffValue) else np.asarray(x, dtype=np.float64)
    return np.sign(data)


def add(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)

    def bw(g, mask):
        return (_unbroadcast(g, a.shape) if mask[0] else None,
                _unbroadcast(g, b.shape) if mask[1] else None)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)

    def bw(g, mask):
        return (_unbroadcast(g, a.shape) if mask[0] else None,
                _unbroadcast(-g, b.shape) if mask[1] else None)

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)

    def bw(g, mask):
        return (_unbroadcast(g * b.data, a.shape) if mask[0] else None,
                _unbroadcast(g * a.data, b.shape) if mask[1] else None)

    return _record("mul", a.data * b.data, (a, b), bw)


def scale(x, c: float) -> DiffValue:
    x = as_value(x)
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g, mask: (g * c,))


def neg(x) -> DiffValue:
    return scale(x, -1.0)


def matmul(a, b) -> DiffValue:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise GraphError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g, mask):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if mask[0] else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if mask[1] else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), bw)


def _pad1(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2, w + 2, c))
    out[:, 1:-1, 1:-1, :] = x
    return out


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Rows of 3x3 patches from a padded channels-last tensor, (kh, kw, c) order."""
    n, c = xp.shape[0], xp.shape[3]
    view = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def conv2d(x, w) -> DiffValue:
    """3x3 convolution, stride 1, zero padding 1, channels-last.

    ``x`` is (N, H, W, Cin); ``w`` is (Cout, Cin, 3, 3).  Returns (N, H, W, Cout).
    """
    x, w = as_value(x), as_value(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[3]:
        raise GraphError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    n, h, wd, cin = x.shape
    cout = w.shape[0]
    cols = _im2col(_pad1(x.data), h, wd)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(9 * cin, cout)
    out = (cols @ wmat).reshape(n, h, wd, cout)

    def bw(g, mask):
        g2 = g.reshape(n * h * wd, cout)
        gx = gw = None
        if mask[1]:
            gw = (cols.T @ g2).reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
        if mask[0]:
            if cout <= cin:
                # full correlation with the spatially flipped kernel
                flipped = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(9 * cout, cin)
                gx = (_im2col(_pad1(g), h, wd) @ flipped).reshape(n, h, wd, cin)
            else:
                # scatter patch gradients back; cheaper when cin is small
                gcols = (g2 @ wmat.T).reshape(n, h, wd, 3, 3, cin)
                gxp = np.zeros((n, h + 2, wd + 2, cin))
                for i in range(3):
                    for j in range(3):
                        gxp[:, i:i + h, j:j + wd, :] += gcols[:, :, :, i, j, :]
                gx = gxp[:, 1:-1, 1:-1, :]
        return gx, gw

    return _record("conv2d", out, (x, w), bw)


def batch_norm(x, gamma, beta, eps: float = 1e-5, stats: tuple[np.ndarray, np.ndarray] | None = None) -> DiffValue:
    """Per-channel normalization of a channels-last tensor.

    With ``stats=None`` the mean and (biased) variance are taken from the
    current batch over every axis except the last.  Passing ``(mean, var)``
    uses fixed statistics instead, making the op affine in ``x``.
    """
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise GraphError(f"batch_norm: channel mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    ones = np.ones(m)
    if stats is None:
        mu = (ones @ x2) / m
        xhat = x2 - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / m
    else:
        mu, var = (np.asarray(s, dtype=np.float64) for s in stats)
        xhat = x2 - mu
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    out = xhat * gamma.data
    out += beta.data
    fixed = stats is not None

    def bw(g, mask):
        g2 = g.reshape(-1, c)
        gx = gg = gb = None
        if mask[1]:
            gg = np.einsum("ij,ij->j", g2, xhat)
        if mask[2]:
            gb = ones @ g2
        if mask[0]:
            if fixed:
                gx = g2 * (gamma.data * inv_std)
            else:
                s1 = (ones @ g2) / m
                s2 = np.einsum("ij,ij->j", g2, xhat) / m
                gx = g2 - s1
                gx -= xhat * s2
                gx *= gamma.data * inv_std
            gx = gx.reshape(x.shape)
        return gx, gg, gb

    return _record("batch_norm", out.reshape(x.shape), (x, gamma, beta), bw)


def leaky_relu(x, slope: float = 0.2) -> DiffValue:
    """max(x, slope*x) for 0 <= slope <= 1."""
    x = as_value(x)
    if not 0.0 <= slope <= 1.0:
        raise ValueError("slope must lie in [0, 1]")
    pos = x.data > 0
    out = x.data * slope
    np.maximum(x.data, out, out=out)

    def bw(g, mask):
        return (g * (slope + (1.0 - slope) * pos),)

    return _record("leaky_relu", out, (x,), bw)


def max_pool2x2(x) -> DiffValue:
    """2x2 max pooling, stride 2, channels-last; ties go to the first element
    in row-major window order."""
    x = as_value(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise GraphError(f"max_pool2x2 needs even spatial dims, got {h}x{w}")
    views = [x.data[:, i::2, j::2, :] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

    def bw(g, mask):
        gx = np.zeros((n, h, w, c))
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(((0, 0), (0, 1), (1, 0), (1, 1)), views):
            hit = (v == out) & ~taken
            taken |= hit
            gx[:, i::2, j::2, :] = g * hit
        return (gx,)

    return _record("max_pool2x2", out, (x,), bw)


def reshape(x, shape: Sequence[int]) -> DiffValue:
    x = as_value(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise GraphError(f"reshape {x.shape} -> {tuple(shape)}: {exc}") from None
    return _record("reshape", out, (x,), lambda g, mask: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> DiffValue:
    """Permute axes; the default swaps the last two."""
    x = as_value(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g, mask: (g.transpose(inverse),))


def stack(values: Sequence, axis: int = 0) -> DiffValue:
    values = [as_value(v) for v in values]
    out = np.stack([v.data for v in values], axis=axis)

    def bw(g, mask):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if mask[i] else None for i in range(len(values)))

    return _record("stack", out, tuple(values), bw)


def concat(values: Sequence, axis: int = 0) -> DiffValue:
    values = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in values], axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def bw(g, mask):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if m else None for p, m in zip(parts, mask))

    return _record("concat", out, tuple(values), bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> DiffValue:  # noqa: A001 - mirrors numpy
    x = as_value(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, mask):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> DiffValue:
    x = as_value(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def softmax(x, axis: int = -1) -> DiffValue:
    x = as_value(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g, mask):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record("softmax", p, (x,), bw)


def log_softmax(x, axis: int = -1) -> DiffValue:
    x = as_value(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g, mask):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)


def log(x, floor: float | None = None) -> DiffValue:
    """Natural log; values below ``floor`` are clamped (zero gradient there)."""
    x = as_value(x)
    if floor is None:
        if np.any(x.data <= 0):
            raise NonFiniteError("log", -1)
        return _record("log", np.log(x.data), (x,), lambda g, mask: (g / x.data,))
    live = x.data > floor
    safe = np.where(live, x.data, floor)
    return _record("log", np.log(safe), (x,), lambda g, mask: (np.where(live, g / safe, 0.0),))


def gather(x, index: np.ndarray, axis: int = -1) -> DiffValue:
    """``np.take_along_axis`` with a scatter-add backward."""
    x = as_value(x)
    index = np.asarray(index)
    out = np.take_along_axis(x.data, index, axis=axis)

    def bw(g, mask):
        gx = np.zeros_like(x.data)
        full = list(np.indices(index.shape, sparse=True))
        full[axis] = index
        np.add.at(gx, tuple(full), g)
        return (gx,)

    return _record("gather", out, (x,), bw)


def normalize(x, axis: int = -1, eps: float = 1e-12) -> DiffValue:
    """Scale vectors along ``axis`` to unit length; norms below ``eps`` are clamped to it."""
    x = as_value(x)
    raw = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(raw, eps)
    u = x.data / norm

    def bw(g, mask):
        radial = u * (g * u).sum(axis=axis, keepdims=True)
        return (np.where(raw > eps, g - radial, g) / norm,)

    return _record("normalize", u, (x,), bw)


def cosine_similarity(a, b) -> DiffValue:
    """All-pairs cosine similarity between rows of ``a`` (.., n, d) and ``b`` (.., p, d)."""
    return matmul(normalize(a), transpose(normalize(b)))


def mean_cov(x) -> tuple[DiffValue, DiffValue]:
    """Mean and maximum-likelihood covariance of a set of row vectors.

    ``x`` has shape (..., m, d); returns (..., d) and (..., d, d).
    """
    x = as_value(x)
    m = x.shape[-2]
    mu = mean(x, axis=-2, keepdims=True)
    centered = sub(x, mu)
    cov = scale(matmul(transpose(centered), centered), 1.0 / m)
    return reshape(mu, x.shape[:-2] + (x.shape[-1],)), cov


def trace(x) -> DiffValue:
    """Trace over the last two axes."""
    x = as_value(x)
    n = x.shape[-1]
    if x.shape[-2] != n:
        raise GraphError(f"trace needs square matrices, got {x.shape}")
    eye = np.eye(n)

    def bw(g, mask):
        return (np.asarray(g)[..., None, None] * eye,)

    return _record("trace", np.trace(x.data, axis1=-2, axis2=-1), (x,), bw)
