"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation produces a :class:`Tensor` that remembers the primitive and
inputs it came from.  Vector-Jacobian products are written in terms of the
same primitives, so a backward pass run with ``create_graph=True`` yields
tensors that can themselves be differentiated (double backprop).

Shapes are never broadcast implicitly; use :func:`broadcast_to`.  Python
scalars combined with a tensor go through :func:`affine`.

Two ways to use the engine:

* eagerly, as in ``y = (x * x).sum(); (gx,) = grad(y, [x])``;
* via :class:`ExprGraph`, a traced expression that can be re-evaluated and
  differentiated with fresh leaf bindings (:func:`evaluate`,
  :func:`gradient`, :func:`gradient_of_gradient_norm`).
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ExprGraph", "ShapeError", "NonFiniteError", "NonDifferentiableError",
    "tensor", "constant", "no_grad", "grad", "evaluate", "gradient",
    "gradient_of_gradient_norm", "add", "sub", "mul", "div", "neg", "exp", "log",
    "tanh", "sigmoid", "softplus", "sum", "mean", "broadcast_to", "reshape",
    "transpose", "concat", "slice_", "conv2d", "matmul", "affine", "sqrt", "square",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive."""


class NonFiniteError(FloatingPointError):
    """An intermediate value contains NaN or infinity."""


class NonDifferentiableError(ArithmeticError):
    """The requested derivative does not exist at the bound point."""


_ids = itertools.count()
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _recording_as(flag: bool):
    prev = _recording()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: evaluate without recording operations."""
    return _recording_as(False)


class Tensor:
    __slots__ = ("data", "prim", "inputs", "attrs", "requires_grad", "name", "id")

    def __init__(self, data, requires_grad=False, name=None, *, prim=None, inputs=(), attrs=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.prim = prim
        self.inputs = inputs
        self.attrs = attrs or {}
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.prim is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def label(self) -> str:
        op = self.prim.name if self.prim is not None else "leaf"
        tag = f" {self.name!r}" if self.name else ""
        return f"<{op}#{self.id}{tag} shape={self.shape}>"

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return affine(self, -1.0, float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else affine(self, 1.0 / float(other), 0.0)

    def __rtruediv__(self, other):
        return div(constant(np.full(self.shape, float(other))), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    @property
    def T(self):
        return transpose(self, (1, 0))


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


class Primitive:
    """A differentiable operation: numpy forward plus a vjp built from primitives."""

    name = "?"

    def check(self, *shapes, **attrs):
        pass

    def forward(self, *values, **attrs):
        raise NotImplementedError

    def vjp(self, node: Tensor, g: Tensor) -> Sequence[Tensor | None]:
        raise NotImplementedError

    def __call__(self, *inputs: Tensor, **attrs) -> Tensor:
        try:
            self.check(*(t.shape for t in inputs), **attrs)
        except ShapeError as exc:
            labels = ", ".join(t.label() for t in inputs)
            raise ShapeError(f"{self.name}: {exc} (inputs: {labels})") from None
        value = self.forward(*(t.data for t in inputs), **attrs)
        needs = _recording() and any(t.requires_grad for t in inputs)
        if not needs:
            return Tensor(value)
        return Tensor(value, requires_grad=True, prim=self, inputs=inputs, attrs=attrs)


def _same_shape(a, b, **_):
    if a != b:
        raise ShapeError(f"shapes {a} and {b} differ; broadcast explicitly")


class _Add(Primitive):
    name = "add"
    check = staticmethod(_same_shape)

    def forward(self, a, b):
        return a + b

    def vjp(self, node, g):
        return g, g


class _Sub(Primitive):
    name = "subtract"
    check = staticmethod(_same_shape)

    def forward(self, a, b):
        return a - b

    def vjp(self, node, g):
        return g, neg(g)


class _Mul(Primitive):
    name = "multiply"
    check = staticmethod(_same_shape)

    def forward(self, a, b):
        return a * b

    def vjp(self, node, g):
        a, b = node.inputs
        return mul(g, b), mul(g, a)


class _Div(Primitive):
    name = "divide"
    check = staticmethod(_same_shape)

    def forward(self, a, b):
        return a / b

    def vjp(self, node, g):
        a, b = node.inputs
        gb = div(g, b)
        return gb, neg(mul(gb, node))


class _Neg(Primitive):
    name = "negate"

    def forward(self, a):
        return -a

    def vjp(self, node, g):
        return (neg(g),)


class _Exp(Primitive):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def vjp(self, node, g):
        return (mul(g, node),)


class _Log(Primitive):
    name = "log"

    def forward(self, a):
        return np.log(a)

    def vjp(self, node, g):
        return (div(g, node.inputs[0]),)


class _Tanh(Primitive):
    name = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def vjp(self, node, g):
        return (mul(g, affine(mul(node, node), -1.0, 1.0)),)


class _Sigmoid(Primitive):
    name = "sigmoid"

    def forward(self, a):
        return 0.5 * (1.0 + np.tanh(0.5 * a))

    def vjp(self, node, g):
        return (mul(g, mul(node, affine(node, -1.0, 1.0))),)


class _Softplus(Primitive):
    name = "softplus"

    def forward(self, a):
        return np.logaddexp(0.0, a)

    def vjp(self, node, g):
        return (mul(g, sigmoid(node.inputs[0])),)


class _Affine(Primitive):
    """``scale * x + shift`` with constant scalars."""

    name = "affine"

    def forward(self, a, scale, shift):
        return a * scale + shift if shift else a * scale

    def vjp(self, node, g):
        return (affine(g, node.attrs["scale"], 0.0),)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _kept_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


class _Sum(Primitive):
    name = "sum"

    def forward(self, a, axis, keepdims):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(self, node, g):
        x = node.inputs[0]
        axes = _norm_axes(node.attrs["axis"], x.ndim)
        if not node.attrs["keepdims"]:
            g = reshape(g, _kept_shape(x.shape, axes))
        return (broadcast_to(g, x.shape),)


class _Mean(Primitive):
    name = "mean"

    def forward(self, a, axis, keepdims):
        return np.mean(a, axis=axis, keepdims=keepdims)

    def vjp(self, node, g):
        x = node.inputs[0]
        axes = _norm_axes(node.attrs["axis"], x.ndim)
        count = int(np.prod([x.shape[i] for i in axes])) if axes else 1
        if not node.attrs["keepdims"]:
            g = reshape(g, _kept_shape(x.shape, axes))
        return (broadcast_to(affine(g, 1.0 / count, 0.0), x.shape),)


class _BroadcastTo(Primitive):
    name = "broadcast"

    def check(self, a, shape):
        if len(a) > len(shape):
            raise ShapeError(f"cannot broadcast {a} to {shape}")
        for n, m in zip(a[::-1], shape[::-1]):
            if n != m and n != 1:
                raise ShapeError(f"cannot broadcast {a} to {shape}")

    def forward(self, a, shape):
        return np.broadcast_to(a, shape)

    def vjp(self, node, g):
        src = node.inputs[0].shape
        shape = node.attrs["shape"]
        lead = len(shape) - len(src)
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1
        )
        out = sum(g, axes, keepdims=True) if axes else g
        return (reshape(out, src),)


class _Reshape(Primitive):
    name = "reshape"

    def check(self, a, shape):
        if int(np.prod(a)) != int(np.prod(shape)):
            raise ShapeError(f"cannot reshape {a} to {shape}")

    def forward(self, a, shape):
        return np.reshape(a, shape)

    def vjp(self, node, g):
        return (reshape(g, node.inputs[0].shape),)


class _Transpose(Primitive):
    name = "transpose"

    def check(self, a, axes):
        if sorted(axes) != list(range(len(a))):
            raise ShapeError(f"bad permutation {axes} for rank {len(a)}")

    def forward(self, a, axes):
        return np.transpose(a, axes)

    def vjp(self, node, g):
        return (transpose(g, tuple(np.argsort(node.attrs["axes"]))),)


class _Concat(Primitive):
    name = "concatenate"

    def check(self, *shapes, axis):
        ref = shapes[0]
        for s in shapes[1:]:
            if len(s) != len(ref) or any(
                m != n for i, (m, n) in enumerate(zip(s, ref)) if i != axis % len(ref)
            ):
                raise ShapeError(f"cannot concatenate {shapes} along axis {axis}")

    def forward(self, *values, axis):
        return np.concatenate(values, axis=axis)

    def vjp(self, node, g):
        axis = node.attrs["axis"] % node.ndim
        out, start = [], 0
        for t in node.inputs:
            stop = start + t.shape[axis]
            index = (slice(None),) * axis + (slice(start, stop),)
            out.append(slice_(g, index))
            start = stop
        return out


def _canonical_index(index, ndim):
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not isinstance(item, slice):
            raise ShapeError(f"only basic slices are supported, got {item!r}")
    return index + (slice(None),) * (ndim - len(index))


class _Slice(Primitive):
    name = "slice"

    def forward(self, a, index):
        return a[index]

    def vjp(self, node, g):
        return (_scatter(g, index=node.attrs["index"], shape=node.inputs[0].shape),)


class _Scatter(Primitive):
    """Adjoint of slicing: embed into zeros of ``shape``."""

    name = "scatter"

    def forward(self, a, index, shape):
        out = np.zeros(shape)
        out[index] = a
        return out

    def vjp(self, node, g):
        return (slice_(g, node.attrs["index"]),)


def _check_conv(x, w):
    if len(x) != 4 or len(w) != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x} and {w}")
    if x[1] != w[1]:
        raise ShapeError(f"input has {x[1]} channels, kernel expects {w[1]}")
    if w[2] % 2 == 0 or w[3] % 2 == 0:
        raise ShapeError(f"same padding needs odd kernel extents, got {w[2:]}")


def _pad(x, kh, kw):
    ph, pw = kh // 2, kw // 2
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _conv_fwd(x, w):
    kh, kw = w.shape[2:]
    if kh == 1 and kw == 1:
        return np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0], optimize=True)
    cols = sliding_window_view(_pad(x, kh, kw), (kh, kw), axis=(2, 3))
    return np.einsum("nchwab,ocab->nohw", cols, w, optimize=True)


def _conv_input_grad(g, w):
    # correlate with the spatially flipped, channel-transposed kernel
    return _conv_fwd(g, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))


def _conv_weight_grad(x, g, kh, kw):
    if kh == 1 and kw == 1:
        return np.einsum("nchw,nohw->oc", x, g, optimize=True)[:, :, None, None]
    cols = sliding_window_view(_pad(x, kh, kw), (kh, kw), axis=(2, 3))
    return np.einsum("nchwab,nohw->ocab", cols, g, optimize=True)


class _Conv2d(Primitive):
    """Stride-1, zero "same"-padded 2-D cross-correlation, NCHW x OIHW."""

    name = "conv2d"

    def check(self, x, w):
        _check_conv(x, w)

    def forward(self, x, w):
        return _conv_fwd(x, w)

    def vjp(self, node, g):
        x, w = node.inputs
        gx = _conv2d_tx(g, w) if x.requires_grad else None
        gw = _conv2d_gw(x, g, ksize=w.shape[2:]) if w.requires_grad else None
        return gx, gw


class _Conv2dTransposed(Primitive):
    """Adjoint of conv2d in its input: ``<conv2d(x, w), g> = <x, tx(g, w)>``."""

    name = "conv2d_input_grad"

    def forward(self, g, w):
        return _conv_input_grad(g, w)

    def vjp(self, node, h):
        g, w = node.inputs
        gg = conv2d(h, w) if g.requires_grad else None
        gw = _conv2d_gw(h, g, ksize=w.shape[2:]) if w.requires_grad else None
        return gg, gw


class _Conv2dWeightGrad(Primitive):
    """Adjoint of conv2d in its kernel: ``<conv2d(x, w), g> = <w, gw(x, g)>``."""

    name = "conv2d_weight_grad"

    def forward(self, x, g, ksize):
        return _conv_weight_grad(x, g, *ksize)

    def vjp(self, node, h):
        x, g = node.inputs
        gx = _conv2d_tx(g, h) if x.requires_grad else None
        gg = conv2d(x, h) if g.requires_grad else None
        return gx, gg


class _Matmul(Primitive):
    name = "matmul"

    def check(self, a, b):
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise ShapeError(f"cannot multiply {a} by {b}")

    def forward(self, a, b):
        return a @ b

    def vjp(self, node, g):
        a, b = node.inputs
        ga = matmul(g, transpose(b, (1, 0))) if a.requires_grad else None
        gb = matmul(transpose(a, (1, 0)), g) if b.requires_grad else None
        return ga, gb


add = _Add()
sub = _Sub()
mul = _Mul()
div = _Div()
neg = _Neg()
exp = _Exp()
log = _Log()
tanh = _Tanh()
sigmoid = _Sigmoid()
softplus = _Softplus()
_sum = _Sum()
_mean = _Mean()
_broadcast = _BroadcastTo()
_reshape = _Reshape()
_transpose = _Transpose()
_concat = _Concat()
_slice = _Slice()
_scatter_p = _Scatter()
conv2d = _Conv2d()
_conv2d_tx = _Conv2dTransposed()
_conv2d_gw_p = _Conv2dWeightGrad()
matmul = _Matmul()
_affine = _Affine()


def _conv2d_gw(x, g, ksize):
    return _conv2d_gw_p(x, g, ksize=tuple(ksize))


def _scatter(g, index, shape):
    return _scatter_p(g, index=index, shape=tuple(shape))


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    return _affine(x, scale=float(scale), shift=float(shift))


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    axis = None if axis is None else _norm_axes(axis, x.ndim)
    return _sum(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = None if axis is None else _norm_axes(axis, x.ndim)
    return _mean(x, axis=axis, keepdims=keepdims)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _broadcast(x, shape=shape)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if x.shape == shape:
        return x
    return _reshape(x, shape=shape)


def transpose(x: Tensor, axes) -> Tensor:
    return _transpose(x, axes=tuple(int(a) for a in axes))


def concat(xs: Sequence[Tensor], axis=0) -> Tensor:
    return _concat(*xs, axis=axis)


def slice_(x: Tensor, index) -> Tensor:
    return _slice(x, index=_canonical_index(index, x.ndim))


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def sqrt(x: Tensor) -> Tensor:
    return exp(affine(log(x), 0.5, 0.0))


# ---------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for inp in node.inputs:
            if inp.requires_grad and inp.id not in seen:
                stack.append((inp, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], grad_output: Tensor | None = None,
         create_graph=False, allow_unused=True) -> list[Tensor]:
    """Gradients of ``output`` with respect to each tensor in ``wrt``.

    ``output`` must be a scalar unless ``grad_output`` supplies the cotangent.
    With ``create_graph`` the returned tensors are themselves differentiable.
    """
    if grad_output is None:
        if output.data.size != 1:
            raise ShapeError(f"gradient needs a scalar output, got {output.label()}")
        grad_output = Tensor(np.ones(output.shape))
    elif grad_output.shape != output.shape:
        raise ShapeError(f"cotangent shape {grad_output.shape} != output shape {output.shape}")

    zeros = [Tensor(np.zeros(t.shape)) for t in wrt]
    if not output.requires_grad:
        return zeros

    wanted = {t.id for t in wrt}
    found: dict[int, Tensor] = {}
    with _recording_as(bool(create_graph)):
        cot: dict[int, Tensor] = {output.id: grad_output}
        for node in reversed(_toposort(output)):
            g = cot.pop(node.id, None)
            if g is None:
                continue
            if node.id in wanted:
                found[node.id] = g
            if node.is_leaf:
                continue
            parts = node.prim.vjp(node, g)
            for inp, gi in zip(node.inputs, parts):
                if gi is None or not inp.requires_grad:
                    continue
                prior = cot.get(inp.id)
                cot[inp.id] = gi if prior is None else add(prior, gi)

    out = []
    for t, z in zip(wrt, zeros):
        g = found.get(t.id)
        if g is None:
            if not allow_unused:
                raise ValueError(f"{t.label()} does not influence the output")
            g = z
        out.append(g)
    return out


# ---------------------------------------------------------------- graphs


class ExprGraph:
    """A traced expression: leaves, topologically ordered nodes, one output.

    Build with :meth:`trace`.  The recorded graph is immutable; evaluating it
    with new bindings replays the primitives in order.
    """

    def __init__(self, leaves: Mapping[str, Tensor], output: Tensor):
        self.leaves = dict(leaves)
        self.output = output
        self._leaf_ids = {t.id: name for name, t in self.leaves.items()}
        self.nodes = self._collect(output)

    @classmethod
    def trace(cls, fn: Callable[..., Tensor], **examples) -> "ExprGraph":
        """Record ``fn(**leaves)``; each keyword gives a leaf's example value."""
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in examples.items()}
        return cls(leaves, fn(**leaves))

    def _collect(self, output):
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for inp in node.inputs:
                if inp.id not in seen:
                    stack.append((inp, False))
        return order

    def bind(self, bindings: Mapping[str, np.ndarray],
             requires_grad: Iterable[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
        """Replay the graph eagerly with new leaf values.

        Returns the output tensor and the freshly bound leaf tensors by name.
        """
        missing = set(self.leaves) - set(bindings)
        if missing:
            raise KeyError(f"unbound leaves: {sorted(missing)}")
        requires_grad = set(requires_grad)
        env: dict[int, Tensor] = {}
        bound: dict[str, Tensor] = {}
        for node in self.nodes:
            name = self._leaf_ids.get(node.id)
            if name is not None:
                value = np.asarray(bindings[name], dtype=np.float64)
                if value.shape != node.shape:
                    raise ShapeError(f"leaf {name!r} bound to shape {value.shape}, expected {node.shape}")
                env[node.id] = bound[name] = Tensor(value, requires_grad=name in requires_grad, name=name)
            elif node.is_leaf:
                env[node.id] = node
            else:
                env[node.id] = node.prim(*(env[i.id] for i in node.inputs), **node.attrs)
            if not np.all(np.isfinite(env[node.id].data)):
                raise NonFiniteError(f"non-finite value at {node.label()}")
        for name, leaf in self.leaves.items():
            if name not in bound:
                # leaf the output does not depend on
                bound[name] = Tensor(bindings[name], requires_grad=name in requires_grad, name=name)
        return env[self.output.id], bound


def evaluate(graph: ExprGraph, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    with no_grad():
        return graph.bind(bindings)[0].data


def gradient(graph: ExprGraph, wrt: Iterable[str], bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    wrt = list(wrt)
    out, leaves = graph.bind(bindings, requires_grad=wrt)
    if out.data.size != 1:
        raise ShapeError(f"gradient needs a scalar output, got shape {out.shape}")
    gs = grad(out, [leaves[k] for k in wrt])
    return {k: g.data for k, g in zip(wrt, gs)}


def gradient_of_gradient_norm(graph: ExprGraph, input_leaf: str, wrt: Iterable[str],
                              bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradient of ``||d output / d input_leaf||`` with respect to ``wrt``."""
    wrt = list(wrt)
    names = set(wrt) | {input_leaf}
    out, leaves = graph.bind(bindings, requires_grad=names)
    if out.data.size != 1:
        raise ShapeError(f"gradient needs a scalar output, got shape {out.shape}")
    (gx,) = grad(out, [leaves[input_leaf]], create_graph=True)
    sq = sum(square(gx))
    if not sq.data > 0.0:
        raise NonDifferentiableError("input gradient is zero; its norm is not differentiable here")
    gs = grad(sqrt(sq), [leaves[k] for k in wrt])
    return {k: g.data for k, g in zip(wrt, gs)}
