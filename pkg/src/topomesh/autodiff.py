"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Value` wraps one ndarray and remembers how it was produced.  Calling
``backward()`` on a scalar walks the recorded graph once in reverse
topological order and accumulates adjoints into every node's ``grad``.
Graphs are single-use: after a backward pass all participating nodes are
consumed and can neither be reused in new operations nor swept again.
Training code therefore re-wraps its parameter arrays at every step.

Everything is double precision.  Reductions run through numpy, which is
deterministic for a fixed thread count; the command-line layer pins the
thread count before numpy is first imported.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np


class GraphError(ValueError):
    """Invalid graph construction (shape mismatch, reuse after backward)."""


class NonFiniteGradient(RuntimeError):
    """A gradient contained NaN or infinity; the message names the parameter."""


ArrayLike = Union["Value", np.ndarray, float, int]


def as_value(x: ArrayLike) -> "Value":
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Value:
    """Node in a reverse-mode differentiation graph.

    Parameters
    ----------
    data : array_like
        Dense float64 payload; scalars are stored as 0-d arrays.
    parents : tuple of Value
        Nodes this one was computed from (empty for leaves).
    op : str
        Operation tag, for error messages.

    Attributes
    ----------
    grad : ndarray or None
        Adjoint of the same shape as ``data``; allocated by the backward
        pass.  Leaves keep their adjoint after the sweep, which is how
        parameter gradients are read out.
    """

    __slots__ = ("data", "grad", "_parents", "_backward_fn", "_op", "_consumed")

    # make `ndarray <op> Value` dispatch to our reflected operators instead
    # of numpy silently building an object array
    __array_ufunc__ = None

    def __init__(self, data, parents=(), op="leaf", backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = parents
        self._op = op
        self._backward_fn: Optional[Callable[[], None]] = backward_fn
        self._consumed = False
        for p in parents:
            if p._consumed:
                raise GraphError(
                    f"{op}: parent produced by a graph that already ran backward"
                )

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(op={self._op!r}, shape={self.data.shape})"

    # -- graph construction helpers ---------------------------------------

    def _make(self, data, parents, op, backward_fn):
        return Value(data, parents=parents, op=op, backward_fn=backward_fn)

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- elementwise arithmetic (numpy broadcasting rules) ------------------

    def __add__(self, other):
        other = as_value(other)
        out_data = self.data + other.data
        out = self._make(out_data, (self, other), "add", None)

        def backward():
            self._accumulate(_unbroadcast(out.grad, self.data.shape))
            other._accumulate(_unbroadcast(out.grad, other.data.shape))

        out._backward_fn = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = self._make(-self.data, (self,), "neg", None)

        def backward():
            self._accumulate(-out.grad)

        out._backward_fn = backward
        return out

    def __sub__(self, other):
        other = as_value(other)
        out = self._make(self.data - other.data, (self, other), "sub", None)

        def backward():
            self._accumulate(_unbroadcast(out.grad, self.data.shape))
            other._accumulate(-_unbroadcast(out.grad, other.data.shape))

        out._backward_fn = backward
        return out

    def __rsub__(self, other):
        return as_value(other) - self

    def __mul__(self, other):
        other = as_value(other)
        out = self._make(self.data * other.data, (self, other), "mul", None)

        def backward():
            self._accumulate(_unbroadcast(out.grad * other.data, self.data.shape))
            other._accumulate(_unbroadcast(out.grad * self.data, other.data.shape))

        out._backward_fn = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_value(other)
        out = self._make(self.data / other.data, (self, other), "div", None)

        def backward():
            self._accumulate(_unbroadcast(out.grad / other.data, self.data.shape))
            other._accumulate(
                _unbroadcast(-out.grad * self.data / other.data**2, other.data.shape)
            )

        out._backward_fn = backward
        return out

    def __rtruediv__(self, other):
        return as_value(other) / self

    def __matmul__(self, other):
        other = as_value(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise GraphError("matmul: both operands must be 2-d")
        if self.data.shape[1] != other.data.shape[0]:
            raise GraphError(
                f"matmul: inner dimensions differ, {self.data.shape} @ {other.data.shape}"
            )
        out = self._make(self.data @ other.data, (self, other), "matmul", None)

        def backward():
            self._accumulate(out.grad @ other.data.T)
            other._accumulate(self.data.T @ out.grad)

        out._backward_fn = backward
        return out

    # -- nonlinearities ------------------------------------------------------

    def relu(self):
        out = self._make(np.maximum(self.data, 0.0), (self,), "relu", None)

        def backward():
            self._accumulate(out.grad * (self.data > 0.0))

        out._backward_fn = backward
        return out

    def tanh(self):
        t = np.tanh(self.data)
        out = self._make(t, (self,), "tanh", None)

        def backward():
            self._accumulate(out.grad * (1.0 - t * t))

        out._backward_fn = backward
        return out

    def square(self):
        out = self._make(self.data * self.data, (self,), "square", None)

        def backward():
            self._accumulate(out.grad * 2.0 * self.data)

        out._backward_fn = backward
        return out

    def sqrt(self):
        root = np.sqrt(self.data)
        out = self._make(root, (self,), "sqrt", None)

        def backward():
            self._accumulate(out.grad * 0.5 / root)

        out._backward_fn = backward
        return out

    def abs(self):
        out = self._make(np.abs(self.data), (self,), "abs", None)

        def backward():
            self._accumulate(out.grad * np.sign(self.data))

        out._backward_fn = backward
        return out

    # -- reductions and shaping ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        out = self._make(out_data, (self,), "sum", None)

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        out._backward_fn = backward
        return out

    def mean(self):
        n = self.data.size
        out = self._make(self.data.mean(), (self,), "mean", None)

        def backward():
            self._accumulate(np.broadcast_to(out.grad / n, self.data.shape).copy())

        out._backward_fn = backward
        return out

    def reshape(self, shape):
        out = self._make(self.data.reshape(shape), (self,), "reshape", None)

        def backward():
            self._accumulate(out.grad.reshape(self.data.shape))

        out._backward_fn = backward
        return out

    def transpose(self):
        if self.data.ndim != 2:
            raise GraphError("transpose: operand must be 2-d")
        out = self._make(self.data.T.copy(), (self,), "transpose", None)

        def backward():
            self._accumulate(out.grad.T)

        out._backward_fn = backward
        return out

    def norm_rows(self, keepdims=False):
        """Euclidean norm of each row of a 2-d array.

        Rows of exact zero norm get a zero subgradient (the only place the
        norm is non-differentiable); callers that must avoid the kink guard
        their inputs beforehand.
        """
        if self.data.ndim != 2:
            raise GraphError("norm_rows: operand must be 2-d")
        norms = np.linalg.norm(self.data, axis=1, keepdims=True)
        out_data = norms if keepdims else norms[:, 0]
        out = self._make(out_data, (self,), "norm_rows", None)

        def backward():
            g = out.grad if keepdims else out.grad[:, None]
            safe = np.where(norms > 0.0, norms, 1.0)
            direction = np.where(norms > 0.0, self.data / safe, 0.0)
            self._accumulate(g * direction)

        out._backward_fn = backward
        return out

    # -- backward pass ---------------------------------------------------------

    def backward(self):
        """Accumulate adjoints of this scalar into every reachable node.

        Raises
        ------
        GraphError
            If the node is not scalar or the graph was already swept.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar, got shape {self.data.shape}")
        if self._consumed:
            raise GraphError("backward() called twice on the same graph")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn()
            node._consumed = True
            # each closure captures its own node, a reference cycle that
            # refcounting cannot free; the graph is spent now, so cut the
            # cycles and parent edges instead of waiting for gc
            node._backward_fn = None
            node._parents = ()


# -- free-function primitives ---------------------------------------------------


def concat(values: list, axis: int = 0) -> Value:
    """Concatenate along ``axis``; backward splits the adjoint."""
    values = [as_value(v) for v in values]
    if not values:
        raise GraphError("concat: empty input list")
    out_data = np.concatenate([v.data for v in values], axis=axis)
    out = Value(out_data, parents=tuple(values), op="concat")

    widths = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + widths)

    def backward():
        for v, lo, hi in zip(values, offsets[:-1], offsets[1:]):
            index = [slice(None)] * out_data.ndim
            index[axis] = slice(lo, hi)
            v._accumulate(out.grad[tuple(index)])

    out._backward_fn = backward
    return out


def gather(value: Value, indices) -> Value:
    """Select rows by integer index; backward scatter-adds (repeats allowed)."""
    value = as_value(value)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise GraphError("gather: indices must be 1-d")
    if indices.size and (indices.min() < 0 or indices.max() >= value.data.shape[0]):
        raise GraphError("gather: index out of range")
    out = Value(value.data[indices], parents=(value,), op="gather")

    def backward():
        if value.grad is None:
            value.grad = np.zeros_like(value.data)
        np.add.at(value.grad, indices, out.grad)

    out._backward_fn = backward
    return out


def min_along_axis(value: Value, axis: int):
    """Minimum over one axis of a 2-d array.

    Returns the reduced `Value` and the argmin index array.  The backward
    pass routes gradient only to the winning element; numpy's argmin breaks
    ties toward the lowest index, which fixes the subgradient at ties.
    """
    return _extremum(value, axis, np.argmin, "min_along_axis")


def max_along_axis(value: Value, axis: int):
    """Maximum over one axis of a 2-d array; tie and gradient rules as min."""
    return _extremum(value, axis, np.argmax, "max_along_axis")


def _extremum(value: Value, axis: int, argfn, op: str):
    value = as_value(value)
    if value.data.ndim != 2:
        raise GraphError(f"{op}: operand must be 2-d")
    if axis not in (0, 1):
        raise GraphError(f"{op}: axis must be 0 or 1")
    idx = argfn(value.data, axis=axis)
    other = np.arange(value.data.shape[1 - axis])
    if axis == 0:
        out_data = value.data[idx, other]
    else:
        out_data = value.data[other, idx]
    out = Value(out_data, parents=(value,), op=op)

    def backward():
        if value.grad is None:
            value.grad = np.zeros_like(value.data)
        if axis == 0:
            np.add.at(value.grad, (idx, other), out.grad)
        else:
            np.add.at(value.grad, (other, idx), out.grad)

    out._backward_fn = backward
    return out, idx


def scatter_rows(values: Value, indices, n: int) -> Value:
    """Sum rows of ``values`` into an (n, width) array at ``indices``.

    The adjoint of :func:`gather`: repeated indices accumulate, untouched
    rows stay zero.
    """
    values = as_value(values)
    indices = np.asarray(indices, dtype=np.int64)
    if values.data.ndim != 2 or indices.shape != (values.data.shape[0],):
        raise GraphError("scatter_rows: need (k, d) values and k indices")
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise GraphError("scatter_rows: index out of range")
    out_data = np.zeros((n, values.data.shape[1]))
    np.add.at(out_data, indices, values.data)
    out = Value(out_data, parents=(values,), op="scatter_rows")

    def backward():
        values._accumulate(out.grad[indices])

    out._backward_fn = backward
    return out


def cross_rows(a: Value, b: Value) -> Value:
    """Row-wise cross product of two (n, 3) arrays."""
    a, b = as_value(a), as_value(b)
    if a.data.shape != b.data.shape or a.data.ndim != 2 or a.data.shape[1] != 3:
        raise GraphError(f"cross_rows: need matching (n, 3) operands, got {a.data.shape} x {b.data.shape}")
    out = Value(np.cross(a.data, b.data), parents=(a, b), op="cross_rows")

    def backward():
        # d<g, a x b> = <b x g, da> + <g x a, db>
        a._accumulate(np.cross(b.data, out.grad))
        b._accumulate(np.cross(out.grad, a.data))

    out._backward_fn = backward
    return out


def repeat_rows(value: Value, n: int) -> Value:
    """Tile a 1-d vector into n identical rows; backward sums the rows."""
    value = as_value(value)
    if value.data.ndim != 1:
        raise GraphError("repeat_rows: operand must be 1-d")
    out = Value(np.tile(value.data, (n, 1)), parents=(value,), op="repeat_rows")

    def backward():
        value._accumulate(out.grad.sum(axis=0))

    out._backward_fn = backward
    return out


# -- multi-layer perceptrons -----------------------------------------------------

_ACTIVATIONS = ("relu", "tanh", "none")


@dataclass
class Layer:
    """One affine layer: weight (out, in), bias (out,), named activation."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise GraphError("layer weight must be 2-d")
        if self.bias.shape != (self.weight.shape[0],):
            raise GraphError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )
        if self.activation not in _ACTIVATIONS:
            raise GraphError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise GraphError("layer parameters must be finite")


@dataclass
class MlpParams:
    """Ordered fully-connected layers with chained dimensions."""

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise GraphError("mlp needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise GraphError(
                    f"layer dims do not chain: {prev.weight.shape} then {cur.weight.shape}"
                )

    @property
    def in_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].weight.shape[0]

    def copy(self):
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def named_arrays(self, prefix: str):
        """Yield (name, array) pairs in a stable order, for checkpoints."""
        for i, layer in enumerate(self.layers):
            yield f"{prefix}.layer{i}.weight", layer.weight
            yield f"{prefix}.layer{i}.bias", layer.bias


def make_mlp(dims: list, activations: list, rng) -> MlpParams:
    """Build an MLP with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights.

    Parameters
    ----------
    dims : list of int
        Layer widths, input first: [in, h1, ..., out].
    activations : list of str
        One per layer, each of "relu" | "tanh" | "none".
    rng : numpy Generator
    """
    if len(dims) < 2 or len(activations) != len(dims) - 1:
        raise GraphError("dims/activations lengths are inconsistent")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(weight, np.zeros(fan_out), act))
    return MlpParams(layers)


class WrappedMlp:
    """Per-step Value wrappers around an MLP's arrays.

    Graphs are single-use, so each training step wraps the current
    parameters freshly; gradients are read back from ``named_grads``.
    """

    def __init__(self, params: MlpParams, prefix: str = "mlp"):
        self.prefix = prefix
        self.layers = [
            (Value(l.weight), Value(l.bias), l.activation) for l in params.layers
        ]

    def named_values(self):
        for i, (w, b, _) in enumerate(self.layers):
            yield f"{self.prefix}.layer{i}.weight", w
            yield f"{self.prefix}.layer{i}.bias", b

    def named_grads(self):
        for name, v in self.named_values():
            grad = v.grad if v.grad is not None else np.zeros_like(v.data)
            yield name, grad


def mlp_forward(params, x: Value) -> Value:
    """Run an MLP on a (batch, in_dim) Value.

    ``params`` may be an `MlpParams` (wrapped on the fly, gradients
    discarded; inference use) or a `WrappedMlp` (training use).
    """
    if isinstance(params, MlpParams):
        params = WrappedMlp(params)
    x = as_value(x)
    if x.data.ndim != 2:
        raise GraphError(f"mlp_forward: input must be 2-d, got {x.data.shape}")
    out = x
    for w, b, act in params.layers:
        if out.data.shape[1] != w.data.shape[1]:
            raise GraphError(
                f"mlp_forward: input width {out.data.shape[1]} does not match layer in={w.data.shape[1]}"
            )
        out = out @ w.transpose() + b
        if act == "relu":
            out = out.relu()
        elif act == "tanh":
            out = out.tanh()
    return out


# -- optimizer --------------------------------------------------------------------


@dataclass
class OptimState:
    """Adaptive-moment optimizer state keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: OptimState) -> None:
    """One adaptive-moment update, in place on the arrays in ``params``.

    Iteration order is the sorted parameter name order, so updates are
    reproducible no matter how the dictionaries were built.

    Raises
    ------
    NonFiniteGradient
        If any gradient contains NaN or infinity; the parameter is named.
    KeyError
        If ``grads`` is missing a parameter present in ``params``.
    """
    for name in sorted(params):
        if not np.isfinite(grads[name]).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise GraphError(
                f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- finite-difference harness ------------------------------------------------------


def grad_check(fn, inputs: list, h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    Parameters
    ----------
    fn : callable
        Takes len(inputs) fresh `Value` arguments, returns a scalar `Value`.
        Must be re-callable (it is invoked 2 * total_coordinates + 1 times).
    inputs : list of ndarray
        Points at which to differentiate.
    h : float
        Central-difference step.

    Returns
    -------
    float
        max over inputs of ||g_ad - g_fd||_inf / max(||g_ad||_inf,
        ||g_fd||_inf, 1e-8).
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    wrapped = [Value(x.copy()) for x in inputs]
    out = fn(*wrapped)
    out.backward()
    ad_grads = [
        w.grad.copy() if w.grad is not None else np.zeros_like(w.data) for w in wrapped
    ]

    worst = 0.0
    for k, x in enumerate(inputs):
        fd = np.zeros_like(x)
        flat = fd.ravel()
        for i in range(x.size):
            bumped = [inp.copy() for inp in inputs]
            bumped[k].ravel()[i] += h
            f_plus = float(fn(*[Value(b) for b in bumped]).data)
            bumped = [inp.copy() for inp in inputs]
            bumped[k].ravel()[i] -= h
            f_minus = float(fn(*[Value(b) for b in bumped]).data)
            flat[i] = (f_plus - f_minus) / (2.0 * h)
        scale = max(
            float(np.abs(ad_grads[k]).max(initial=0.0)),
            float(np.abs(fd).max(initial=0.0)),
            1e-8,
        )
        err = float(np.abs(ad_grads[k] - fd).max(initial=0.0)) / scale
        worst = max(worst, err)
    return worst
