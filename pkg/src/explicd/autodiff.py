"""Reverse-mode automatic differentiation on float64 numpy arrays.

The engine is define-by-run: a Tape records one entry per operation in
execution order (which is therefore already topological), and backward()
walks the records once in reverse, accumulating gradients per node. Tensors
created without a tape are constants; operations only record when at least
one input lives on a tape, so the same forward code serves training and
inference.

A tape and its tensors belong to one thread; constants are immutable and
may be shared freely.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

NORM_FLOOR = 1e-9  # below this L2 norm, l2_normalize passes rows through
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _asarray(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """Shape-tagged float64 array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, values, tape: "Tape | None" = None):
        self.data = _asarray(values)
        self.tape = tape
        self.node = tape._new_node() if tape is not None else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, not a scalar")
        return float(self.data)

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    # arithmetic sugar; scalars multiply/shift without joining the graph
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis: int | None = None):
        return sum_along(self, axis)

    def mean(self, axis: int | None = None):
        return mean_along(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


class Tape:
    """Gradient tape: ordered op records plus node-id bookkeeping."""

    __slots__ = ("_records", "_next_node")

    def __init__(self):
        self._records: list[tuple[int, list[tuple[int, object]]]] = []
        self._next_node = 0

    def _new_node(self) -> int:
        nid = self._next_node
        self._next_node += 1
        return nid

    def leaf(self, values) -> Tensor:
        """Register a trainable leaf; backward() reports a gradient for it."""
        return Tensor(values, tape=self)

    def backward(self, loss: Tensor) -> "GradientMap":
        """Accumulate d(loss)/d(node) for every node reachable from loss.

        Records are replayed exactly once, newest first; a tensor used by
        several downstream ops receives the sum of their contributions.
        """
        if loss.tape is not self:
            raise ValueError("backward: loss does not belong to this tape")
        if loss.data.shape != ():
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=np.float64)}
        for out_node, inputs in reversed(self._records):
            g = grads.get(out_node)
            if g is None:
                continue
            for in_node, local in inputs:
                contrib = local(g)
                held = grads.get(in_node)
                grads[in_node] = contrib if held is None else held + contrib
        return GradientMap(grads)


class GradientMap:
    """Result of Tape.backward: gradients keyed by tensor."""

    __slots__ = ("_grads",)

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node is None:
            raise KeyError("tensor is a constant, not on any tape")
        g = self._grads.get(t.node)
        if g is None:
            return np.zeros(t.data.shape, dtype=np.float64)
        return np.broadcast_to(g, t.data.shape).astype(np.float64, copy=False)


def constant(values) -> Tensor:
    """Off-tape tensor; receives no gradient and records nothing."""
    return Tensor(values, tape=None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _joint_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _make(data: np.ndarray, parents: list[tuple[Tensor, object]]) -> Tensor:
    tape = _joint_tape(*(p for p, _ in parents))
    out = Tensor(data, tape=tape)
    if tape is not None:
        inputs = [(p.node, fn) for p, fn in parents if p.tape is not None]
        tape._records.append((out.node, inputs))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_data(name: str, a: Tensor, b: Tensor, op) -> np.ndarray:
    try:
        return op(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("add", a, b, np.add)
    return _make(data, [(a, lambda g: _unbroadcast(g, a.shape)),
                        (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("subtract", a, b, np.subtract)
    return _make(data, [(a, lambda g: _unbroadcast(g, a.shape)),
                        (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("multiply", a, b, np.multiply)
    ad, bd = a.data, b.data
    return _make(data, [(a, lambda g: _unbroadcast(g * bd, a.shape)),
                        (b, lambda g: _unbroadcast(g * ad, b.shape))])


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar without a second graph node."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, [(a, lambda g: g * c)])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # shared right operand (linear layer): fold leading axes into one
        # GEMM instead of looping many small ones
        rows, cols = ad.shape[:-1], bd.shape[-1]
        a2 = np.ascontiguousarray(ad).reshape(-1, ad.shape[-1])
        data = (a2 @ bd).reshape(rows + (cols,))

        def back_a(g):
            return (g.reshape(-1, cols) @ bd.T).reshape(ad.shape)

        def back_b(g):
            return a2.T @ g.reshape(-1, cols)

        return _make(data, [(a, back_a), (b, back_b)])
    data = _binary_data("matmul", a, b, np.matmul)
    return _make(data, [
        (a, lambda g: _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)),
        (b, lambda g: _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)),
    ])


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2 axes, got shape {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2),
                 [(a, lambda g: np.swapaxes(g, -1, -2))])


def permute(a, axes) -> Tensor:
    """Reorder all axes (general transpose)."""
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} are not a permutation for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes),
                 [(a, lambda g: np.transpose(g, inverse))])


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    orig = a.shape
    return _make(data, [(a, lambda g: g.reshape(orig))])


def take(a, key) -> Tensor:
    """Basic indexing (ints, slices, Ellipsis); gradient scatters into zeros."""
    a = as_tensor(a)
    data = a.data[key]
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=np.float64)
        full[key] += g
        return full

    return _make(data, [(a, back)])


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}"
        ) from exc
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    parents = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def back(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        parents.append((t, back))
    return _make(data, parents)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _make(data, [(a, lambda g: g * data)])


def log(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError(f"log: empty input of shape {a.shape}")
    if np.min(a.data) <= 0.0:
        raise ValueError(f"log: requires strictly positive input, min value {np.min(a.data)}")
    ad = a.data
    return _make(np.log(ad), [(a, lambda g: g / ad)])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _make(data, [(a, lambda g: g * (1.0 - data * data))])


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    data = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + (3 * 0.044715) * x2)
        return g * (0.5 * (1.0 + t) + (0.5 * x) * ((1.0 - t * t) * dinner))

    return _make(data, [(a, back)])


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"softmax: empty or missing last axis in shape {a.shape}")
    z = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / np.sum(e, axis=-1, keepdims=True)

    def back(g):
        dot = np.sum(g * data, axis=-1, keepdims=True)
        return data * (g - dot)

    return _make(data, [(a, back)])


def sum_along(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        shape = a.shape
        return _make(np.sum(a.data), [(a, lambda g: np.broadcast_to(g, shape).copy())])
    data = np.sum(a.data, axis=axis)
    shape = a.shape

    def back(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _make(data, [(a, back)])


def mean_along(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("mean: empty tensor")
    if axis is None:
        n = a.data.size
        shape = a.shape
        return _make(np.mean(a.data), [(a, lambda g: np.broadcast_to(g / n, shape).copy())])
    n = a.shape[axis]
    data = np.mean(a.data, axis=axis)
    shape = a.shape

    def back(g):
        return np.broadcast_to(np.expand_dims(g / n, axis), shape).copy()

    return _make(data, [(a, back)])


def l2_normalize(a) -> Tensor:
    """Scale rows (last axis) to unit L2 norm.

    Rows with norm below NORM_FLOOR pass through unchanged (identity
    gradient) and trigger a warning; normalizing them would put a
    near-singular 1/norm into both the values and the gradient.
    """
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("l2_normalize: scalar input has no axis to normalize")
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    safe = norm >= NORM_FLOOR
    if not np.all(safe):
        warnings.warn("l2_normalize: input row norm below floor, passing through unnormalized")
    inv = np.where(safe, 1.0 / np.where(safe, norm, 1.0), 1.0)
    data = a.data * inv

    def back(g):
        dot = np.sum(g * data, axis=-1, keepdims=True)
        return np.where(safe, (g - data * dot) * inv, g)

    return _make(data, [(a, back)])


def layer_norm(a, gain, bias) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match feature dim ({d},)"
        )
    mu = np.mean(a.data, axis=-1, keepdims=True)
    centered = a.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    data = xhat * gain.data + bias.data
    gd = gain.data

    def back_a(g):
        dxhat = g * gd
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    return _make(data, [
        (a, back_a),
        (gain, lambda g: _unbroadcast(g * xhat, gain.shape)),
        (bias, lambda g: _unbroadcast(g, bias.shape)),
    ])


def cross_entropy_with_logits(logits, labels) -> Tensor:
    """Softmax cross-entropy, fused for stability.

    logits: (n,) with an int label, or (batch, n) with an int vector; the
    batched form returns the mean loss over rows.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross_entropy_with_logits: labels must be integers")
    if logits.ndim == 1:
        squeeze = True
        ld = logits.data[None, :]
        lab = labels.reshape(1)
    elif logits.ndim == 2:
        squeeze = False
        ld = logits.data
        lab = labels
        if lab.shape != (ld.shape[0],):
            raise ShapeError(
                f"cross_entropy_with_logits: labels shape {lab.shape} does not match batch {ld.shape[0]}"
            )
    else:
        raise ShapeError(f"cross_entropy_with_logits: logits must be 1-d or 2-d, got {logits.shape}")
    n = ld.shape[-1]
    if n == 0:
        raise ShapeError("cross_entropy_with_logits: empty class axis")
    if np.any(lab < 0) or np.any(lab >= n):
        raise ValueError(f"cross_entropy_with_logits: label out of range [0, {n})")
    rows = np.arange(ld.shape[0])
    m = np.max(ld, axis=-1, keepdims=True)
    z = ld - m
    e = np.exp(z)
    sums = np.sum(e, axis=-1)
    # log-sum-exp minus the picked logit, both in max-shifted form: exact
    # (log n) on uniform rows and stable everywhere
    losses = np.log(sums) - z[rows, lab]
    probs = e / sums[:, None]
    batch = ld.shape[0]

    def back(g):
        p = probs.copy()
        p[rows, lab] -= 1.0
        p *= float(g) / batch
        return p[0] if squeeze else p

    return _make(np.asarray(np.mean(losses)), [(logits, back)])


def corrupt_gradient(a, factor: float) -> Tensor:
    """Negative-control hook: identity forward, backward scaled by 1+factor.

    Finite differences see the unchanged forward, the tape reports the skewed
    gradient, so any nonzero factor must make a gradient check fail.
    """
    a = as_tensor(a)
    return _make(a.data, [(a, lambda g: g * (1.0 + factor))])


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter max relative error of tape gradients vs central differences."""

    passed: bool
    tol: float
    step: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            status = "ok  " if err <= self.tol else "FAIL"
            out.append(f"{status} {name:32s} max rel err {err:.3e}")
        return out


def _eval_scalar(f, params: dict[str, np.ndarray]) -> float:
    loss = f({k: constant(v) for k, v in params.items()})
    if loss.data.shape != ():
        raise ShapeError(f"finite_diff_check: f must return a scalar, got shape {loss.shape}")
    return float(loss.data)


def finite_diff_check(f, params: dict[str, np.ndarray], step: float = 1e-5,
                      tol: float = 1e-4) -> GradCheckReport:
    """Check tape gradients of f against central finite differences.

    f maps a dict of named Tensors to a scalar Tensor and must be
    deterministic. Relative error per element is
    |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|); a parameter passes when its
    max error is <= tol.
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    params = {k: _asarray(v).copy() for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    loss = f(leaves)
    if loss.data.shape != ():
        raise ShapeError(f"finite_diff_check: f must return a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise ValueError("finite_diff_check: non-finite loss at the base point")
    grads = tape.backward(loss)

    errors: dict[str, float] = {}
    for name, arr in params.items():
        g_ad = grads[leaves[name]]
        flat = arr.reshape(-1)
        g_fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _eval_scalar(f, params)
            flat[i] = orig - step
            down = _eval_scalar(f, params)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError(
                    f"finite_diff_check: non-finite loss perturbing {name}[{i}]"
                )
            g_fd[i] = (up - down) / (2.0 * step)
        g_fd = g_fd.reshape(arr.shape)
        denom = np.maximum(1e-12, np.abs(g_ad) + np.abs(g_fd))
        rel = np.abs(g_ad - g_fd) / denom
        errors[name] = float(np.max(rel)) if rel.size else 0.0

    passed = all(e <= tol for e in errors.values())
    return GradCheckReport(passed=passed, tol=tol, step=step, errors=errors)
