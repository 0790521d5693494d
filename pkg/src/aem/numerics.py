"""Eager, tape-based reverse-mode autodiff over float64 numpy arrays.

Every op records a node on the tape that owns its operands.  ``backward``
walks the tape once in reverse and returns one gradient per parameter leaf.

    tape = Tape()
    w = tape.param("w", np.ones(3))
    loss = sum_(w * w)
    grads = tape.backward(loss)     # {"w": array([2., 2., 2.])}
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

NEG_INF = -1e30
COS_EPS = 1e-12


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class GradCheckError(RuntimeError):
    pass


class Tensor:
    """A value on a tape.  ``data`` is always a float64 ndarray."""

    __slots__ = ("data", "tape", "parents", "grad_fn", "name", "index")

    def __init__(self, data, tape: "Tape | None" = None, parents=(), grad_fn=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.grad_fn = grad_fn
        self.name = name
        self.index = -1
        if tape is not None:
            tape._record(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(()))

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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Records tensors in creation order, which is a topological order."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def _record(self, t: Tensor) -> None:
        t.index = len(self.nodes)
        self.nodes.append(t)

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already bound on this tape")
        t = Tensor(value, self, name=name)
        self.params[name] = t
        return t

    def const(self, value) -> Tensor:
        return Tensor(value)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is None:  # constant loss: nothing depends on the parameters
            return {name: np.zeros_like(leaf.data) for name, leaf in self.params.items()}
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.data)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or node.grad_fn is None:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or parent.tape is not self:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        out = {}
        for name, leaf in self.params.items():
            g = grads[leaf.index]
            out[name] = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
        return out


def forward(fn: Callable[[dict[str, Tensor]], object], bindings: Mapping[str, np.ndarray]):
    """Bind ``bindings`` as parameter leaves on a fresh tape and run ``fn``.

    Returns ``(tape, outputs)``.
    """
    tape = Tape()
    leaves = {name: tape.param(name, value) for name, value in bindings.items()}
    return tape, fn(leaves)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    return tape.backward(loss)


# -- helpers ---------------------------------------------------------------


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    for t in ts:
        if t.tape is not None:
            return t.tape
    return None


def _make(data, parents, grad_fn) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data)
    return Tensor(data, tape, parents, grad_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    return _make(
        np.where(pos, a.data, slope * a.data), (a,), lambda g: (np.where(pos, g, slope * g),)
    )


def elu(a: Tensor) -> Tensor:
    pos = a.data > 0
    neg = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, neg)
    return _make(out, (a,), lambda g: (np.where(pos, g, g * (neg + 1.0)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; smooth everywhere, which keeps finite differences clean
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def grad(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _make(out, (a,), grad)


# -- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def grad(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), grad)


def take_rows(a: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.intp)
    return getitem(a, rows)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), grad)


def broadcast_to(a: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# -- reductions ------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def grad(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(list(range(ad.ndim - 1)), list(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.multiply.outer(ad, g)
            if gb.ndim > 2:
                gb = np.moveaxis(gb, 0, -2)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation & similarity --------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def grad(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), grad)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    def grad(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), grad)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = COS_EPS) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    floored = np.maximum(norm, eps)
    out = a.data / floored
    active = norm > eps

    def grad(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - out * proj) / floored, g / floored),)

    return _make(out, (a,), grad)


def cosine(u: Tensor, v: Tensor, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis`` with the norm floored at 1e-12."""
    return sum_(l2_normalize(_wrap(u), axis) * l2_normalize(_wrap(v), axis), axis=axis)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine between rows of ``a`` (n, d) and rows of ``b`` (m, d)."""
    return matmul(l2_normalize(_wrap(a)), swap_last(l2_normalize(_wrap(b))))


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross entropy over the last axis of 2-D ``logits``."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape)
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    picked = getitem(log_softmax(logits), (np.arange(len(targets)), targets))
    total = -sum_(picked)
    if reduction == "sum":
        return total
    return total * (1.0 / len(targets))


# -- finite-difference checking --------------------------------------------


def relative_error(a, n, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def resolution_floor(f0: float, epsilon: float, ulps: int = 16, target: float = 1e-4) -> float:
    """Smallest gradient a central difference can measure to ``target`` relative error.

    Below it, ``ulps`` units of round-off in the loss already exceed the target.
    """
    return max(1e-8, ulps * float(np.spacing(abs(f0))) / (2.0 * epsilon) / target)


def grad_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    analytic: Mapping[str, np.ndarray] | None = None,
    floor: float | str = 1e-8,
) -> dict[str, float]:
    """Compare ``backward`` against central differences, per parameter.

    ``loss_fn`` receives a dict of leaf tensors on a fresh tape and returns a
    scalar tensor.  With ``max_entries`` only that many coordinates per
    parameter are probed (chosen by ``rng``).  ``analytic`` overrides the
    backward gradients; it exists so callers can run negative controls.
    ``floor`` is the denominator floor of the relative error; ``"auto"`` uses
    the round-off resolution of the loss value (see ``resolution_floor``).

    Returns ``{name: max relative error}``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values) -> float:
        tape = Tape()
        leaves = {k: tape.param(k, v) for k, v in values.items()}
        out = loss_fn(leaves)
        if out.data.size != 1:
            raise ValueError(f"loss_fn must return a scalar, got shape {out.shape}")
        return float(out.data.reshape(()))

    f0 = evaluate(params)
    if evaluate(params) != f0:
        raise GradCheckError("loss_fn is not deterministic at identical parameters")
    if floor == "auto":
        floor = resolution_floor(f0, epsilon)

    if analytic is None:
        tape = Tape()
        leaves = {k: tape.param(k, v) for k, v in params.items()}
        analytic = tape.backward(loss_fn(leaves))

    rng = rng if rng is not None else np.random.default_rng(0)
    report = {}
    for name, value in params.items():
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        worst = 0.0
        for k in flat_idx:
            idx = np.unravel_index(k, value.shape)
            orig = value[idx]
            value[idx] = orig + epsilon
            fp = evaluate(params)
            value[idx] = orig - epsilon
            fm = evaluate(params)
            value[idx] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            worst = max(worst, float(relative_error(analytic[name][idx], numeric, floor)))
        report[name] = worst
    return report
