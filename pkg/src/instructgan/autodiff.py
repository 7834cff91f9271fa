"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

The engine is a Wengert list: while a :class:`GradientTape` is active, every
operation that touches a gradient-requiring tensor appends one entry, and
``tape.gradients`` replays the entries in reverse execution order, visiting
each node exactly once.  Outside a tape the same functions are plain numpy
forward computations with no bookkeeping.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

PROB_EPS = 1e-7  # probability clamp used before any log of a probability

_ACTIVE_TAPES: list["GradientTape"] = []


class Tensor:
    """Dense float64 array plus a flag marking it as a gradient source."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut off from any recorded graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routing through the module-level ops
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class _TapeEntry:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class GradientTape:
    """Records operations in execution order; maps tensor identity to gradient.

    Use as a context manager around the forward pass, then call
    :meth:`gradients` once.  Single-writer: one training step owns a tape.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "GradientTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tapes must nest"
        return False

    def gradients(self, loss: Tensor, sources) -> list[np.ndarray]:
        """d(loss)/d(source) for each source, in source order.

        ``loss`` must be a scalar produced under this tape.  Gradients of
        sources the loss does not depend on come back as zeros of the right
        shape.
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError("loss must be a scalar")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            # every entry consuming this output was already processed, so the
            # accumulated gradient is final; entries hold strong references,
            # which keeps tensor ids stable for the life of the tape
            gout = grads.get(id(entry.output))
            if gout is None:
                continue
            gins = entry.backward(gout)
            for tensor, gin in zip(entry.inputs, gins):
                if gin is None or not tensor.requires_grad:
                    continue
                acc = grads.get(id(tensor))
                if acc is None:
                    grads[id(tensor)] = gin
                else:
                    grads[id(tensor)] = acc + gin
        out = []
        for src in sources:
            g = grads.get(id(src))
            out.append(np.zeros_like(src.data) if g is None else g)
        return out


def _record(output: Tensor, inputs, backward) -> Tensor:
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _ACTIVE_TAPES[-1].entries.append(_TapeEntry(output, inputs, backward))
    return output


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    e = out.data
    return _record(out, (a,), lambda g: (g * e,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient passes only where unclipped."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = Tensor(np.clip(a.data, lo, hi))
    return _record(out, (a,), lambda g: (g * inside,))


def sigmoid(a: Tensor) -> Tensor:
    # numerically symmetric form, no overflow either side
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(out_data)
    y = out.data
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _record(out, (a,), lambda g: (g * (cdf + x * pdf),))


# ---------------------------------------------------------------------------
# shape / indexing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def index(a: Tensor, idx) -> Tensor:
    """Basic slice/int indexing with scatter-add backward."""
    out = Tensor(a.data[idx])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _record(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward)


def sum_(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer ids."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def backward(g):
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        ggamma = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = (inv / d) * (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        else:
            gx = None
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# probabilistic primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along ``axis``; rejects non-finite input."""
    x = a.data
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), backward)


def gumbel_softmax(logits: Tensor, tau: float, noise: np.ndarray) -> Tensor:
    """softmax((logits + noise) / tau); differentiable w.r.t. ``logits``.

    ``noise`` is a fixed array of Gumbel(0,1) draws (see streams.Stream.gumbel),
    so repeated evaluation at the same noise is deterministic.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != logits.shape:
        raise ValueError(f"noise shape {noise.shape} != logits shape {logits.shape}")
    perturbed = add(logits, Tensor(noise))
    return softmax(scale(perturbed, 1.0 / float(tau)), axis=-1)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward the hard one-hot rows; route gradients to the soft rows."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ValueError("hard/soft shape mismatch")
    out = Tensor(hard)
    return _record(out, (soft,), lambda g: (g,))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over unmasked steps.

    ``logits`` is (steps, vocab); ``targets`` integer ids; ``mask`` an optional
    per-step include flag.  A fully masked input returns 0.0 and sets
    ``cross_entropy.last_empty`` as a warning flag for the caller.
    """
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise ValueError("logits must be (steps, vocab) with one target per step")
    if mask is None:
        mask = np.ones(x.shape[0], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    included = np.nonzero(mask)[0]
    cross_entropy.last_empty = included.size == 0
    if included.size == 0:
        out = Tensor(0.0)
        return _record(out, (logits,), lambda g: (np.zeros_like(x),))
    if targets[included].min() < 0 or targets[included].max() >= x.shape[1]:
        raise ValueError("target id out of vocabulary range")
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz[included] - shifted[included, targets[included]]
    out = Tensor(nll.mean())
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def backward(g):
        gx = np.zeros_like(x)
        gx[included] = probs[included]
        gx[included, targets[included]] -= 1.0
        gx[included] *= g / included.size
        return (gx,)

    return _record(out, (logits,), backward)


cross_entropy.last_empty = False


def binary_cross_entropy(p: Tensor, label: int) -> Tensor:
    """-label*ln p - (1-label)*ln(1-p) with p clamped into [eps, 1-eps]."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    pc = clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    if label == 1:
        return neg(log(pc))
    return neg(log(sub(Tensor(1.0), pc)))
