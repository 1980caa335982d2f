"""Reverse-mode autodiff over dense float64 numpy arrays.

Ops build the graph eagerly; Tensor.backward() replays the tape once in
reverse topological order, accumulating into .grad of every tensor that
requires gradients. Only scalar roots may be differentiated. Everything
is float64 end to end; float32 appears only in checkpoint files.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes incompatible with the requested op."""


class NotScalarRoot(ValueError):
    """backward() called on a tensor with more than one element."""


class EmptySequence(ValueError):
    """A sequence op received zero items."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # reverse numpy broadcasting: sum g down to the operand's shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _prev)
        self._prev = _prev
        self._backward = None

    # ------------------------------------------------------------ plumbing

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise NotScalarRoot(f"backward needs a scalar root, got shape {self.data.shape}")
        # iterative topo sort: recursion depth explodes on unrolled episodes
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # ------------------------------------------------------------ arithmetic

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        out = Tensor(self.data + other.data, _prev=(self, other))

        def _bw():
            self._accum(_unbroadcast(out.grad, self.data.shape))
            other._accum(_unbroadcast(out.grad, other.data.shape))

        out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, _prev=(self,))
        out._backward = lambda: self._accum(-out.grad)
        return out

    def __sub__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        out = Tensor(self.data - other.data, _prev=(self, other))

        def _bw():
            self._accum(_unbroadcast(out.grad, self.data.shape))
            other._accum(_unbroadcast(-out.grad, other.data.shape))

        out._backward = _bw
        return out

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        out = Tensor(self.data * other.data, _prev=(self, other))

        def _bw():
            self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
            other._accum(_unbroadcast(out.grad * self.data, other.data.shape))

        out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division unsupported; multiply by a reciprocal")
        return self * (1.0 / other)

    def __pow__(self, p) -> "Tensor":
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents")
        out = Tensor(self.data**p, _prev=(self,))
        out._backward = lambda: self._accum(out.grad * p * self.data ** (p - 1))
        return out

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        out = Tensor(a @ b, _prev=(self, other))

        def _bw():
            self._accum(out.grad @ b.T)
            other._accum(a.T @ out.grad)

        out._backward = _bw
        return out

    # ------------------------------------------------------------ shape ops

    def transpose(self) -> "Tensor":
        out = Tensor(self.data.T, _prev=(self,))
        out._backward = lambda: self._accum(out.grad.T)
        return out

    def reshape(self, *shape) -> "Tensor":
        orig = self.data.shape
        out = Tensor(self.data.reshape(*shape), _prev=(self,))
        out._backward = lambda: self._accum(out.grad.reshape(orig))
        return out

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        if not (0 <= start and start + length <= self.data.shape[axis]):
            raise ShapeMismatch(f"narrow [{start}:{start + length}] out of range on axis {axis}")
        sl = [slice(None)] * self.data.ndim
        sl[axis] = slice(start, start + length)
        sl = tuple(sl)
        out = Tensor(self.data[sl], _prev=(self,))

        def _bw():
            g = np.zeros_like(self.data)
            g[sl] = out.grad
            self._accum(g)

        out._backward = _bw
        return out

    def gather_rows(self, indices) -> "Tensor":
        idx = np.asarray(indices, dtype=np.int64)
        out = Tensor(self.data[idx], _prev=(self,))

        def _bw():
            g = np.zeros_like(self.data)
            np.add.at(g, idx, out.grad)
            self._accum(g)

        out._backward = _bw
        return out

    # ------------------------------------------------------------ reductions

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _prev=(self,))

        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy())

        out._backward = _bw
        return out

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n

    # ------------------------------------------------------------ nonlinearities

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), _prev=(self,))
        out._backward = lambda: self._accum(out.grad * (self.data > 0))
        return out

    def sigmoid(self) -> "Tensor":
        # exp overflow on large negatives saturates to exactly 0.0, which is
        # the right answer; keep numpy quiet about it
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(s, _prev=(self,))
        out._backward = lambda: self._accum(out.grad * s * (1.0 - s))
        return out

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        out = Tensor(t, _prev=(self,))
        out._backward = lambda: self._accum(out.grad * (1.0 - t * t))
        return out

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        out = Tensor(e, _prev=(self,))
        out._backward = lambda: self._accum(out.grad * e)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), _prev=(self,))
        out._backward = lambda: self._accum(out.grad / self.data)
        return out

    def clamp(self, lo: float, hi: float) -> "Tensor":
        out = Tensor(np.clip(self.data, lo, hi), _prev=(self,))
        inside = (self.data > lo) & (self.data < hi)
        out._backward = lambda: self._accum(out.grad * inside)
        return out

    def mask_fill(self, mask, value: float) -> "Tensor":
        """Replace entries where mask is True by `value`; gradients pass
        only through the untouched entries."""
        m = np.asarray(mask, dtype=bool)
        if m.shape != self.data.shape:
            raise ShapeMismatch(f"mask {m.shape} vs data {self.data.shape}")
        out = Tensor(np.where(m, value, self.data), _prev=(self,))
        out._backward = lambda: self._accum(out.grad * ~m)
        return out

    def softmax(self, axis: int = -1) -> "Tensor":
        # shift by the row max: exactly invariant, keeps exp in range
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(s, _prev=(self,))

        def _bw():
            g = out.grad
            self._accum((g - (g * s).sum(axis=axis, keepdims=True)) * s)

        out._backward = _bw
        return out


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [Tensor._lift(t) for t in tensors]
    if not ts:
        raise EmptySequence("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), _prev=tuple(ts))
    sizes = [t.data.shape[axis] for t in ts]

    def _bw():
        offset = 0
        for t, n in zip(ts, sizes):
            sl = [slice(None)] * out.data.ndim
            sl[axis] = slice(offset, offset + n)
            t._accum(out.grad[tuple(sl)])
            offset += n

    out._backward = _bw
    return out


# ---------------------------------------------------------------- losses


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = Tensor._lift(target)
    if pred.data.shape != target.data.shape:
        raise ShapeMismatch(f"mse {pred.data.shape} vs {target.data.shape}")
    return ((pred - target) ** 2).mean()


def bce(prob: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Binary cross entropy, summed over all elements.

    Probabilities are clamped to [eps, 1-eps] so targets of exactly 0/1
    stay finite.
    """
    target = Tensor._lift(target)
    if prob.data.shape != target.data.shape:
        raise ShapeMismatch(f"bce {prob.data.shape} vs {target.data.shape}")
    p = prob.clamp(eps, 1.0 - eps)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).sum()


def ce_from_scores(scores: Tensor, target_index) -> Tensor:
    """Cross entropy from raw scores, summed over rows.

    Softmax is applied internally via logsumexp. -inf entries mark masked
    candidates: they get probability 0 and zero gradient. The target entry
    of each row must be finite.
    """
    if scores.data.ndim != 2:
        raise ShapeMismatch(f"ce_from_scores wants 2-D scores, got {scores.data.shape}")
    idx = np.atleast_1d(np.asarray(target_index, dtype=np.int64))
    if idx.shape != (scores.data.shape[0],):
        raise ShapeMismatch(f"{idx.shape[0]} targets for {scores.data.shape[0]} rows")
    x = scores.data
    rows = np.arange(x.shape[0])
    tgt = x[rows, idx]
    if not np.isfinite(tgt).all():
        raise ValueError("target entry is masked (-inf)")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    lse = np.log(z[:, 0]) + m[:, 0]
    out = Tensor(np.asarray((lse - tgt).sum()), _prev=(scores,))

    def _bw():
        d = p.copy()
        d[rows, idx] -= 1.0
        scores._accum(out.grad * d)

    out._backward = _bw
    return out
