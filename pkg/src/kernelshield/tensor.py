"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  Tensors receive a
monotonically increasing id on creation, so creation order is a topological
order of the compute graph and :meth:`Tensor.backward` simply walks the
reachable nodes by descending id.

Shapes must match exactly for elementwise operations.  The only broadcast
supported is the channel-wise bias add used by ``linear`` and ``conv2d``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_ids = itertools.count()

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised for invalid backward calls."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"
        self._id = next(_node_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ---------------------------------------------------------
    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        ``seed`` is the upstream gradient; it may be omitted only for scalar
        outputs.  Repeated calls accumulate.
        """
        if not self.requires_grad:
            raise GradientError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise GradientError(
                    f"backward() on non-scalar output of shape {self.shape} needs an explicit seed"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {self.shape}")

        grads = {self._id: seed}
        for node in _reverse_topological(self):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use l2_normalize or scalar division")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, d: int):
        return power(self, d)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _reverse_topological(root: Tensor) -> list:
    seen = {root._id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen[p._id] = p
                stack.append(p)
    return [seen[k] for k in sorted(seen, reverse=True)]


def _result(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return _result(a.data + b, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -b)
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        return _result(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def power(a: Tensor, d: int) -> Tensor:
    if int(d) != d or d < 1:
        raise ValueError(f"power exponent must be an integer >= 1, got {d}")
    d = int(d)
    if d == 1:
        return _result(a.data.copy(), (a,), lambda g: (g,), "pow")
    ad = a.data
    return _result(ad**d, (a,), lambda g: (g * d * ad ** (d - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept_shape), a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a: Tensor, start: int = 1) -> Tensor:
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a.flat[index]``; the result has ``index``'s shape."""
    index = np.asarray(index, dtype=np.int64)
    flat = a.data.reshape(-1)

    def backward(g):
        out = np.zeros(flat.shape, dtype=g.dtype)
        np.add.at(out, index.reshape(-1), g.reshape(-1))
        return (out.reshape(a.shape),)

    return _result(flat[index], (a,), backward, "take")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product or batched 3-D product with equal batch size."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul needs two 2-D or two 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _result(ad @ bd, (a, b), backward, "matmul")


def inner_product(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "inner_product")
    ad, bd = a.data, b.data
    out = np.asarray(np.dot(ad.reshape(-1), bd.reshape(-1)))
    return _result(out, (a, b), lambda g: (g * bd, g * ad), "inner_product")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, D) and weight (K, D)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return _result(out, (x, weight), lambda g: (g @ wd, g.T @ xd), "linear")
    bias = as_tensor(bias)
    if bias.shape != (wd.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({wd.shape[0]},)")
    return _result(
        out + bias.data, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)), "linear"
    )


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, square stride and zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {wc}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    wd = weight.data
    out = np.einsum("nchwij,fcij->nfhw", win, wd, optimize=True)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
        out = out + bias.data.reshape(1, f, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def input_grad(g):
        if stride == 1:
            # correlation of the zero-padded output gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gxp = np.einsum("nfhwij,fcij->nchw", gwin, wd[:, :, ::-1, ::-1], optimize=True)
        else:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                        "nfhw,fc->nchw", g, wd[:, :, i, j], optimize=True)
        return gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp

    def backward(g):
        gx = input_grad(g) if x.requires_grad else None
        gw = np.einsum("nchwij,nfhw->fcij", win, g, optimize=True) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(np.ascontiguousarray(out), parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# losses and normalisation
# ---------------------------------------------------------------------------

def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax of an (N, K) tensor."""
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _result(out, (logits,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),), "log_softmax")


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of row-wise softmax against integer labels.

    ``reduction`` is ``"mean"`` (default), ``"sum"`` or ``"none"``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per = lse - shifted[np.arange(n), labels]
    probs = softmax(z)
    onehot = np.zeros_like(z)
    onehot[np.arange(n), labels] = 1.0
    dz = probs - onehot

    if reduction == "none":
        return _result(per, (logits,), lambda g: (dz * g[:, None],), "cross_entropy")
    scale = 1.0 / n if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    return _result(np.asarray(per.sum() * scale), (logits,), lambda g: (dz * (g * scale),), "cross_entropy")


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Divide each vector along ``axis`` by its Euclidean norm."""
    ad = a.data
    norm = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    y = ad / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result(y, (a,), backward, "l2_normalize")
