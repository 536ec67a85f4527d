"""Polynomial feature kernels and the kernel-matching loss.

For two feature maps ``v_i, v_j`` of one layer, flattened to length N, the
kernel is ``(<v_i, v_j> + e) ** d``.  A layer with C maps yields a C x C
kernel matrix; the transform loss compares these matrices to stored targets.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PHI_MAX_DIM = 100_000


@dataclass(frozen=True)
class KernelParams:
    e: float = 0.0
    d: int = 1

    def __post_init__(self):
        if self.e < 0:
            raise ValueError(f"kernel offset e must be >= 0, got {self.e}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"kernel degree d must be an integer >= 1, got {self.d}")
        object.__setattr__(self, "d", int(self.d))


@dataclass
class KernelTargetSet:
    """Target kernel matrices of one class sample, keyed by tap index."""

    label: int
    matrices: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def taps(self):
        return tuple(sorted(self.matrices))


def kernel_fn(v_i, v_j, params: KernelParams) -> Tensor:
    v_i, v_j = T.as_tensor(v_i), T.as_tensor(v_j)
    if v_i.shape != v_j.shape:
        raise ShapeError(f"kernel_fn: feature maps differ in shape {v_i.shape} vs {v_j.shape}")
    return T.power(T.inner_product(v_i, v_j) + params.e, params.d)


def explicit_phi(v: np.ndarray, params: KernelParams) -> np.ndarray:
    """Explicit feature map with ``<phi(u), phi(v)> == kernel_fn(u, v)``.

    Monomials of total degree ``d`` over the coordinates of ``v`` (plus the
    constant ``sqrt(e)`` when ``e > 0``), each weighted by the square root of
    its multinomial coefficient.  The output has ``binom(N + d, d)`` entries
    for ``e > 0`` and ``binom(N + d - 1, d)`` for ``e == 0``.
    Test oracle only: the dimension grows combinatorially.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    coords = np.append(v, math.sqrt(params.e)) if params.e > 0 else v
    n, d = coords.size, params.d
    bound = math.comb(v.size + d, d)
    if bound > PHI_MAX_DIM:
        raise ValueError(f"explicit_phi dimension {bound} exceeds the enumeration bound {PHI_MAX_DIM}")
    dim = math.comb(n + d - 1, d)
    out = np.empty(dim)
    for idx, combo in enumerate(itertools.combinations_with_replacement(range(n), d)):
        counts = np.bincount(combo, minlength=n)
        coef = math.factorial(d)
        for c in counts:
            coef //= math.factorial(int(c))
        out[idx] = math.sqrt(coef) * np.prod(coords[list(combo)])
    return out


def kernel_matrix(features, params: KernelParams, normalize: bool = False) -> Tensor:
    """Kernel matrix of (C, H, W) features, or a batch of them shaped (B, C, H, W).

    With ``normalize`` the matrix is divided by ``C**2 * N**2`` (off by default).
    """
    f = T.as_tensor(features)
    if f.ndim == 3:
        flat = T.reshape(f, (f.shape[0], -1))
        gram = T.matmul(flat, T.transpose(flat, (1, 0)))
    elif f.ndim == 4:
        flat = T.reshape(f, (f.shape[0], f.shape[1], -1))
        gram = T.matmul(flat, T.transpose(flat, (0, 2, 1)))
    else:
        raise ShapeError(f"kernel_matrix expects (C,H,W) or (B,C,H,W), got {f.shape}")
    g = T.power(gram + params.e, params.d) if params.e else T.power(gram, params.d)
    if normalize:
        c, n = flat.shape[-2], flat.shape[-1]
        g = g * (1.0 / (c * c * n * n))
    return g


def kernel_loss(current, target, params: KernelParams, normalize: bool = False) -> Tensor:
    """Sum of squared differences between current and target kernel matrices.

    Batched input (B, C, H, W) with targets (B, C, C) gives a (B,) loss vector.
    """
    g = kernel_matrix(current, params, normalize)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=g.dtype)
    if target.shape != g.shape:
        raise ShapeError(f"kernel_loss: current kernel {g.shape} vs target {target.shape}")
    diff = g - Tensor(target)
    sq = diff * diff
    return T.tsum(sq) if g.ndim == 2 else T.tsum(sq, axis=(1, 2))


def total_kernel_loss(taps: Mapping[int, Tensor], targets, layers: Sequence[int],
                      params: KernelParams, normalize: bool = False,
                      per_layer: Optional[dict] = None) -> Tensor:
    """Unweighted sum of per-layer kernel losses over ``layers``.

    ``targets`` is a :class:`KernelTargetSet` or a plain mapping of tap index
    to target matrices.  If ``per_layer`` is given it receives each layer's
    loss values as numpy arrays.
    """
    layers = list(layers)
    if not layers:
        raise ValueError("total_kernel_loss needs at least one layer")
    mats = targets.matrices if isinstance(targets, KernelTargetSet) else targets
    missing = [l for l in layers if l not in taps or l not in mats]
    if missing:
        raise KeyError(f"layers {missing} are missing from taps or targets")
    total = None
    for layer in layers:
        loss = kernel_loss(taps[layer], mats[layer], params, normalize)
        if per_layer is not None:
            per_layer[layer] = np.array(loss.data, copy=True)
        total = loss if total is None else total + loss
    return total


def loss_shares(per_layer: Mapping[int, np.ndarray]) -> Dict[int, np.ndarray]:
    """Each layer's percentage share of the summed loss."""
    total = sum(np.asarray(v, dtype=np.float64) for v in per_layer.values())
    safe = np.where(total > 0, total, 1.0)
    return {k: 100.0 * np.asarray(v) / safe for k, v in per_layer.items()}


def compute_targets(model, image: np.ndarray, label: int, layers: Iterable[int],
                    params: KernelParams, normalize: bool = False) -> KernelTargetSet:
    layers = sorted(set(layers))
    _, feats = model.forward_with_taps(image, layers)
    return KernelTargetSet(
        label, {l: kernel_matrix(feats[l][0], params, normalize).data for l in layers}
    )
