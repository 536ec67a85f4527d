"""Tappable residual CNN classifier built on :mod:`kernelshield.tensor`.

Architecture (all convolutions 3x3 with padding 1 unless noted)::

    conv ─(tap 0)─ relu ─(tap 1)─ block1 ─(tap 2)─ block2 ─(tap 3)─
         block3 ─(tap 4)─ block4 ─(tap 5)─ global-avg-pool ─ linear

Each residual block computes ``relu(conv_b(relu(conv_a(x))) + shortcut(x))``,
where ``shortcut`` is the identity or a strided 1x1 convolution when the
width or resolution changes.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

NUM_TAPS = 6
TAP_NAMES = (
    "after conv1",
    "after relu1",
    "after block1",
    "after block2",
    "after block3",
    "after block4",
)


@dataclass(frozen=True)
class ModelSpec:
    in_shape: Tuple[int, int, int] = (3, 8, 8)
    num_classes: int = 4
    stem_width: int = 8
    block_widths: Tuple[int, int, int, int] = (8, 16, 16, 16)
    block_strides: Tuple[int, int, int, int] = (1, 2, 1, 1)
    tap_indices: Tuple[int, ...] = (0, 1, 2, 3, 4, 5)

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(s) for s in self.in_shape))
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        object.__setattr__(self, "block_strides", tuple(int(s) for s in self.block_strides))
        object.__setattr__(self, "tap_indices", tuple(int(t) for t in self.tap_indices))
        if len(self.in_shape) != 3:
            raise ValueError("in_shape must be (C, H, W)")
        if len(self.block_widths) != 4 or len(self.block_strides) != 4:
            raise ValueError("exactly four residual blocks are required")
        if self.tap_indices != tuple(range(NUM_TAPS)):
            raise ValueError("tap indices must be 0..5 in forward order")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def layers(self) -> List[dict]:
        """Ordered layer descriptions."""
        c = self.in_shape[0]
        out = [{"kind": "conv", "in": c, "out": self.stem_width, "stride": 1}, {"kind": "relu"}]
        width = self.stem_width
        for i, (w, s) in enumerate(zip(self.block_widths, self.block_strides)):
            out.append({"kind": "block", "index": i + 1, "in": width, "out": w, "stride": s})
            width = w
        out.append({"kind": "pool"})
        out.append({"kind": "linear", "in": width, "out": self.num_classes})
        return out

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        c = self.in_shape[0]
        shapes = [("conv1.weight", (self.stem_width, c, 3, 3)), ("conv1.bias", (self.stem_width,))]
        width = self.stem_width
        for i, (w, s) in enumerate(zip(self.block_widths, self.block_strides), start=1):
            shapes += [
                (f"block{i}.conv_a.weight", (w, width, 3, 3)),
                (f"block{i}.conv_a.bias", (w,)),
                (f"block{i}.conv_b.weight", (w, w, 3, 3)),
                (f"block{i}.conv_b.bias", (w,)),
            ]
            if w != width or s != 1:
                shapes += [
                    (f"block{i}.shortcut.weight", (w, width, 1, 1)),
                    (f"block{i}.shortcut.bias", (w,)),
                ]
            width = w
        shapes += [("fc.weight", (self.num_classes, width)), ("fc.bias", (self.num_classes,))]
        return shapes

    def param_count(self) -> int:
        return int(sum(np.prod(s) for _, s in self.param_shapes()))

    def tap_shapes(self) -> Dict[int, Tuple[int, int, int]]:
        _, h, w = self.in_shape
        shapes = {0: (self.stem_width, h, w), 1: (self.stem_width, h, w)}
        for i, (width, s) in enumerate(zip(self.block_widths, self.block_strides), start=2):
            h, w = (h - 1) // s + 1, (w - 1) // s + 1
            shapes[i] = (width, h, w)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def spec_hash(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "Prediction":
        logits = np.atleast_2d(logits)
        return cls(logits, T.softmax(logits), np.argmax(logits, axis=1))


class Network:
    """Residual CNN with six feature taps.

    Parameters are stored as leaf tensors in ``self.params`` in layer order.
    Calling the network on a ``Tensor`` of shape (N, C, H, W) returns logits.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float64,
                 params: Optional[Dict[str, np.ndarray]] = None):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        for name, shape in spec.param_shapes():
            if params is not None:
                arr = np.asarray(params[name], dtype=self.dtype).reshape(shape)
            elif name.endswith("bias"):
                arr = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                gain = 0.5 if ".conv_b." in name else 1.0
                arr = rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)
            self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)

    # -- parameter plumbing --------------------------------------------------
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1).astype(np.float64) for p in self.params.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.spec.param_count():
            raise ShapeError(f"expected {self.spec.param_count()} parameters, got {flat.size}")
        offset = 0
        for p in self.params.values():
            n = p.data.size
            p.data = flat[offset:offset + n].reshape(p.shape).astype(self.dtype)
            offset += n

    def copy(self) -> "Network":
        return Network(self.spec, dtype=self.dtype,
                       params={k: v.data.copy() for k, v in self.params.items()})

    @contextmanager
    def frozen(self):
        """Disable parameter gradients, e.g. while differentiating w.r.t. inputs."""
        saved = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(self.params.values(), saved):
                p.requires_grad = flag

    # -- forward -------------------------------------------------------------
    def _conv(self, x: Tensor, name: str, stride: int = 1, padding: int = 1) -> Tensor:
        return T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                        stride=stride, padding=padding)

    def forward_taps(self, x: Tensor, taps: Optional[Iterable[int]] = None
                     ) -> Tuple[Tensor, Dict[int, Tensor]]:
        """Return logits and the requested tap activations (all six by default)."""
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != self.spec.in_shape:
            raise ShapeError(f"expected input (N, {self.spec.in_shape}), got {x.shape}")
        wanted = set(range(NUM_TAPS)) if taps is None else set(taps)
        bad = wanted - set(range(NUM_TAPS))
        if bad:
            raise ValueError(f"invalid tap indices {sorted(bad)}; valid taps are 0..5")
        found: Dict[int, Tensor] = {}

        h = self._conv(x, "conv1")
        found[0] = h
        h = T.relu(h)
        found[1] = h
        width = self.spec.stem_width
        for i, (w, s) in enumerate(zip(self.spec.block_widths, self.spec.block_strides), start=1):
            a = T.relu(self._conv(h, f"block{i}.conv_a", stride=s))
            b = self._conv(a, f"block{i}.conv_b")
            shortcut = h if (w == width and s == 1) else self._conv(h, f"block{i}.shortcut", stride=s, padding=0)
            h = T.relu(b + shortcut)
            found[i + 1] = h
            width = w
        pooled = T.mean(h, axis=(2, 3))
        logits = T.linear(pooled, self.params["fc.weight"], self.params["fc.bias"])
        return logits, {t: found[t] for t in sorted(wanted)}

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_taps(x, taps=())[0]

    def predict(self, images: np.ndarray, batch_size: int = 512) -> Prediction:
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        chunks = [self(Tensor(images[i:i + batch_size])).data
                  for i in range(0, images.shape[0], batch_size)]
        return Prediction.from_logits(np.concatenate(chunks, axis=0))

    def forward_with_taps(self, image: np.ndarray, taps: Optional[Sequence[int]] = None
                          ) -> Tuple[Prediction, Dict[int, np.ndarray]]:
        images = np.asarray(image, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        logits, found = self.forward_taps(Tensor(images), taps)
        return Prediction.from_logits(logits.data), {k: v.data for k, v in found.items()}

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(images).labels == np.asarray(labels)))


def forward(model, batch: np.ndarray) -> Prediction:
    return model.predict(batch)


@dataclass
class AffineClassifier:
    """Logits ``W @ flatten(x) + b``.  Used as a closed-form test model."""

    weight: np.ndarray
    bias: np.ndarray
    in_shape: Tuple[int, ...] = field(default=None)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.in_shape is None:
            self.in_shape = (self.weight.shape[1],)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        return T.linear(T.flatten(x), Tensor(self.weight), Tensor(self.bias))

    def predict(self, images: np.ndarray) -> Prediction:
        images = np.asarray(images, dtype=np.float64)
        return Prediction.from_logits(images.reshape(images.shape[0], -1) @ self.weight.T + self.bias)

    @contextmanager
    def frozen(self):
        yield self
