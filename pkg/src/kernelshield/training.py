"""Standard, smoothing-augmented and free adversarial (TRADES-style) training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .network import Network
from .optim import SGD
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    # step decay: multiply lr by ``lr_decay`` at each listed epoch
    lr_decay_epochs: Tuple[int, ...] = field(default_factory=tuple)
    lr_decay: float = 0.1
    # rescale the full parameter gradient to at most this L2 norm (0 disables);
    # the residual net has no normalisation layers and diverges without it
    grad_clip: float = 1.0


def _lr_at(opt: OptimizerConfig, epoch: int) -> float:
    return opt.lr * opt.lr_decay ** sum(1 for e in opt.lr_decay_epochs if epoch >= e)


def _clip_gradients(model: Network, max_norm: float) -> None:
    if max_norm <= 0:
        return
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm


def _check_dataset(images: np.ndarray, labels: np.ndarray) -> None:
    if len(images) == 0:
        raise ValueError("training dataset is empty")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")


def _finish(model: Network, images, labels, epochs, kind, seed, min_accuracy_margin, extra):
    acc = model.accuracy(images, labels)
    k = model.spec.num_classes
    if epochs > 0 and min_accuracy_margin is not None and acc <= 1.0 / k + min_accuracy_margin:
        raise TrainingError(f"training accuracy {acc:.3f} did not exceed chance + margin", epochs, -1)
    meta = {"train_accuracy": acc, **extra}
    return Checkpoint.from_network(model, epochs=epochs, kind=kind, seed=seed, metadata=meta)


def train_standard(model: Network, images: np.ndarray, labels: np.ndarray, epochs: int,
                   opt: Optional[OptimizerConfig] = None, seed: int = 0, kind: str = "Std",
                   min_accuracy_margin: Optional[float] = None) -> Checkpoint:
    """Minibatch cross-entropy training.  Mutates ``model`` and returns a checkpoint."""
    _check_dataset(images, labels)
    opt = opt or OptimizerConfig()
    images = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    sgd = SGD(model.parameters(), opt.lr, opt.momentum, opt.weight_decay)
    n = len(images)

    for epoch in range(epochs):
        sgd.lr = _lr_at(opt, epoch)
        perm = rng.permutation(n)
        for bi, start in enumerate(range(0, n, opt.batch_size)):
            idx = perm[start:start + opt.batch_size]
            sgd.zero_grad()
            loss = T.softmax_cross_entropy(model(Tensor(images[idx])), labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError("non-finite loss", epoch, bi)
            loss.backward()
            _clip_gradients(model, opt.grad_clip)
            sgd.step()
        log.debug("epoch %d done, last loss %.4f", epoch, float(loss.data))
    return _finish(model, images, labels, epochs, kind, seed, min_accuracy_margin,
                   {"examples_per_epoch": n})


def augment_with_smoothing(images: np.ndarray, labels: np.ndarray,
                           smoother: Callable[[np.ndarray], np.ndarray]):
    """Return ``T ∪ T_R``: originals followed by their smoothed copies."""
    smoothed = np.stack([smoother(img) for img in images]) if len(images) else images
    return np.concatenate([images, smoothed]), np.concatenate([labels, labels])


def train_smoothing_augmented(model: Network, images: np.ndarray, labels: np.ndarray,
                              smoother: Callable[[np.ndarray], np.ndarray], epochs: int,
                              opt: Optional[OptimizerConfig] = None, seed: int = 0,
                              min_accuracy_margin: Optional[float] = None) -> Checkpoint:
    _check_dataset(images, labels)
    aug_x, aug_y = augment_with_smoothing(np.asarray(images), np.asarray(labels), smoother)
    ckpt = train_standard(model, aug_x, aug_y, epochs, opt, seed, "Std", min_accuracy_margin)
    ckpt.metadata["smoothing_augmented"] = True
    return ckpt


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Batch-mean KL(softmax(p) || softmax(q))."""
    log_p = T.log_softmax(p_logits)
    log_q = T.log_softmax(q_logits)
    n = p_logits.shape[0]
    return T.tsum(T.exp(log_p) * (log_p - log_q)) * (1.0 / n)


def train_adversarial(model: Network, images: np.ndarray, labels: np.ndarray, epochs: int,
                      m: int = 5, trades_lambda: float = 1.0, epsilon: float = 8 / 255,
                      opt: Optional[OptimizerConfig] = None, seed: int = 0,
                      smoother: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                      min_accuracy_margin: Optional[float] = None) -> Checkpoint:
    """Free adversarial training with a TRADES-style loss.

    Each minibatch is replayed ``m`` times.  Every replay takes one weight step
    on ``CE(f(x), y) + lambda * KL(softmax(f(x + delta)) || softmax(f(x)))`` and
    one signed-gradient step of size ``epsilon`` on the persistent perturbation
    ``delta``, which is clipped to the L-inf ball of radius ``epsilon``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    _check_dataset(images, labels)
    opt = opt or OptimizerConfig()
    images = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if smoother is not None:
        images, labels = augment_with_smoothing(images, labels, smoother)
    rng = np.random.default_rng(seed)
    sgd = SGD(model.parameters(), opt.lr, opt.momentum, opt.weight_decay)
    n = len(images)
    delta = np.zeros((opt.batch_size,) + images.shape[1:], dtype=model.dtype)
    use_adv = trades_lambda > 0
    max_linf = 0.0

    for epoch in range(epochs):
        sgd.lr = _lr_at(opt, epoch)
        perm = rng.permutation(n)
        for bi, start in enumerate(range(0, n, opt.batch_size)):
            idx = perm[start:start + opt.batch_size]
            xb, yb = images[idx], labels[idx]
            b = len(idx)
            for _ in range(m):
                sgd.zero_grad()
                clean = model(Tensor(xb))
                loss = T.softmax_cross_entropy(clean, yb)
                x_adv = None
                if use_adv:
                    x_adv = Tensor(np.clip(xb + delta[:b], 0.0, 1.0), requires_grad=epsilon > 0)
                    loss = loss + kl_divergence(model(x_adv), clean) * trades_lambda
                if not np.isfinite(loss.data):
                    raise TrainingError("non-finite loss", epoch, bi)
                loss.backward()
                _clip_gradients(model, opt.grad_clip)
                sgd.step()
                if x_adv is not None and x_adv.grad is not None:
                    delta[:b] = np.clip(delta[:b] + epsilon * np.sign(x_adv.grad), -epsilon, epsilon)
                    max_linf = max(max_linf, float(np.abs(delta[:b]).max()))
                    assert max_linf <= epsilon
    return _finish(model, images, labels, epochs, "Adv", seed, min_accuracy_margin,
                   {"m": m, "trades_lambda": trades_lambda, "epsilon": epsilon,
                    "max_perturbation_linf": max_linf, "smoothing_augmented": smoother is not None})
