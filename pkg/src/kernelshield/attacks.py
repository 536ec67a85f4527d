"""White-box attacks: FGSM, BIM, PGD, DeepFool, Carlini-Wagner L2 and BPDA/EOT.

All attacks are untargeted and batched.  A *model* is anything callable on a
:class:`~kernelshield.tensor.Tensor` batch returning logits, with a
``predict`` method and a ``frozen`` context manager.  Models may also provide
``input_gradient(x, labels)`` and ``predict_labels(x)`` to override how loss
gradients and decisions are obtained (see :class:`BPDASurrogate`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .optim import Adam
from .tensor import Tensor

ATTACK_KINDS = ("FGSM", "BIM", "PGD", "DeepFool", "CW_L2", "BPDA_adaptive")


class AttackError(RuntimeError):
    pass


class NumericalDegeneracyError(AttackError):
    pass


@dataclass
class AttackConfig:
    kind: str = "BIM"
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 20
    init_radius: Optional[float] = None  # PGD random start; None means epsilon
    restarts: int = 1
    norm: str = "linf"
    overshoot: float = 0.02
    cw_confidence: float = 0.0
    cw_binary_steps: int = 15
    cw_initial_c: float = 0.01
    cw_lr: float = 0.01
    cw_iterations: int = 100
    eot_samples: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.kind in ("BIM", "PGD", "BPDA_adaptive") and self.alpha > self.epsilon:
            raise ValueError(f"alpha {self.alpha} exceeds epsilon {self.epsilon}")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    success: np.ndarray
    l2: np.ndarray
    linf: np.ndarray
    iterations: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if self.success.size else 0.0


def _outcome(model, images, adv, labels, iterations) -> AttackOutcome:
    diff = (adv - images).reshape(len(images), -1)
    return AttackOutcome(
        adv,
        predict_labels(model, adv) != labels,
        np.sqrt((diff * diff).sum(axis=1)),
        np.abs(diff).max(axis=1) if diff.size else np.zeros(len(images)),
        np.broadcast_to(np.asarray(iterations), (len(images),)).copy(),
    )


def predict_labels(model, x: np.ndarray) -> np.ndarray:
    if hasattr(model, "predict_labels"):
        return np.asarray(model.predict_labels(x))
    return model.predict(x).labels


def input_gradient(model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the summed cross-entropy with respect to the input batch."""
    if hasattr(model, "input_gradient"):
        return model.input_gradient(x, labels)
    with model.frozen():
        xt = Tensor(x, requires_grad=True)
        T.softmax_cross_entropy(model(xt), labels, reduction="sum").backward()
    if not np.all(np.isfinite(xt.grad)):
        raise AttackError("non-finite input gradient")
    return xt.grad


def _prepare(images, labels):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    return images, np.asarray(labels, dtype=np.int64).reshape(-1)


# ---------------------------------------------------------------------------
# L-inf gradient-sign family
# ---------------------------------------------------------------------------

def fgsm(model, images, labels, alpha: float) -> AttackOutcome:
    """Single step ``x + alpha * sign(grad_x L)``, clipped to [0, 1]."""
    images, labels = _prepare(images, labels)
    g = input_gradient(model, images, labels)
    adv = np.clip(images + alpha * np.sign(g), 0.0, 1.0)
    return _outcome(model, images, adv, labels, 1)


def _project_l2(delta: np.ndarray, eps: float) -> np.ndarray:
    norms = np.sqrt((delta.reshape(len(delta), -1) ** 2).sum(axis=1))
    scale = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
    return delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))


def _iterate(model, images, labels, x, cfg: AttackConfig) -> np.ndarray:
    eps, alpha = cfg.epsilon, cfg.alpha
    for _ in range(cfg.iterations):
        g = input_gradient(model, x, labels)
        if cfg.norm == "linf":
            x = x + alpha * np.sign(g)
            x = np.clip(x, images - eps, images + eps)
        else:
            gn = np.sqrt((g.reshape(len(g), -1) ** 2).sum(axis=1)).reshape((-1,) + (1,) * (g.ndim - 1))
            x = images + _project_l2(x + alpha * g / np.maximum(gn, 1e-12) - images, eps)
        x = np.clip(x, 0.0, 1.0)
    return x


def bim(model, images, labels, cfg: AttackConfig) -> AttackOutcome:
    """Iterated signed steps, projected onto the epsilon ball around the original."""
    images, labels = _prepare(images, labels)
    x = _iterate(model, images, labels, images.copy(), cfg)
    return _outcome(model, images, x, labels, cfg.iterations)


def _random_start(images, cfg: AttackConfig, rng) -> np.ndarray:
    radius = cfg.epsilon if cfg.init_radius is None else cfg.init_radius
    if radius == 0:
        return images.copy()
    if cfg.norm == "linf":
        noise = rng.uniform(-radius, radius, size=images.shape)
    else:
        noise = _project_l2(rng.normal(size=images.shape), radius)
    return np.clip(images + noise, 0.0, 1.0)


def pgd(model, images, labels, cfg: AttackConfig) -> AttackOutcome:
    """BIM from a uniform random start inside the ball, with optional restarts.

    Per image the first successful restart is kept; otherwise the last one.
    """
    images, labels = _prepare(images, labels)
    best = None
    found = np.zeros(len(images), dtype=bool)
    for r in range(max(1, cfg.restarts)):
        rng = np.random.default_rng([cfg.seed, r])
        x = _iterate(model, images, labels, _random_start(images, cfg, rng), cfg)
        ok = predict_labels(model, x) != labels
        if best is None:
            best = x
        else:
            take = ~found
            best[take] = x[take]
        found |= ok
        if found.all():
            break
    return _outcome(model, images, best, labels, cfg.iterations)


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------

def _logit_jacobian(model, x: np.ndarray):
    """Logits (N, K) and their input gradients (K, N, ...)."""
    with model.frozen():
        xt = Tensor(x, requires_grad=True)
        z = model(xt)
        k = z.shape[1]
        grads = np.empty((k,) + x.shape)
        for c in range(k):
            seed = np.zeros(z.shape)
            seed[:, c] = 1.0
            xt.zero_grad()
            z.backward(seed)
            grads[c] = xt.grad
    return z.data, grads


def deepfool(model, images, labels=None, cfg: Optional[AttackConfig] = None) -> AttackOutcome:
    """Multi-class DeepFool with overshoot.

    Each step moves every still-correct image onto the nearest linearised
    class boundary; the accumulated perturbation is scaled by ``1 + overshoot``.
    ``labels`` defaults to the model's own predictions.
    """
    cfg = cfg or AttackConfig(kind="DeepFool", iterations=50)
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    n = len(images)
    labels = predict_labels(model, images) if labels is None else np.asarray(labels, dtype=np.int64)
    active = predict_labels(model, images) == labels
    r_tot = np.zeros_like(images)
    x = images.copy()
    used = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)

    for _ in range(cfg.iterations):
        if not active.any():
            break
        z, grads = _logit_jacobian(model, x)
        k = z.shape[1]
        w = grads - grads[labels, rows][None]  # (K, N, ...)
        w_flat = w.reshape(k, n, -1)
        f = (z - z[rows, labels][:, None]).T  # (K, N)
        norms = np.sqrt((w_flat ** 2).sum(axis=2))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(f) / norms
        ratio[labels, rows] = np.inf
        best = np.argmin(ratio, axis=0)
        wn = norms[best, rows]
        if np.any(active & (wn == 0)):
            raise NumericalDegeneracyError("zero gradient-difference norm in DeepFool")
        step = (np.abs(f[best, rows]) / np.where(wn > 0, wn, 1.0) ** 2)
        r = step.reshape((-1,) + (1,) * (images.ndim - 1)) * w[best, rows]
        r_tot[active] += r[active]
        used[active] += 1
        x = np.clip(images + (1.0 + cfg.overshoot) * r_tot, 0.0, 1.0)
        active &= predict_labels(model, x) == labels
    return _outcome(model, images, x, labels, used)


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------

def cw_l2(model, images, labels, cfg: AttackConfig) -> AttackOutcome:
    """Carlini-Wagner L2 with tanh reparametrisation and a binary search on c.

    Minimises ``||x' - x||^2 + c * max(Z_true - max_{k != true} Z_k + kappa, 0)``
    with Adam.  An iterate counts as an adversary only if its wrong-class
    logit margin is at least ``kappa`` and it is misclassified.  Images for
    which no adversary is found get the iterate with the largest margin.
    """
    images, labels = _prepare(images, labels)
    n = len(images)
    rows = np.arange(n)
    kappa = cfg.cw_confidence
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    c = np.full(n, cfg.cw_initial_c)
    best_l2 = np.full(n, np.inf)
    best_adv = images.copy()
    fallback = images.copy()
    fallback_margin = np.full(n, -np.inf)
    w0 = np.arctanh((2.0 * images - 1.0) * (1 - 1e-6))
    target = Tensor(images)
    steps = 0

    with model.frozen():
        for _ in range(cfg.cw_binary_steps):
            w = w0.copy()
            adam = Adam(w.shape, cfg.cw_lr)
            found = np.zeros(n, dtype=bool)
            for _ in range(cfg.cw_iterations):
                steps += 1
                wt = Tensor(w, requires_grad=True)
                x_adv = (T.tanh(wt) + 1.0) * 0.5
                z = model(x_adv)
                zd = z.data
                k = zd.shape[1]
                masked = zd.copy()
                masked[rows, labels] = -np.inf
                other = np.argmax(masked, axis=1)
                real = T.take(z, rows * k + labels)
                oth = T.take(z, rows * k + other)
                hinge = T.relu(real - oth + kappa)
                diff = x_adv - target
                dist = T.tsum(diff * diff, axis=(1, 2, 3))
                T.tsum(dist + Tensor(c) * hinge).backward()

                margin = zd[rows, other] - zd[rows, labels]
                is_adv = (margin >= kappa) & (np.argmax(zd, axis=1) != labels)
                l2 = dist.data
                better = is_adv & (l2 < best_l2)
                best_l2[better] = l2[better]
                best_adv[better] = x_adv.data[better]
                closer = margin > fallback_margin
                fallback_margin[closer] = margin[closer]
                fallback[closer] = x_adv.data[closer]
                found |= is_adv
                w = adam.step(w, wt.grad)
            upper = np.where(found, np.minimum(upper, c), upper)
            lower = np.where(found, lower, np.maximum(lower, c))
            c = np.where(upper < 1e9, (lower + upper) / 2.0, c * 10.0)

    success = np.isfinite(best_l2)
    adv = np.where(success.reshape((-1, 1, 1, 1)), best_adv, fallback)
    out = _outcome(model, images, adv, labels, steps)
    out.success = success
    return out


# ---------------------------------------------------------------------------
# BPDA + EOT against the full defense
# ---------------------------------------------------------------------------

class BPDASurrogate:
    """Differentiable stand-in for a :class:`~kernelshield.defense.DefensePipeline`.

    The forward pass runs the whole defense with the attacker's own
    randomness; gradients skip the transform loop and pass through the
    median filter's selected pixels.  ``input_gradient`` averages the loss
    gradient over ``eot_samples`` independent draws.  Decisions come from the
    defended classifier using the defender's randomness.
    """

    def __init__(self, pipeline, image_ids: Sequence[int], seed: int = 0, eot_samples: int = 1):
        self.pipeline = pipeline
        self.image_ids = [int(i) for i in image_ids]
        self.seed = seed
        self.eot_samples = eot_samples
        self.step = 0

    def _keys(self, draw: int):
        return [(self.seed, 1, i, self.step, draw) for i in self.image_ids]

    def __call__(self, x: Tensor) -> Tensor:
        self.step += 1
        return self.pipeline.bpda_logits(x, self._keys(0))

    def frozen(self):
        return self.pipeline.model.frozen()

    def input_gradient(self, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
        self.step += 1
        total = np.zeros_like(x)
        with self.frozen():
            for draw in range(self.eot_samples):
                xt = Tensor(x, requires_grad=True)
                z = self.pipeline.bpda_logits(xt, self._keys(draw))
                T.softmax_cross_entropy(z, labels, reduction="sum").backward()
                total += xt.grad
        return total / self.eot_samples

    def predict_labels(self, x: np.ndarray) -> np.ndarray:
        return self.pipeline.predict_labels(x, self.image_ids)


def aggregate_logits(copy_logits: np.ndarray) -> np.ndarray:
    """``sum_k Z_k / ||Z_k||`` over axis -2 of a (..., K_copies, K_classes) array."""
    z = np.asarray(copy_logits, dtype=np.float64)
    return (z / np.linalg.norm(z, axis=-1, keepdims=True)).sum(axis=-2)


def bpda_adaptive(pipeline, images, labels, cfg: AttackConfig,
                  image_ids: Optional[Sequence[int]] = None) -> AttackOutcome:
    """PGD on the aggregated-logit loss of the full defense (BPDA + EOT)."""
    images, labels = _prepare(images, labels)
    ids = range(len(images)) if image_ids is None else image_ids
    surrogate = BPDASurrogate(pipeline, ids, cfg.seed, cfg.eot_samples)
    rng = np.random.default_rng([cfg.seed, 0])
    x = _iterate(surrogate, images, labels, _random_start(images, cfg, rng), cfg)
    return _outcome(surrogate, images, x, labels, cfg.iterations)


def run_attack(model, images, labels, cfg: AttackConfig, pipeline=None, image_ids=None) -> AttackOutcome:
    cfg.validate()
    if cfg.kind == "FGSM":
        return fgsm(model, images, labels, cfg.alpha)
    if cfg.kind == "BIM":
        return bim(model, images, labels, cfg)
    if cfg.kind == "PGD":
        return pgd(model, images, labels, cfg)
    if cfg.kind == "DeepFool":
        return deepfool(model, images, labels, cfg)
    if cfg.kind == "CW_L2":
        return cw_l2(model, images, labels, cfg)
    if pipeline is None:
        raise ValueError("BPDA_adaptive needs a defense pipeline")
    return bpda_adaptive(pipeline, images, labels, cfg, image_ids)
