"""Smoothing, per-class kernel transforms and the quorum vote.

Inference for an input ``x``:

1. store the bare prediction on ``x``;
2. median-filter ``x`` into ``x_R``;
3. draw one correctly classified smoothed training image per class and take
   its kernel matrices as targets;
4. transform one copy of ``x_R`` toward each class target under L1 / L-inf
   budgets;
5. let the copies whose prediction differs from the stored one vote; a
   label with at least ``c3`` votes overrides the bare prediction.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .kernels import KernelParams, KernelTargetSet, kernel_matrix, loss_shares, total_kernel_loss
from .optim import RMSprop
from .tensor import Tensor

# constraint application order inside every transform iteration
PROJECTION_ORDER = ("l1", "linf", "box")


class DefenseConfigError(ValueError):
    pass


@dataclass
class DefenseConfig:
    c1: float = 30.0
    c2: float = 0.02
    c3: int = 9
    transform_iterations: int = 10
    layers: Tuple[int, ...] = (1, 2, 3, 4, 5)
    kernel: KernelParams = field(default_factory=KernelParams)
    rho: float = 0.1
    lr: float = 0.07
    smoother_window: int = 2
    seed: int = 0
    sample_mode: str = "stream"
    normalize_kernels: bool = False
    batch_size: int = 64

    def __post_init__(self):
        self.layers = tuple(int(l) for l in self.layers)
        if isinstance(self.kernel, dict):
            self.kernel = KernelParams(**self.kernel)

    def validate(self, num_classes: int) -> None:
        if self.c1 <= 0 or self.c2 <= 0:
            raise DefenseConfigError(f"c1 and c2 must be positive, got c1={self.c1}, c2={self.c2}")
        if not 1 <= self.c3 <= num_classes + 1:
            raise DefenseConfigError(f"c3={self.c3} outside [1, K + 1]")
        if self.transform_iterations < 0:
            raise DefenseConfigError("transform_iterations must be >= 0")
        if not self.layers or any(not 0 <= l <= 5 for l in self.layers):
            raise DefenseConfigError(f"layer subset {self.layers} must be a nonempty subset of 0..5")
        if self.smoother_window < 1:
            raise DefenseConfigError("smoother window must be >= 1")
        if self.sample_mode not in ("stream", "fixed"):
            raise DefenseConfigError(f"unknown sample mode {self.sample_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        return d


# ---------------------------------------------------------------------------
# median filter
# ---------------------------------------------------------------------------

def _median_pixel_index(images: np.ndarray, window: int) -> np.ndarray:
    """For each output pixel, the flat pixel index (within its H*W plane) of the window median."""
    n, c, h, w = images.shape
    if window > h or window > w:
        raise ValueError(f"median window {window} larger than image {h}x{w}")
    before = (window - 1) // 2
    after = window - 1 - before
    pix = np.pad(np.arange(h * w).reshape(h, w), ((before, after), (before, after)), mode="edge")
    win_idx = sliding_window_view(pix, (window, window)).reshape(h, w, window * window)
    vals = images.reshape(n, c, h * w)[:, :, win_idx]  # (n, c, h, w, window^2)
    order = np.argsort(vals, axis=-1, kind="stable")
    # lower median: for a 2x2 window the 2nd of 4 sorted values
    pick = order[..., (window * window - 1) // 2]
    return np.take_along_axis(np.broadcast_to(win_idx, vals.shape), pick[..., None], axis=-1)[..., 0]


def median_filter(image: np.ndarray, window: int = 2) -> np.ndarray:
    """Per-channel sliding median with edge-replication padding, same-size output.

    Accepts (C, H, W) or (N, C, H, W).  Even windows take the lower median.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    arr = np.asarray(image)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    if window == 1:
        return arr.copy()
    n, c, h, w = batch.shape
    idx = _median_pixel_index(batch, window)
    out = np.take_along_axis(batch.reshape(n, c, h * w), idx.reshape(n, c, h * w), axis=-1)
    out = out.reshape(batch.shape)
    return out[0] if single else out


def median_source_index(images: np.ndarray, window: int) -> np.ndarray:
    """Flat indices into ``images`` (N, C, H, W) selected by the median filter."""
    n, c, h, w = images.shape
    if window == 1:
        return np.arange(images.size).reshape(images.shape)
    pix = _median_pixel_index(images, window)
    plane = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
    return pix + plane[:, :, None, None]


def median_filter_tensor(x: Tensor, window: int) -> Tensor:
    """Median filter whose gradient flows to the selected median pixel."""
    return T.take(x, median_source_index(x.data, window))


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def l1_ball_projection(delta: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of each row of ``delta`` onto the L1 ball.

    1-D input is treated as a single vector.  Uses the sort-and-threshold
    method; rows already inside the ball are returned unchanged.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    v = np.asarray(delta, dtype=np.float64)
    single = v.ndim == 1
    rows = v[None] if single else v.reshape(v.shape[0], -1)
    out = rows.copy()
    absv = np.abs(rows)
    outside = absv.sum(axis=1) > radius
    if outside.any():
        a = absv[outside]
        u = -np.sort(-a, axis=1)
        css = np.cumsum(u, axis=1)
        j = np.arange(1, a.shape[1] + 1)
        cond = u - (css - radius) / j > 0
        rho = a.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
        theta = (css[np.arange(a.shape[0]), rho] - radius) / (rho + 1)
        out[outside] = np.sign(rows[outside]) * np.maximum(a - theta[:, None], 0.0)
    return out[0] if single else out.reshape(v.shape)


def project_perturbation(x_ref: np.ndarray, x: np.ndarray, c1: float, c2: float) -> np.ndarray:
    """Apply the L1 ball, the L-inf box and the [0, 1] box, in that order."""
    delta = l1_ball_projection((x - x_ref).reshape(x.shape[0], -1), c1).reshape(x.shape)
    delta = np.clip(delta, -c2, c2)
    return np.clip(x_ref + delta, 0.0, 1.0)


# ---------------------------------------------------------------------------
# sample pool
# ---------------------------------------------------------------------------

@dataclass
class SamplePool:
    """Correctly classified smoothed training images with precomputed kernel matrices."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    layers: Tuple[int, ...]
    matrices: Dict[int, np.ndarray]  # tap -> (M, C, C)

    def class_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


@dataclass
class SampleSet:
    indices: np.ndarray  # pool index per class
    images: np.ndarray
    targets: List[KernelTargetSet]


def build_sample_pool(model, images: np.ndarray, labels: np.ndarray, config: DefenseConfig,
                      batch_size: int = 256) -> SamplePool:
    smoothed = median_filter(np.asarray(images, dtype=model.dtype), config.smoother_window)
    labels = np.asarray(labels, dtype=np.int64)
    keep = model.predict(smoothed).labels == labels
    smoothed, labels = smoothed[keep], labels[keep]
    layers = tuple(sorted(set(config.layers)))
    mats: Dict[int, list] = {l: [] for l in layers}
    with model.frozen():
        for s in range(0, len(smoothed), batch_size):
            _, taps = model.forward_taps(Tensor(smoothed[s:s + batch_size]), layers)
            for l in layers:
                mats[l].append(kernel_matrix(taps[l], config.kernel, config.normalize_kernels).data)
    stacked = {l: np.concatenate(v) if v else np.zeros((0,)) for l, v in mats.items()}
    return SamplePool(smoothed, labels, model.spec.num_classes, layers, stacked)


def _draw_indices(pool: SamplePool, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(pool.num_classes, dtype=np.int64)
    for k in range(pool.num_classes):
        idx = pool.class_indices(k)
        if idx.size == 0:
            raise DefenseConfigError(f"sample pool has no correctly classified image of class {k}")
        out[k] = idx[rng.integers(idx.size)]
    return out


def draw_samples(pool: SamplePool, seed) -> SampleSet:
    """One uniformly drawn pool image per class, with its kernel targets."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = _draw_indices(pool, rng)
    targets = [KernelTargetSet(k, {l: pool.matrices[l][i] for l in pool.layers})
               for k, i in enumerate(idx)]
    return SampleSet(idx, pool.images[idx], targets)


# ---------------------------------------------------------------------------
# kernel transform
# ---------------------------------------------------------------------------

@dataclass
class TransformResult:
    images: np.ndarray
    initial_losses: Dict[int, np.ndarray]  # tap -> (B,)
    final_loss: np.ndarray
    failed: np.ndarray

    @property
    def initial_loss(self) -> np.ndarray:
        return sum(self.initial_losses.values())


def _layer_losses(model, x: np.ndarray, targets, config: DefenseConfig, grad: bool):
    xt = Tensor(x, requires_grad=grad)
    _, taps = model.forward_taps(xt, config.layers)
    per_layer: dict = {}
    loss = total_kernel_loss(taps, targets, config.layers, config.kernel,
                             config.normalize_kernels, per_layer)
    return xt, loss, per_layer


def kernel_transform(model, images_r: np.ndarray, targets, config: DefenseConfig,
                     noise: np.ndarray) -> TransformResult:
    """Push copies of smoothed images toward target kernel matrices.

    ``images_r`` is (B, C, H, W); ``targets`` maps tap -> (B, C_l, C_l) (or is
    a single :class:`KernelTargetSet` for B == 1); ``noise`` is the initial
    perturbation, normally uniform in [-c2, c2].  Each copy is optimised
    independently.  A copy whose loss becomes non-finite is returned as the
    unmodified smoothed image and flagged in ``failed``.
    """
    x_r = np.asarray(images_r, dtype=model.dtype)
    if x_r.ndim == 3:
        x_r = x_r[None]
    if isinstance(targets, KernelTargetSet):
        targets = {l: m[None] for l, m in targets.matrices.items()}
    noise = np.asarray(noise, dtype=model.dtype).reshape(x_r.shape)
    x = project_perturbation(x_r, x_r + noise, config.c1, config.c2)
    opt = RMSprop(x.shape, config.lr, config.rho, dtype=x.dtype)
    failed = np.zeros(len(x), dtype=bool)
    initial = None

    with model.frozen():
        for _ in range(config.transform_iterations):
            xt, loss, per_layer = _layer_losses(model, x, targets, config, grad=True)
            if initial is None:
                initial = per_layer
            failed |= ~np.isfinite(loss.data)
            T.tsum(loss).backward()
            g = np.where(failed[:, None, None, None], 0.0, xt.grad)
            g = np.nan_to_num(g, nan=0.0, posinf=0.0, neginf=0.0)
            x = project_perturbation(x_r, opt.step(x, g), config.c1, config.c2)
        _, loss, per_layer = _layer_losses(model, x, targets, config, grad=False)
    if initial is None:
        initial = per_layer
    final = np.array(loss.data, copy=True)
    failed |= ~np.isfinite(final)
    x[failed] = x_r[failed]
    return TransformResult(x, initial, final, failed)


# ---------------------------------------------------------------------------
# vote
# ---------------------------------------------------------------------------

def vote(original: int, copy_predictions: Sequence[int], c3: int) -> Tuple[int, bool]:
    """Quorum rule over the copies whose prediction changed.

    Returns ``(mode(H), True)`` when the most common changed label has at
    least ``c3`` votes (ties toward the lowest label), else ``(original, False)``.
    """
    changed = [int(p) for p in copy_predictions if int(p) != int(original)]
    if not changed:
        return int(original), False
    counts = Counter(changed)
    best = max(counts.values())
    mode = min(label for label, cnt in counts.items() if cnt == best)
    if best >= c3:
        return mode, True
    return int(original), False


@dataclass
class CommitteeResult:
    original: int
    copy_predictions: Tuple[int, ...]
    changed: Tuple[int, ...]
    final: int
    overruled: bool
    loss_shares: Optional[Dict[int, np.ndarray]] = None  # tap -> per-copy share %


@dataclass
class DefenseRun:
    """Raw intermediate results of one pass of the defense over a batch."""

    original: np.ndarray  # (B,)
    smoothed: np.ndarray  # (B, C, H, W)
    transformed: np.ndarray  # (B, K, C, H, W)
    copy_predictions: np.ndarray  # (B, K)
    initial_losses: Dict[int, np.ndarray]  # tap -> (B, K)
    final_loss: np.ndarray  # (B, K)
    failed: np.ndarray  # (B, K)


class DefensePipeline:
    """Bare model + sample pool + config.  Read-only while classifying."""

    def __init__(self, model, config: DefenseConfig, pool: SamplePool):
        config.validate(model.spec.num_classes)
        missing = set(config.layers) - set(pool.layers)
        if missing:
            raise DefenseConfigError(f"sample pool lacks kernel targets for taps {sorted(missing)}")
        self.model = model
        self.config = config
        self.pool = pool
        self.num_classes = model.spec.num_classes
        self.calls = 0
        self._fixed = None
        if config.sample_mode == "fixed":
            self._fixed = _draw_indices(pool, np.random.default_rng([config.seed, 0xF1]))

    def _rng(self, key) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))

    def defender_keys(self, image_ids: Sequence[int]) -> List[tuple]:
        return [(self.config.seed, 0, int(i)) for i in image_ids]

    def run(self, images: np.ndarray, keys: Sequence[tuple]) -> DefenseRun:
        """Full forward pass of the defense; ``keys`` seed each image's randomness."""
        self.calls += 1
        cfg, k = self.config, self.num_classes
        x = np.asarray(images, dtype=self.model.dtype)
        if x.ndim == 3:
            x = x[None]
        if len(keys) != len(x):
            raise ValueError("one randomness key per image is required")
        b = len(x)
        original = self.model.predict(x).labels
        x_r = median_filter(x, cfg.smoother_window)

        sample_idx = np.empty((b, k), dtype=np.int64)
        noise = np.empty((b, k) + x.shape[1:], dtype=x.dtype)
        for i, key in enumerate(keys):
            rng = self._rng(key)
            sample_idx[i] = self._fixed if self._fixed is not None else _draw_indices(self.pool, rng)
            noise[i] = rng.uniform(-cfg.c2, cfg.c2, size=(k,) + x.shape[1:])

        flat_idx = sample_idx.reshape(-1)
        targets = {l: self.pool.matrices[l][flat_idx] for l in cfg.layers}
        copies = np.repeat(x_r, k, axis=0)
        res = kernel_transform(self.model, copies, targets, cfg, noise.reshape(copies.shape))
        preds = self.model.predict(res.images).labels.reshape(b, k)
        failed = res.failed.reshape(b, k)
        preds = np.where(failed, original[:, None], preds)
        return DefenseRun(
            original, x_r, res.images.reshape((b, k) + x.shape[1:]), preds,
            {l: v.reshape(b, k) for l, v in res.initial_losses.items()},
            res.final_loss.reshape(b, k), failed,
        )

    def classify(self, images: np.ndarray, image_ids: Optional[Sequence[int]] = None,
                 keys: Optional[Sequence[tuple]] = None, workers: int = 1,
                 diagnostics: Optional[list] = None) -> List[CommitteeResult]:
        """Defended classification of a batch.

        Work is split into fixed-size chunks, so results do not depend on
        ``workers``.  If ``diagnostics`` is a list it is extended with one row
        per transformed copy.
        """
        x = np.asarray(images, dtype=self.model.dtype)
        if x.ndim == 3:
            x = x[None]
        if image_ids is None:
            image_ids = range(len(x))
        image_ids = list(image_ids)
        if keys is None:
            keys = self.defender_keys(image_ids)
        bs = self.config.batch_size
        chunks = [(s, min(s + bs, len(x))) for s in range(0, len(x), bs)]

        def work(span):
            return self.run(x[span[0]:span[1]], keys[span[0]:span[1]])

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                runs = list(ex.map(work, chunks))
        else:
            runs = [work(span) for span in chunks]

        results: List[CommitteeResult] = []
        for (s, _), run in zip(chunks, runs):
            shares = loss_shares(run.initial_losses)
            for i in range(len(run.original)):
                orig = int(run.original[i])
                preds = tuple(int(p) for p in run.copy_predictions[i])
                final, overruled = vote(orig, preds, self.config.c3)
                results.append(CommitteeResult(
                    orig, preds, tuple(p for p in preds if p != orig), final, overruled,
                    {l: v[i] for l, v in shares.items()},
                ))
                if diagnostics is not None:
                    for kk in range(self.num_classes):
                        diagnostics.append({
                            "input_id": image_ids[s + i],
                            "copy_class": kk,
                            "initial_loss": float(sum(v[i, kk] for v in run.initial_losses.values())),
                            "final_loss": float(run.final_loss[i, kk]),
                            **{f"share_tap{l}": float(shares[l][i, kk]) for l in sorted(shares)},
                            "prediction": int(run.copy_predictions[i, kk]),
                        })
        return results

    def predict_labels(self, images: np.ndarray, image_ids=None, keys=None, workers: int = 1) -> np.ndarray:
        return np.array([r.final for r in self.classify(images, image_ids, keys, workers)], dtype=np.int64)

    def bpda_logits(self, x: Tensor, keys: Sequence[tuple]) -> Tensor:
        """Aggregated logits ``sum_k Z_k / ||Z_k||`` over the transformed copies.

        The forward pass runs the complete defense.  For the backward pass the
        transform loop is treated as the identity and the median filter routes
        gradient to its selected pixels.
        """
        run = self.run(x.data, keys)
        b, k = run.copy_predictions.shape
        offset = (run.transformed - run.smoothed[:, None]).reshape((b * k,) + x.shape[1:])
        src = np.repeat(median_source_index(x.data, self.config.smoother_window), k, axis=0)
        copies = T.take(x, src) + Tensor(offset)
        z = self.model(copies)
        z = T.reshape(T.l2_normalize(z, axis=-1), (b, k, self.num_classes))
        return T.tsum(z, axis=1)


def classify_defended(pipeline: DefensePipeline, image: np.ndarray, image_id: int = 0) -> CommitteeResult:
    return pipeline.classify(np.asarray(image)[None] if np.ndim(image) == 3 else image, [image_id])[0]


DIAGNOSTIC_FIELDS = ("input_id", "copy_class", "initial_loss", "final_loss")


def write_diagnostics(rows: Sequence[dict], stream: TextIO) -> None:
    """CSV rows: input id, copy class, initial/final loss, per-tap share %, prediction."""
    if not rows:
        stream.write(",".join(DIAGNOSTIC_FIELDS + ("prediction",)) + "\n")
        return
    fields = list(rows[0].keys())
    writer = csv.DictWriter(stream, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def diagnostics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    write_diagnostics(rows, buf)
    return buf.getvalue()
