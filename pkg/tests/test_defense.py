import io
import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kernelshield import tensor as T
from kernelshield.defense import (PROJECTION_ORDER, DefenseConfig, DefenseConfigError,
                                  DefensePipeline, build_sample_pool,
                                  classify_defended, diagnostics_csv, draw_samples,
                                  kernel_transform, l1_ball_projection, median_filter,
                                  median_filter_tensor, project_perturbation, vote,
                                  write_diagnostics)
from kernelshield.kernels import KernelParams, kernel_matrix, total_kernel_loss
from kernelshield.tensor import Tensor

from conftest import tiny_data


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def naive_median(img, window):
    """Per-window sort with edge padding; the lower median for even windows."""
    c, h, w = img.shape
    before = (window - 1) // 2
    after = window - 1 - before
    padded = np.pad(img, ((0, 0), (before, after), (before, after)), mode="edge")
    out = np.empty_like(img)
    for ch, i, j in itertools.product(range(c), range(h), range(w)):
        vals = sorted(padded[ch, i:i + window, j:j + window].ravel())
        out[ch, i, j] = vals[(window * window - 1) // 2]
    return out


def bisection_l1(v, radius):
    """Soft-threshold projection with the threshold found by scalar bisection."""
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    lo, hi = 0.0, a.max()
    while hi - lo > 1e-13:
        mid = (lo + hi) / 2
        if np.maximum(a - mid, 0).sum() > radius:
            lo = mid
        else:
            hi = mid
    return np.sign(v) * np.maximum(a - (lo + hi) / 2, 0)


def brute_vote(original, copies, c3):
    h = [p for p in copies if p != original]
    if not h:
        return original, False
    counts = Counter(h)
    top = max(counts.values())
    mode = min(k for k, v in counts.items() if v == top)
    return (mode, True) if top >= c3 else (original, False)


# ---------------------------------------------------------------------------
# median filter
# ---------------------------------------------------------------------------

def test_median_constant_image_unchanged():
    img = np.full((3, 5, 5), 0.37)
    np.testing.assert_array_equal(median_filter(img, 2), img)


def test_median_window_one_is_identity(rng):
    img = rng.uniform(size=(2, 4, 4))
    np.testing.assert_array_equal(median_filter(img, 1), img)


def test_median_2x2_lower_median_example():
    img = np.array([[[1.0, 4.0], [3.0, 2.0]]])
    # top-left window {1,4,3,2} -> 2nd smallest is 2
    assert median_filter(img, 2)[0, 0, 0] == 2.0


@pytest.mark.parametrize("window", [2, 3])
def test_median_matches_naive_oracle(window):
    rng = np.random.default_rng(window)
    for _ in range(100):
        img = rng.uniform(size=(1, 4, 4))
        np.testing.assert_array_equal(median_filter(img, window), naive_median(img, window))


def test_median_batched(rng):
    imgs = rng.uniform(size=(3, 2, 5, 5))
    batched = median_filter(imgs, 2)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], naive_median(imgs[i], 2))


def test_median_window_too_large():
    with pytest.raises(ValueError):
        median_filter(np.zeros((1, 3, 3)), 4)


def test_median_tensor_gradient_routes_to_selected_pixels(rng):
    x = Tensor(rng.uniform(size=(1, 1, 3, 3)), requires_grad=True)
    y = median_filter_tensor(x, 2)
    np.testing.assert_array_equal(y.data, median_filter(x.data, 2))
    T.tsum(y).backward()
    assert x.grad.sum() == 9.0
    # every gradient entry counts how often that pixel was picked
    picked = Counter(float(v) for v in y.data.ravel())
    for v, g in zip(x.data.ravel(), x.grad.ravel()):
        assert g == picked.get(float(v), 0)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def test_l1_projection_examples():
    inside = np.array([0.2, -0.3, 0.1])
    np.testing.assert_array_equal(l1_ball_projection(inside, 1.0), inside)
    np.testing.assert_allclose(l1_ball_projection(np.array([3.0, 0.0]), 1.0), [1.0, 0.0])
    with pytest.raises(ValueError):
        l1_ball_projection(inside, 0.0)


def test_l1_projection_matches_bisection_and_is_closest():
    rng = np.random.default_rng(31)
    for _ in range(500):
        n = int(rng.integers(1, 21))
        v = rng.normal(scale=2.0, size=n)
        r = float(rng.uniform(0.1, 3.0))
        p = l1_ball_projection(v, r)
        assert np.max(np.abs(p - bisection_l1(v, r))) <= 1e-8
        assert np.abs(p).sum() <= r + 1e-9
        # random points of the ball are never closer than the projection
        samples = rng.laplace(size=(50, n))
        samples *= (r * rng.uniform(size=(50, 1)) ** (1 / n)) / np.abs(samples).sum(1, keepdims=True)
        assert np.all(np.linalg.norm(samples - v, axis=1) >= np.linalg.norm(p - v) - 1e-12)


def test_l1_projection_rows_independent(rng):
    rows = rng.normal(size=(4, 6))
    out = l1_ball_projection(rows, 1.5)
    for i in range(4):
        np.testing.assert_array_equal(out[i], l1_ball_projection(rows[i], 1.5))


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-5, 5, allow_nan=False)),
       st.floats(0.01, 5.0))
def test_l1_projection_properties(v, r):
    p = l1_ball_projection(v, r)
    assert np.abs(p).sum() <= r * (1 + 1e-12) + 1e-12
    assert np.all(p * v >= 0)
    np.testing.assert_allclose(l1_ball_projection(p, r), p, atol=1e-12)


def test_projection_order_constant():
    assert PROJECTION_ORDER == ("l1", "linf", "box")


@given(arrays(np.float64, (2, 1, 3, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (2, 1, 3, 3), elements=st.floats(-1, 1)),
       st.floats(0.05, 3.0), st.floats(0.001, 0.5))
def test_project_perturbation_budgets(x_ref, step, c1, c2):
    out = project_perturbation(x_ref, x_ref + step, c1, c2)
    delta = (out - x_ref).reshape(2, -1)
    assert np.all(np.abs(delta) <= c2 + 1e-9)
    assert np.all(np.abs(delta).sum(axis=1) <= c1 + 1e-6)
    assert out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------------------
# vote
# ---------------------------------------------------------------------------

def test_vote_examples():
    assert vote(5, [5] * 10, 1) == (5, False)
    assert vote(5, [3, 3, 3] + [5] * 7, 3) == (3, True)
    assert vote(5, [3, 3, 3] + [5] * 7, 9) == (5, False)
    assert vote(0, [2, 1, 2, 1], 2) == (1, True)


def test_vote_exhaustive_truth_table():
    for k in range(1, 5):
        for original in range(k):
            for copies in itertools.product(range(k), repeat=k):
                for c3 in range(1, 5):
                    assert vote(original, copies, c3) == brute_vote(original, copies, c3)


@given(st.integers(0, 5), st.lists(st.integers(0, 5), min_size=1, max_size=10), st.integers(1, 10))
def test_vote_soundness(original, copies, c3):
    final, overruled = vote(original, copies, c3)
    if not overruled:
        assert final == original
    else:
        assert final != original
        assert sum(1 for p in copies if p == final) >= c3


# ---------------------------------------------------------------------------
# sample pool and draws
# ---------------------------------------------------------------------------

def _pool(net, config, n=None):
    data = tiny_data()
    x, y = data.images[:n], data.labels[:n]
    return build_sample_pool(net, x, y, config)


def test_pool_contains_only_correct_smoothed_images(tiny_trained):
    cfg = DefenseConfig(layers=(0, 5))
    pool = _pool(tiny_trained, cfg)
    assert np.array_equal(tiny_trained.predict(pool.images).labels, pool.labels)
    assert pool.matrices[5].shape == (len(pool.labels), 3, 3)


def test_single_image_per_class_drawn_deterministically(tiny_trained):
    data = tiny_data()
    correct = tiny_trained.predict(data.images).labels == data.labels
    first = [int(np.flatnonzero(correct & (data.labels == k))[0]) for k in range(3)]
    pool = build_sample_pool(tiny_trained, data.images[first], data.labels[first],
                             DefenseConfig(layers=(1,), smoother_window=1))
    for seed in range(5):
        assert list(draw_samples(pool, seed).indices) == [0, 1, 2]


def test_draw_samples_labels_and_seeds(tiny_trained):
    cfg = DefenseConfig(layers=(2, 4))
    pool = _pool(tiny_trained, cfg)
    s = draw_samples(pool, 0)
    assert len(s.targets) == 3
    assert np.array_equal(tiny_trained.predict(s.images).labels, [0, 1, 2])
    assert [t.label for t in s.targets] == [0, 1, 2]
    assert all(t.taps == (2, 4) for t in s.targets)
    assert np.array_equal(draw_samples(pool, 0).indices, s.indices)
    assert any(not np.array_equal(draw_samples(pool, seed).indices, s.indices) for seed in range(1, 4))


def test_empty_class_names_the_class(tiny_trained):
    cfg = DefenseConfig(layers=(1,))
    data = tiny_data()
    keep = data.labels != 2
    pool = build_sample_pool(tiny_trained, data.images[keep], data.labels[keep], cfg)
    with pytest.raises(DefenseConfigError, match="class 2"):
        draw_samples(pool, 0)


# ---------------------------------------------------------------------------
# kernel transform
# ---------------------------------------------------------------------------

def _self_targets(net, x_r, cfg):
    _, taps = net.forward_taps(Tensor(x_r), cfg.layers)
    return {l: kernel_matrix(taps[l], cfg.kernel).data for l in cfg.layers}


def test_zero_iterations_returns_projected_noise(tiny_trained, rng):
    cfg = DefenseConfig(c1=0.5, c2=0.05, transform_iterations=0, layers=(1, 5))
    x_r = median_filter(tiny_data().images[:3], 2)
    noise = rng.uniform(-0.05, 0.05, size=x_r.shape)
    res = kernel_transform(tiny_trained, x_r, _self_targets(tiny_trained, x_r, cfg), cfg, noise)
    np.testing.assert_array_equal(res.images, project_perturbation(x_r, x_r + noise, 0.5, 0.05))
    tiny = DefenseConfig(c1=0.5, c2=1e-300, transform_iterations=0, layers=(1, 5))
    res = kernel_transform(tiny_trained, x_r, _self_targets(tiny_trained, x_r, tiny), tiny,
                           noise * 1e-298)
    np.testing.assert_allclose(res.images, x_r, rtol=0, atol=1e-299)


def test_self_target_loss_decreases(tiny_trained, rng):
    # RMSprop with a short memory moves each pixel by about lr per step, so the
    # step must be small next to the initial noise for the descent to show
    cfg = DefenseConfig(c1=1.0, c2=0.05, transform_iterations=10, layers=(1, 2, 3, 4, 5), lr=0.002)
    x_r = median_filter(tiny_data().images[:6], 2)
    noise = rng.uniform(-0.05, 0.05, size=x_r.shape)
    res = kernel_transform(tiny_trained, x_r, _self_targets(tiny_trained, x_r, cfg), cfg, noise)
    assert np.all(res.final_loss <= res.initial_loss)
    assert not res.failed.any()


def test_transform_respects_budgets(tiny_trained, rng):
    cfg = DefenseConfig(c1=0.3, c2=0.04, transform_iterations=5, layers=(0, 3, 5), lr=0.1)
    data = tiny_data()
    x_r = median_filter(data.images[:5], 2)
    targets = _self_targets(tiny_trained, median_filter(data.images[5:10], 2), cfg)
    res = kernel_transform(tiny_trained, x_r, targets, cfg, rng.uniform(-0.04, 0.04, size=x_r.shape))
    delta = (res.images - x_r).reshape(5, -1)
    assert np.abs(delta).max() <= 0.04 + 1e-9
    assert np.abs(delta).sum(axis=1).max() <= 0.3 + 1e-6
    assert res.images.min() >= 0 and res.images.max() <= 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_returns_smoothed_copy(tiny_trained, rng):
    cfg = DefenseConfig(c1=1.0, c2=0.05, transform_iterations=3, layers=(1, 5))
    x_r = median_filter(tiny_data().images[:2], 2)
    targets = _self_targets(tiny_trained, x_r, cfg)
    targets[5] = targets[5].copy()
    targets[5][1] = np.nan
    res = kernel_transform(tiny_trained, x_r, targets, cfg, rng.uniform(-0.05, 0.05, size=x_r.shape))
    assert list(res.failed) == [False, True]
    np.testing.assert_array_equal(res.images[1], x_r[1])


def test_transform_loss_agrees_with_kernel_module(tiny_trained):
    cfg = DefenseConfig(c1=1.0, c2=0.05, transform_iterations=0, layers=(2, 5), kernel=KernelParams(1.0, 2))
    x_r = median_filter(tiny_data().images[:2], 2)
    targets = _self_targets(tiny_trained, median_filter(tiny_data().images[2:4], 2), cfg)
    res = kernel_transform(tiny_trained, x_r, targets, cfg, np.zeros_like(x_r))
    _, taps = tiny_trained.forward_taps(Tensor(x_r), cfg.layers)
    expected = total_kernel_loss(taps, targets, cfg.layers, cfg.kernel).data
    np.testing.assert_allclose(res.final_loss, expected, rtol=1e-12)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _pipeline(net, **kw):
    base = dict(c1=1.0, c2=0.05, c3=2, transform_iterations=3, layers=(1, 5), batch_size=4)
    base.update(kw)
    cfg = DefenseConfig(**base)
    return DefensePipeline(net, cfg, _pool(net, cfg))


def test_config_validation(tiny_trained):
    for bad in (dict(c1=0), dict(c2=-1), dict(c3=0), dict(c3=5), dict(layers=()),
                dict(layers=(6,)), dict(transform_iterations=-1)):
        with pytest.raises(DefenseConfigError):
            DefenseConfig(**bad).validate(3)
    DefenseConfig(c3=4).validate(3)  # K + 1 disables the override


def test_unreachable_quorum_returns_bare_prediction(tiny_trained):
    pipe = _pipeline(tiny_trained, c3=4)
    x = np.random.default_rng(0).uniform(size=(8,) + tiny_trained.spec.in_shape)
    results = pipe.classify(x)
    assert [r.final for r in results] == list(tiny_trained.predict(x).labels)
    assert not any(r.overruled for r in results)


def test_unanimous_committee_overrides(tiny_trained, monkeypatch):
    pipe = _pipeline(tiny_trained, c3=3)
    real_run = pipe.run

    def forced(images, keys):
        run = real_run(images, keys)
        run.copy_predictions[:] = ((run.original + 1) % 3)[:, None]
        return run

    monkeypatch.setattr(pipe, "run", forced)
    x = tiny_data().images[:5]
    for r in pipe.classify(x):
        assert r.final == (r.original + 1) % 3 and r.overruled
        assert r.changed == (r.final,) * 3


def test_committee_result_invariants(tiny_trained):
    pipe = _pipeline(tiny_trained, c3=1, c2=0.2, c1=5.0, lr=0.2)
    rng = np.random.default_rng(1)
    x = np.clip(tiny_data().images[:12] + rng.normal(scale=0.2, size=(12,) + tiny_trained.spec.in_shape), 0, 1)
    for r in pipe.classify(x):
        assert len(r.copy_predictions) == 3
        assert all(p != r.original for p in r.changed)
        assert (r.final, r.overruled) == vote(r.original, r.copy_predictions, 1)


def test_default_through(tiny_trained):
    data = tiny_data()
    rng = np.random.default_rng(3)
    x = np.clip(data.images[:10] + rng.normal(scale=0.3, size=data.images[:10].shape), 0, 1)
    bare = tiny_trained.predict(x).labels
    identity = _pipeline(tiny_trained, c2=1e-300, transform_iterations=0, smoother_window=1, c3=1)
    assert np.array_equal(identity.predict_labels(x), bare)
    # with smoothing on, the committee of K identical copies of x_R defers to
    # the original unless the smoothed prediction differs
    smoothed = _pipeline(tiny_trained, c2=1e-300, transform_iterations=0, smoother_window=2, c3=3)
    pred_r = tiny_trained.predict(median_filter(x, 2)).labels
    assert np.array_equal(smoothed.predict_labels(x), pred_r)


def test_original_prediction_uses_raw_input(tiny_trained):
    pipe = _pipeline(tiny_trained)
    x = tiny_data().images[:4]
    run = pipe.run(x, pipe.defender_keys(range(4)))
    assert np.array_equal(run.original, tiny_trained.predict(x).labels)
    assert np.array_equal(run.smoothed, median_filter(x, 2))
    assert run.transformed.shape == (4, 3) + x.shape[1:]


def test_classification_is_deterministic(tiny_trained):
    x = tiny_data().images[:6]
    a = _pipeline(tiny_trained, c3=1).classify(x)
    b = _pipeline(tiny_trained, c3=1).classify(x)
    assert [(r.copy_predictions, r.final) for r in a] == [(r.copy_predictions, r.final) for r in b]
    assert classify_defended(_pipeline(tiny_trained, c3=1), x[2], 2).copy_predictions == a[2].copy_predictions


def test_workers_do_not_change_results(tiny_trained):
    x = tiny_data().images[:10]
    pipe = _pipeline(tiny_trained, c3=1, batch_size=3)
    one = pipe.classify(x, workers=1)
    many = pipe.classify(x, workers=3)
    assert [r.copy_predictions for r in one] == [r.copy_predictions for r in many]


def test_per_image_randomness_is_independent_of_batching(tiny_trained):
    x = tiny_data().images[:6]
    pipe = _pipeline(tiny_trained, batch_size=64)
    full = pipe.run(x, pipe.defender_keys(range(6)))
    part = pipe.run(x[3:], pipe.defender_keys(range(3, 6)))
    # same draws and noise; BLAS may round differently for other batch sizes
    np.testing.assert_allclose(full.transformed[3:], part.transformed, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(full.copy_predictions[3:], part.copy_predictions)


def test_fixed_sample_mode(tiny_trained, monkeypatch):
    import kernelshield.defense as defense
    pipe = _pipeline(tiny_trained, sample_mode="fixed")
    seen = []
    original = defense.kernel_transform

    def spy(model, images_r, targets, config, noise):
        seen.append({l: v.copy() for l, v in targets.items()})
        return original(model, images_r, targets, config, noise)

    monkeypatch.setattr(defense, "kernel_transform", spy)
    pipe.run(tiny_data().images[:2], pipe.defender_keys([0, 1]))
    np.testing.assert_array_equal(seen[0][5][:3], seen[0][5][3:])


def test_pipeline_rejects_pool_without_taps(tiny_trained):
    cfg = DefenseConfig(layers=(1,))
    pool = _pool(tiny_trained, cfg)
    with pytest.raises(DefenseConfigError):
        DefensePipeline(tiny_trained, DefenseConfig(layers=(1, 5)), pool)


def test_diagnostics_rows(tiny_trained):
    pipe = _pipeline(tiny_trained)
    rows = []
    pipe.classify(tiny_data().images[:4], image_ids=[10, 11, 12, 13], diagnostics=rows)
    assert len(rows) == 4 * 3
    assert [r["input_id"] for r in rows[:3]] == [10, 10, 10]
    assert [r["copy_class"] for r in rows[:3]] == [0, 1, 2]
    for r in rows:
        assert r["share_tap1"] + r["share_tap5"] == pytest.approx(100.0) or r["initial_loss"] == 0
    text = diagnostics_csv(rows)
    head = text.splitlines()[0].split(",")
    assert head == ["input_id", "copy_class", "initial_loss", "final_loss", "share_tap1",
                    "share_tap5", "prediction"]
    assert len(text.splitlines()) == 13
    buf = io.StringIO()
    write_diagnostics([], buf)
    assert buf.getvalue().startswith("input_id,copy_class")
