import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kernelshield import tensor as T
from kernelshield.gradcheck import check_gradients
from kernelshield.kernels import (KernelParams, KernelTargetSet, compute_targets, explicit_phi,
                                  kernel_fn, kernel_loss, kernel_matrix, loss_shares,
                                  total_kernel_loss)
from kernelshield.network import Network
from kernelshield.tensor import ShapeError, Tensor

from conftest import TINY_SPEC

PARAM_GRID = [KernelParams(e, d) for e in (0.0, 1.0) for d in (1, 2, 3)]


def test_kernel_params_validation():
    with pytest.raises(ValueError):
        KernelParams(e=-0.1)
    with pytest.raises(ValueError):
        KernelParams(d=0)
    with pytest.raises(ValueError):
        KernelParams(d=1.5)
    assert KernelParams(d=2.0).d == 2


@pytest.mark.parametrize("d", [1, 2, 3])
def test_kernel_of_zero_vectors_is_zero(d):
    assert float(kernel_fn(np.zeros(2), np.zeros(2), KernelParams(0.0, d)).data) == 0.0


def test_kernel_fn_examples():
    u, v = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    assert float(kernel_fn(u, v, KernelParams(0.0, 1)).data) == 11.0
    assert float(kernel_fn(u, v, KernelParams(1.0, 3)).data) == 1728.0
    assert float(explicit_phi(u, KernelParams(1.0, 3)) @ explicit_phi(v, KernelParams(1.0, 3))) \
        == pytest.approx(1728.0, rel=1e-12)


def test_kernel_fn_shape_mismatch():
    with pytest.raises(ShapeError):
        kernel_fn(np.zeros(2), np.zeros(3), KernelParams())


def test_kernel_fn_gradient_both_arguments(rng):
    u = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    v = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    assert check_gradients(lambda: kernel_fn(u, v, KernelParams(1.0, 3)), [u, v]) < 1e-6


def test_explicit_phi_dimensions():
    assert explicit_phi(np.array([0.3, -0.7]), KernelParams(1.0, 3)).shape == (10,)
    v = np.array([2.5])
    np.testing.assert_array_equal(explicit_phi(v, KernelParams(0.0, 1)), v)


def test_explicit_phi_enumeration_bound():
    with pytest.raises(ValueError, match="bound"):
        explicit_phi(np.zeros(100), KernelParams(1.0, 3))


def test_explicit_phi_reproduces_kernel_on_random_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n = int(rng.integers(1, 5))
        params = KernelParams(float(rng.integers(0, 2)), int(rng.integers(1, 4)))
        u, v = rng.normal(size=n), rng.normal(size=n)
        kappa = float(kernel_fn(u, v, params).data)
        approx = float(explicit_phi(u, params) @ explicit_phi(v, params))
        assert abs(approx - kappa) <= 1e-9 * (1 + abs(kappa))


def test_kernel_matrix_all_ones_single_map():
    g = kernel_matrix(np.ones((1, 2, 2)), KernelParams(0.0, 1))
    np.testing.assert_array_equal(g.data, [[4.0]])


def test_kernel_matrix_gram_identity(rng):
    f = rng.normal(size=(5, 3, 4))
    flat = f.reshape(5, -1)
    g = kernel_matrix(f, KernelParams(0.0, 1)).data
    assert np.max(np.abs(g - flat @ flat.T)) <= 1e-12


@pytest.mark.parametrize("params", PARAM_GRID, ids=str)
def test_kernel_matrix_matches_pairwise_loop(params, rng):
    f = rng.normal(size=(3, 2, 3))
    g = kernel_matrix(f, params).data
    for i, j in itertools.product(range(3), repeat=2):
        expected = float(kernel_fn(f[i], f[j], params).data)
        assert g[i, j] == pytest.approx(expected, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("params", PARAM_GRID, ids=str)
def test_kernel_matrix_symmetric_and_psd(params, rng):
    for _ in range(5):
        f = rng.normal(size=(6, 3, 3))
        g = kernel_matrix(f, params).data
        assert np.max(np.abs(g - g.T)) <= 1e-10
        eig = np.linalg.eigvalsh((g + g.T) / 2)
        assert eig.min() >= -1e-8 * eig.max()


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 3), st.integers(1, 3)),
              elements=st.floats(-3, 3, allow_nan=False)),
       st.sampled_from(PARAM_GRID))
def test_kernel_matrix_symmetric_property(f, params):
    g = kernel_matrix(f, params).data
    assert np.max(np.abs(g - g.T)) <= 1e-10 * (1 + np.abs(g).max())


def test_batched_kernel_matrix_matches_single(rng):
    f = rng.normal(size=(3, 4, 2, 2))
    params = KernelParams(1.0, 2)
    batched = kernel_matrix(f, params).data
    for b in range(3):
        np.testing.assert_array_equal(batched[b], kernel_matrix(f[b], params).data)


def test_normalised_kernel_matrix(rng):
    f = rng.normal(size=(3, 2, 2))
    params = KernelParams(0.0, 1)
    np.testing.assert_allclose(kernel_matrix(f, params, normalize=True).data,
                               kernel_matrix(f, params).data / (9 * 16), rtol=1e-14)


def test_kernel_loss_examples():
    params = KernelParams(0.0, 1)
    f = np.full((1, 1, 1), np.sqrt(3.0))
    assert float(kernel_loss(f, np.array([[1.0]]), params).data) == pytest.approx(4.0, abs=1e-12)


def test_kernel_loss_zero_at_target(rng):
    params = KernelParams(1.0, 2)
    f = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    target = kernel_matrix(f.data, params).data
    loss = kernel_loss(f, target, params)
    loss.backward()
    assert float(loss.data) == 0.0
    assert not f.grad.any()


def test_kernel_loss_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        kernel_loss(rng.normal(size=(3, 2, 2)), np.zeros((4, 4)), KernelParams())


def test_kernel_loss_feature_gradient(rng):
    params = KernelParams(1.0, 2)
    f = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    target = kernel_matrix(rng.normal(size=(3, 2, 2)), params).data
    assert check_gradients(lambda: kernel_loss(f, target, params), [f]) < 1e-6


def _targets(net, params, layers, seed):
    sample = np.random.default_rng(seed).uniform(size=net.spec.in_shape)
    return compute_targets(net, sample, 1, layers, params)


def test_multi_layer_loss_input_gradient_through_network(rng):
    net = Network(TINY_SPEC, seed=11)
    params = KernelParams(1.0, 2)
    layers = (0, 2, 5)
    targets = _targets(net, params, layers, 0)
    x = Tensor(rng.uniform(size=(1,) + TINY_SPEC.in_shape), requires_grad=True)

    def loss():
        _, taps = net.forward_taps(x, layers)
        single = {l: T.reshape(taps[l], taps[l].shape[1:]) for l in layers}
        return total_kernel_loss(single, targets, layers, params)

    with net.frozen():
        assert check_gradients(loss, [x]) < 1e-4


def test_compute_targets_has_exactly_requested_taps():
    net = Network(TINY_SPEC, seed=1)
    targets = _targets(net, KernelParams(), [3, 1, 1], 0)
    assert isinstance(targets, KernelTargetSet)
    assert targets.taps == (1, 3)
    assert targets.matrices[3].shape == (3, 3)


def _taps(net, x, layers):
    _, feats = net.forward_with_taps(x, layers)
    return {l: Tensor(feats[l][0]) for l in layers}


def test_total_loss_single_layer_and_additivity(rng):
    net = Network(TINY_SPEC, seed=1)
    params = KernelParams(0.0, 1)
    layers = list(range(6))
    targets = _targets(net, params, layers, 0)
    taps = _taps(net, rng.uniform(size=TINY_SPEC.in_shape), layers)
    single = total_kernel_loss(taps, targets, [2], params).data
    assert single == kernel_loss(taps[2], targets.matrices[2], params).data
    a, b = [0, 1, 2], [3, 4, 5]
    whole = float(total_kernel_loss(taps, targets, a + b, params).data)
    parts = float(total_kernel_loss(taps, targets, a, params).data) + \
        float(total_kernel_loss(taps, targets, b, params).data)
    assert whole == pytest.approx(parts, rel=1e-12)


def test_total_loss_errors(rng):
    net = Network(TINY_SPEC, seed=1)
    targets = _targets(net, KernelParams(), [0, 1], 0)
    taps = _taps(net, rng.uniform(size=TINY_SPEC.in_shape), [0, 1])
    with pytest.raises(ValueError):
        total_kernel_loss(taps, targets, [], KernelParams())
    with pytest.raises(KeyError):
        total_kernel_loss(taps, targets, [0, 4], KernelParams())


def test_loss_shares_sum_to_hundred():
    per = {0: np.array([1.0, 0.0]), 5: np.array([3.0, 0.0])}
    shares = loss_shares(per)
    np.testing.assert_allclose(shares[0] + shares[5], [100.0, 0.0])
    assert shares[5][0] == 75.0
