"""Shared test oracles and builders.

The oracles here are deliberately independent of the library's analytic
paths: gradients come from central finite differences, and the output-row
gradient comes from its pulling/pushing closed form written out directly.
"""

from __future__ import annotations

import numpy as np
import pytest

from mhfed import nn


def finite_difference_grads(net, loss_fn, eps=1e-5):
    """Central finite differences of loss_fn(net) for every parameter."""
    grads = []
    for layer in net.layers:
        gw = np.zeros_like(layer.weights)
        for idx in np.ndindex(*layer.weights.shape):
            orig = layer.weights[idx]
            layer.weights[idx] = orig + eps
            up = loss_fn(net)
            layer.weights[idx] = orig - eps
            down = loss_fn(net)
            layer.weights[idx] = orig
            gw[idx] = (up - down) / (2.0 * eps)
        gb = np.zeros_like(layer.bias)
        for idx in np.ndindex(*layer.bias.shape):
            orig = layer.bias[idx]
            layer.bias[idx] = orig + eps
            up = loss_fn(net)
            layer.bias[idx] = orig - eps
            down = loss_fn(net)
            layer.bias[idx] = orig
            gb[idx] = (up - down) / (2.0 * eps)
        grads.append((gw, gb))
    return grads


def output_row_forces(trace, targets_pm):
    """Closed-form sum-of-forces gradient of the log-likelihood output rows.

    Row 1 collects h_t (1 - p1) over targets +1 and h_t (-p1) over targets -1;
    row 2 is the mirror with p2. No batch scaling, maximization convention.
    """
    h = trace.final_input
    p = trace.out
    pos = targets_pm == 1
    neg = targets_pm == -1
    g1 = (h[pos] * (1.0 - p[pos, 0][:, None])).sum(axis=0) + (h[neg] * (-p[neg, 0][:, None])).sum(axis=0)
    g2 = (h[pos] * (-p[pos, 1][:, None])).sum(axis=0) + (h[neg] * (1.0 - p[neg, 1][:, None])).sum(axis=0)
    return g1, g2


def random_softmax_net(rng, max_hidden=8):
    """Small random two-class net ending in softmax."""
    depth = int(rng.integers(1, 4))
    dims = [int(rng.integers(2, max_hidden + 1)) for _ in range(depth + 1)] + [2]
    acts = [nn.LEAKY_RELU] * depth + [nn.SOFTMAX]
    return nn.init(dims, acts, rng)


def random_regression_net(rng, max_hidden=8):
    """Small random scalar-output net mixing leaky-ReLU and identity layers."""
    depth = int(rng.integers(1, 4))
    dims = [int(rng.integers(2, max_hidden + 1)) for _ in range(depth + 1)] + [1]
    acts = [nn.LEAKY_RELU] * depth + [nn.IDENTITY]
    return nn.init(dims, acts, rng)


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    for (aw, ab), (numw, numb) in zip(analytic, numeric):
        np.testing.assert_allclose(aw, numw, rtol=rtol, atol=atol)
        np.testing.assert_allclose(ab, numb, rtol=rtol, atol=atol)


def kink_safe_case(make_net, rng, batch_size, margin=1e-3):
    """(net, batch) whose leaky-ReLU pre-activations all sit clear of zero.

    Central differences straddle the kink when a pre-activation lies within
    eps of zero, so such cases are resampled rather than tolerated. A net with
    a near-zero weight row can make every batch unsafe, hence nets are
    resampled too.
    """
    for _ in range(500):
        net = make_net(rng)
        batch = rng.normal(size=(batch_size, net.layers[0].in_dim))
        trace = nn.forward(net, batch)
        ok = all(
            np.abs(z).min() > margin
            for z, layer in zip(trace.pre, net.layers)
            if layer.activation == nn.LEAKY_RELU
        )
        if ok:
            return net, batch
    raise AssertionError("could not find a kink-safe net/batch pair")


@pytest.fixture
def rng():
    return np.random.default_rng(42)
