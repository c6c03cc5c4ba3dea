"""Shared test utilities: finite-difference gradient checking and tiny nets."""

import numpy as np

from spectpd import models, ops

FD_H = 1e-4
FD_RTOL = 1e-4


def numerical_gradient(f, x, coords, h=FD_H):
    """Central finite differences of scalar f at the given flat coordinates."""
    x = np.asarray(x, dtype=np.float64)
    grads = np.zeros(len(coords))
    flat = x.reshape(-1)
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        grads[n] = (fp - fm) / (2 * h)
    return grads


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / scale


def assert_grad_matches(f, x, analytic, n_coords=20, rng=None, rtol=FD_RTOL, h=FD_H):
    """Check analytic gradient of scalar f against central differences.

    Samples n_coords random coordinates of x (all coordinates when x is small).
    """
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    size = x.size
    if size <= n_coords:
        coords = np.arange(size)
    else:
        coords = rng.choice(size, size=n_coords, replace=False)
    num = numerical_gradient(f, x, coords, h=h)
    ana = np.asarray(analytic, dtype=np.float64).reshape(-1)[coords]
    err = relative_error(ana, num)
    assert err.max() < rtol, f"gradient mismatch: max relative error {err.max():.3e}"


def tiny_network(batchnorm=False, extents=(8, 8, 8)):
    """A minimal conv->relu(->bn)->pool->conv->flatten->dense pipeline for tests."""
    layers = [
        models.Conv3dLayer(4, (3, 3, 3), (2, 2, 2)),
        models.ReluLayer(),
    ]
    if batchnorm:
        layers.append(models.BatchNormLayer())
    layers += [
        models.MaxPool3dLayer((3, 3, 3), (2, 2, 2)),
        models.Conv3dLayer(256, (1, 1, 1), (1, 1, 1)),
        models.ReluLayer(),
        models.FlattenLayer(),
        models.DenseLayer(2),
    ]
    spec = models.NetworkSpec(name="tiny", input_extents=extents, layers=tuple(layers))
    spec.validate()
    return spec
