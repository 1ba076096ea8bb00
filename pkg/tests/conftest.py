import numpy as np
import pytest

from roundlab import network as net


def rel_err(a, b, floor=1e-12):
    """Norm-ratio relative error between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / denom


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def random_small_model(rng, max_weighted=3):
    """Random dense/relu stack with <=64 weights per layer for gradient checks."""
    depth = rng.integers(1, max_weighted + 1)
    dims = [int(rng.integers(2, 9))]
    for _ in range(depth):
        dims.append(int(rng.integers(2, 9)))
    layers = []
    for i in range(depth):
        w = rng.normal(0, 1.0, size=(dims[i + 1], dims[i]))
        b = rng.normal(0, 0.3, size=dims[i + 1])
        layers.append(net.dense(w, b))
        if i < depth - 1 and rng.random() < 0.7:
            layers.append(net.relu())
    return net.Model(layers, (dims[0],), dims[-1]).validate()


def random_conv_model(rng):
    """Tiny conv/dense model on (1|2, 6, 6) inputs for gradient checks."""
    c = int(rng.integers(1, 3))
    o1 = int(rng.integers(2, 4))
    k = 3
    classes = int(rng.integers(2, 5))
    layers = [
        net.conv2d(rng.normal(0, 0.8, size=(o1, c, k, k)),
                   rng.normal(0, 0.2, size=o1), stride=1, pad=1),
        net.relu(),
        net.flatten(),
        net.dense(rng.normal(0, 0.5, size=(classes, o1 * 36)),
                  rng.normal(0, 0.2, size=classes)),
    ]
    return net.Model(layers, (c, 6, 6), classes).validate()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260809)
