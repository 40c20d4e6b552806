import numpy as np
import pytest

from csmala.data import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def reference_forward(arch, theta, x):
    """Straight-line evaluation of the layer recursion with explicit loops."""
    theta = list(map(float, theta))
    pos = 0
    h = [float(v) for v in x]
    shapes = [(arch.r, arch.p)] + [(arch.r, arch.r)] * (arch.L - 1) + [(1, arch.r)]
    for layer, (out_dim, in_dim) in enumerate(shapes):
        W = [[theta[pos + i * in_dim + j] for j in range(in_dim)] for i in range(out_dim)]
        pos += out_dim * in_dim
        b = theta[pos : pos + out_dim]
        pos += out_dim
        z = [sum(W[i][j] * h[j] for j in range(in_dim)) + b[i] for i in range(out_dim)]
        h = z if layer == len(shapes) - 1 else [max(v, 0.0) for v in z]
    assert pos == len(theta)
    return h[0]


def make_dataset(rng, n, p=1):
    return Dataset(rng.uniform(-1, 1, size=(n, p)), rng.normal(size=n))
