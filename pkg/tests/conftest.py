import numpy as np
import pytest

from spectralmamba import ndtensor as nd
from spectralmamba.data import SplitSpec, make_split, normalize, slic_segment, synth_scene

FD_STEP = 1e-5
FD_TOL = 1e-4


def rel_error(analytic, numeric) -> float:
    """Max of |a - n| / max(|a|, 1e-8), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-8)))


def numeric_grad(loss_fn, tensor, h=FD_STEP):
    """Central differences of ``loss_fn()`` with respect to ``tensor.data``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    with nd.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def gradient_pairs(loss_fn, tensors: dict, h=FD_STEP) -> dict:
    """Analytic and central-difference gradients per tensor.

    ``loss_fn`` rebuilds the scalar loss from the current tensor values.
    """
    for t in tensors.values():
        t.grad = None
    nd.backward(loss_fn())
    out = {}
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        out[name] = (analytic, numeric_grad(loss_fn, t, h))
    return out


def gradcheck(loss_fn, tensors: dict, h=FD_STEP) -> dict:
    """Relative error of analytic vs central-difference gradients per tensor."""
    return {name: rel_error(a, n) for name, (a, n) in gradient_pairs(loss_fn, tensors, h).items()}


def weighted_sum(y, seed=0):
    """Scalar loss with random weights so no gradient is trivially uniform."""
    w = np.random.default_rng(seed).uniform(-1, 1, y.shape)
    return nd.tsum(nd.mul(y, nd.DiffTensor(w)))


@pytest.fixture(scope="session")
def scene():
    """The default synthetic scene, normalized, with a 20-per-class split."""
    cube, labels = synth_scene(32, 32, 48, 4, 0.05, seed=0)
    cube = normalize(cube)
    spec = SplitSpec(budget=20, seed=0)
    split = make_split(labels, slic_segment(cube, spec), spec)
    return cube, labels, split
