"""Shared fixtures and the finite-difference gradient oracle."""

import numpy as np
import pytest

from vitprune import ModelConfig
from vitprune.tensor import Graph, Tensor, backward, no_grad

# Central differences at h=1e-5 on 64-bit values: the roundoff floor is
# ~1e-11 absolute, so coordinates below the 1e-5 denominator floor are
# noise-dominated and not informative about gradient correctness.
FD_STEP = 1e-5
REL_FLOOR = 1e-5


def numerical_grad(fn, array: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar-valued ``fn`` w.r.t. ``array``."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray,
                floor: float = REL_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(build_loss, leaves: list[Tensor], tol: float,
              h: float = FD_STEP) -> float:
    """Compare backward() gradients against central differences.

    ``build_loss`` must construct the scalar loss from the current leaf
    values; it is re-run under ``no_grad`` for each probe.
    """
    for leaf in leaves:
        leaf.grad = None
    with Graph() as graph:
        loss = build_loss()
    backward(loss, graph)

    def value():
        with no_grad():
            return build_loss().item()

    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf did not receive a gradient"
        numeric = numerical_grad(value, leaf.data, h)
        worst = max(worst, max_rel_err(leaf.grad, numeric))
    assert worst <= tol, f"gradient mismatch: max rel err {worst} > {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest config that still exercises heads, blocks, and the MLP."""
    return ModelConfig(image_size=8, patch_size=4, in_channels=1, embed_dim=8,
                       num_layers=2, num_heads=2, mlp_ratio=4, num_classes=3)


@pytest.fixture
def small_config():
    """Mid-size toy used for pruning and equivalence tests."""
    return ModelConfig(image_size=16, patch_size=4, in_channels=3, embed_dim=32,
                       num_layers=2, num_heads=4, mlp_ratio=4, num_classes=10)
