"""Shared oracles for the test suite.

These deliberately re-derive results through slow, independent routes:
finite differences for gradients, six-loop convolution, O(N^4) direct DFT.
Fast implementations are asserted against these, never against themselves.
"""

from __future__ import annotations

import numpy as np
import pytest

from ueforge import autodiff as ad
from ueforge.autodiff import Tape


def central_difference(make_loss, param, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar loss wrt one tensor."""
    fd = np.zeros_like(param.data)
    it = np.nditer(param.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param.data[idx]
        param.data[idx] = orig + h
        with Tape():
            up = make_loss().item()
        param.data[idx] = orig - h
        with Tape():
            down = make_loss().item()
        param.data[idx] = orig
        fd[idx] = (up - down) / (2.0 * h)
    return fd


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def gradcheck(make_loss, params, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences."""
    with Tape():
        loss = make_loss()
        ad.backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter did not receive a gradient"
        tape_grad = p.grad.copy()
        p.grad = None
        fd = central_difference(make_loss, p, h)
        worst = max(worst, max_relative_error(tape_grad, fd))
    return worst


def conv2d_loops(x: np.ndarray, k: np.ndarray, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    """Reference convolution: six explicit loops, no vectorization."""
    b, c_in, h, w = x.shape
    c_out, c_in2, kh, kw = k.shape
    assert c_in == c_in2
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, c_out, ho, wo))
    for bi in range(b):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ci, i * stride + u, j * stride + v] * k[co, ci, u, v]
                    out[bi, co, i, j] = acc
    return out


def dft2_direct(z: np.ndarray) -> np.ndarray:
    """O(N^4) direct 2D DFT, forward unnormalized, DC at (0, 0)."""
    h, w = z.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0.0 + 0.0j
            for y in range(h):
                for x in range(w):
                    acc += z[y, x] * np.exp(-2j * np.pi * (u * y / h + v * x / w))
            out[u, v] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0xA11CE)
