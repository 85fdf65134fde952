"""Kernel backend selection.

The compiled Cython kernels are preferred; the numpy implementation is
the fallback. Set FOODREC_KERNELS=numpy (or =cython) to force a backend,
e.g. for the benchmark in benchmarks/bench_kernels.py.
"""

import os

import numpy as np

from .errors import ContractError, DimensionError

_forced = os.environ.get("FOODREC_KERNELS", "").strip().lower()

if _forced in ("numpy", "py", "python"):
    from . import _kernels_py as _impl
elif _forced == "cython":
    from . import _kernels as _impl  # type: ignore[attr-defined]
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _impl

BACKEND = _impl.NAME


def _as_c(a):
    return np.ascontiguousarray(a)


def conv2d_forward(x, w, stride, padding):
    """Cross-correlate x (C,H,W) with kernels w (O,C,kh,kw), zero padding."""
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects (C,H,W) input and (O,C,kh,kw) kernels, got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise DimensionError(f"input channels {x.shape} do not match kernel channels {w.shape}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"padding must be >= 0, got {padding}")
    kh, kw = w.shape[2], w.shape[3]
    if kh > x.shape[1] + 2 * padding or kw > x.shape[2] + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {x.shape[1] + 2 * padding}x{x.shape[2] + 2 * padding}"
        )
    return _impl.conv2d_forward(_as_c(x), _as_c(w), stride, padding)


def conv2d_backward(x, w, gy, stride, padding):
    return _impl.conv2d_backward(_as_c(x), _as_c(w), _as_c(gy), stride, padding)


def maxpool2d_forward(x, window, stride, padding):
    """Max pooling; returns (output, argmax) with argmax as flat row*W+col indices."""
    if x.ndim != 3:
        raise DimensionError(f"maxpool2d expects (C,H,W) input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ContractError(f"window and stride must be >= 1, got {window}, {stride}")
    if padding < 0:
        raise ContractError(f"padding must be >= 0, got {padding}")
    if window > x.shape[1] + 2 * padding or window > x.shape[2] + 2 * padding:
        raise DimensionError(
            f"window {window} larger than padded input {x.shape[1] + 2 * padding}x{x.shape[2] + 2 * padding}"
        )
    return _impl.maxpool2d_forward(_as_c(x), window, stride, padding)


def maxpool2d_backward(argmax, gy, h, w):
    return _impl.maxpool2d_backward(_as_c(argmax), _as_c(gy), h, w)
