"""Scoring kernel selection.

The compiled extension is preferred; the NumPy fallback is functionally
identical (results agree to well below every tolerance in the test suite).
Set CIPHERSEEK_KERNELS=fallback to force the pure-Python path, e.g. for the
kernel benchmark or debugging.
"""

import os

from . import fallback

BACKEND = "fallback"
_impl = fallback

if os.environ.get("CIPHERSEEK_KERNELS", "").lower() != "fallback":
    try:
        from . import _ckernels

        _impl = _ckernels
        BACKEND = "compiled"
    except ImportError:
        pass

paired_dot = _impl.paired_dot
paired_gemv = _impl.paired_gemv
accumulate_pair_sums = _impl.accumulate_pair_sums

__all__ = ["BACKEND", "paired_dot", "paired_gemv", "accumulate_pair_sums"]
