"""Kernel backend selection.

The compiled extension is used when importable; set ``VERLITE_PURE_PYTHON=1`` to
force the numpy fallback. ``BACKEND`` names the active implementation.
"""

from __future__ import annotations

import os

from verlite import _kernels_py

if os.environ.get("VERLITE_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from verlite import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

gae = _impl.gae
pack_index = _impl.pack_index
gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward
policy_step = _impl.policy_step
StepKernel = _impl.StepKernel
categorical_sample = _impl.categorical_sample

__all__ = ["BACKEND", "StepKernel", "categorical_sample", "gae", "gru_backward", "gru_forward", "pack_index",
           "policy_step"]
