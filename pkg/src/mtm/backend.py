"""Kernel backend selection.

The hot kernels (softmax, layer norm, BCE, Adam) exist twice: a Cython
extension (`mtm._ckernels`) and a numpy fallback (`mtm._kernels_py`).  The
compiled module is preferred when importable; set MTM_KERNELS=python or
MTM_KERNELS=compiled to force one side (forcing `compiled` raises if the
extension is missing).  `benchmarks/bench_kernels.py` compares the two.
"""

import os

from . import _kernels_py

_choice = os.environ.get("MTM_KERNELS", "").strip().lower()

if _choice == "python":
    kernels = _kernels_py
elif _choice == "compiled":
    from . import _ckernels as kernels  # noqa: F401  (ImportError is the signal)
else:
    try:
        from . import _ckernels as kernels
    except ImportError:
        kernels = _kernels_py


def active_backend() -> str:
    """Name of the kernel backend in use: 'compiled' or 'python'."""
    return "compiled" if kernels.NAME == "compiled" else "python"
