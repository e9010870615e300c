"""Kernel selection: the compiled module when it imports, else the Python one.

Set ``MEDADAPT_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

python_kernels = _pykernels
compiled_kernels = None
if os.environ.get("MEDADAPT_PURE_PYTHON", "") != "1":
    try:
        from . import _ckernels as compiled_kernels
    except ImportError:
        compiled_kernels = None

_active = compiled_kernels or python_kernels
IMPLEMENTATION = _active.IMPLEMENTATION
corrupt_arrays = _active.corrupt_arrays
reconstruct_arrays = _active.reconstruct_arrays
attention_mask = _active.attention_mask


def available():
    """All importable kernel modules, fallback first."""
    return [m for m in (python_kernels, compiled_kernels) if m is not None]
