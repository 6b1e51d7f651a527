"""Point cloud completion with cross- and self-attention blocks.

The package is organized bottom-up: a small tape-based autodiff core
(`tensor`), geometric primitives (`geometry`, `cloud_io`), the attention
blocks (`blocks`), the full completion network (`model`), training
machinery (`training`), synthetic data (`data`), and a CLI (`cli`).
"""

import os as _os

# Must run before numpy is first imported anywhere in this process,
# otherwise the BLAS thread pool is already sized.
_threads = _os.environ.get("POINTATTN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)


def _tune_allocator():
    # glibc mmap()s every multi-MB block and returns it to the kernel on
    # free, so each attention matrix pays page-fault cost again. Raising
    # the thresholds keeps large blocks on the reusable heap.
    import ctypes
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 512 * 1024 * 1024)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 512 * 1024 * 1024)   # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

from .tensor import Tensor, Tape, DimensionError, grad_check  # noqa: E402
from .errors import ConfigError, CloudFormatError, NonFiniteLossError  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "DimensionError", "grad_check",
    "ConfigError", "CloudFormatError", "NonFiniteLossError",
]
