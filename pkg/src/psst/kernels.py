"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``PSST_PURE_PYTHON=1``
to force the numpy fallback (useful for debugging and for the benchmark).
The GRU gate forward always takes the numpy path: it is three transcendentals
per element, and numpy's vectorised exp/tanh beat the compiled scalar loop
from batch 32 up. The compiled forward stays in the extension for the
benchmark and the agreement tests.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("PSST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

gru_gates_forward = _kernels_py.gru_gates_forward
gru_gates_backward = _impl.gru_gates_backward
CiderScorer = _impl.CiderScorer

MAX_N = _kernels_py.MAX_N
MAX_TOKEN = _kernels_py.MAX_TOKEN
ngram_id = _kernels_py.ngram_id
ngram_ids = _kernels_py.ngram_ids

__all__ = [
    "BACKEND",
    "CiderScorer",
    "MAX_N",
    "MAX_TOKEN",
    "gru_gates_backward",
    "gru_gates_forward",
    "ngram_id",
    "ngram_ids",
]
