"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``TDPLAN_NUMBA`` is not ``0``. The choice is made once, at import.
Both implementations stay importable as ``numpy_impl`` and ``numba_impl``
(the latter is ``None`` without numba) so tests and benchmarks can compare
them directly.
"""
import os

from . import _numpy as numpy_impl

try:
    from . import _numba as numba_impl
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

KERNEL_NAMES = (
    "conv1d_forward",
    "conv1d_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "group_norm_forward",
    "group_norm_backward",
    "mish_forward",
    "mish_backward",
    "masked_softmax_forward",
    "masked_softmax_backward",
    "move_axis",
)


def numba_requested():
    return os.environ.get("TDPLAN_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = numba_impl is not None and numba_requested()
active = numba_impl if USE_NUMBA else numpy_impl
BACKEND = "numba" if USE_NUMBA else "numpy"

conv1d_forward = active.conv1d_forward
conv1d_backward = active.conv1d_backward
layer_norm_forward = active.layer_norm_forward
layer_norm_backward = active.layer_norm_backward
group_norm_forward = active.group_norm_forward
group_norm_backward = active.group_norm_backward
mish_forward = active.mish_forward
mish_backward = active.mish_backward
masked_softmax_forward = active.masked_softmax_forward
masked_softmax_backward = active.masked_softmax_backward
move_axis = active.move_axis
