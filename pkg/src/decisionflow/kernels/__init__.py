"""Kernel backend selection: compiled extension if built, numpy otherwise.

The choice is made once at import.  ``BACKEND`` reports which implementation
is active; set DECISIONFLOW_FORCE_FALLBACK=1 to skip the compiled extension.
"""

import os

from . import fallback

ACT_RELU = fallback.ACT_RELU
ACT_SILU = fallback.ACT_SILU
param_count = fallback.param_count

if os.environ.get("DECISIONFLOW_FORCE_FALLBACK") == "1":
    _impl = fallback
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = fallback

BACKEND = _impl.BACKEND
mlp_forward = _impl.mlp_forward
mlp_backward = _impl.mlp_backward
