"""Kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set ``SIGNTIE_PURE_PYTHON=1`` before import to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SIGNTIE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

viterbi_lr = _impl.viterbi_lr
viterbi_lr_batch = _impl.viterbi_lr_batch
forward_backward_lr = _impl.forward_backward_lr
lr_step = _impl.lr_step


def backends():
    """Return ``{name: module}`` for every importable kernel implementation."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled
    except ImportError:
        return out
    out["cython"] = _compiled
    return out
