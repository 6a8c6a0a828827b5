"""Hot numerical kernels with a compiled core and a numpy fallback.

The backend is chosen once at import. ``DSWM_KERNELS=python`` forces the
fallback, ``DSWM_KERNELS=cython`` makes a missing extension an error, and the
default (``auto``) uses the extension when it is importable.
"""

import os

from . import _pykernels as python_backend

_choice = os.environ.get("DSWM_KERNELS", "auto").lower()

if _choice not in ("auto", "python", "cython"):
    raise ImportError(f"DSWM_KERNELS must be auto, python or cython, not {_choice!r}")

cython_backend = None
if _choice != "python":
    try:
        from . import _ckernels as cython_backend
    except ImportError:
        if _choice == "cython":
            raise

backend = cython_backend if cython_backend is not None else python_backend
BACKEND = backend.NAME

swish_fwd = backend.swish_fwd
swish_bwd = backend.swish_bwd
gru_fwd = backend.gru_fwd
gru_bwd = backend.gru_bwd
softmax_groups = backend.softmax_groups
softmax_groups_bwd = backend.softmax_groups_bwd
dnd_read_fwd = backend.dnd_read_fwd
dnd_read_bwd = backend.dnd_read_bwd

__all__ = [
    "BACKEND", "backend", "python_backend", "cython_backend",
    "swish_fwd", "swish_bwd", "gru_fwd", "gru_bwd", "softmax_groups",
    "softmax_groups_bwd", "dnd_read_fwd", "dnd_read_bwd",
]
