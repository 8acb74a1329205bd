"""Kernel backend selection.

The compiled extension is preferred; the pure-Python mirror is used when
the extension is unavailable or when ``SELFHEAL_KERNELS=python`` is set.
Both backends execute the identical IEEE-754 operation sequence, so a
given seed produces the same bytes either way.
"""

import os

from . import _kernels_py

_choice = os.environ.get("SELFHEAL_KERNELS", "").strip().lower()

if _choice in ("python", "py"):
    _impl = _kernels_py
elif _choice in ("cython", "c", "ext"):
    from . import _kernels as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # source tree without a built extension
        _impl = _kernels_py

BACKEND = _impl.BACKEND

matmul = _impl.matmul
matvec = _impl.matvec
matvec_t = _impl.matvec_t
dot = _impl.dot
jacobi_eigh = _impl.jacobi_eigh
cholesky = _impl.cholesky
cholesky_solve = _impl.cholesky_solve


def both_backends():
    """(compiled, fallback) module pair, or (None, fallback) if not built."""
    try:
        from . import _kernels
    except ImportError:
        return None, _kernels_py
    return _kernels, _kernels_py
