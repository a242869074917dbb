"""Backend selection for the sliding-window kernels.

The compiled Cython core is used when it imports; otherwise the numpy
fallback is. Set ``DEEPID3_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

python_backend = _pykernels

compiled_backend = None
if os.environ.get("DEEPID3_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if backend is compiled_backend else "python"

im2col = backend.im2col
col2im = backend.col2im
maxpool_forward = backend.maxpool_forward
maxpool_backward = backend.maxpool_backward
