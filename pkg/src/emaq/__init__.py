"""Expected-Max Q-Learning.

``EMAQ_THREADS`` caps BLAS/OpenMP worker threads (default 1, which keeps
floating-point reductions reproducible).  It must be set before numpy is
first imported to take effect.
"""

import os as _os

_threads = _os.environ.get("EMAQ_THREADS")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    if _threads is not None:
        _os.environ[_var] = _threads
    else:
        _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
