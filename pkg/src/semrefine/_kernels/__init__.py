"""Kernel backend selection.

The hot loops (rasterization, warping, gradient scatter, MRF solvers) exist
twice: numba-compiled in `numbaimpl` and pure numpy in `numpyimpl`. Setting
the environment variable SEMREFINE_NO_NUMBA=1 before import selects the
numpy path; it is also used automatically when numba is unavailable.
`benchmarks/bench_kernels.py` compares the two.
"""

import logging
import os

log = logging.getLogger(__name__)

_flag = os.environ.get("SEMREFINE_NO_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _flag not in ("1", "true", "yes", "on")

if NUMBA_REQUESTED:
    try:
        from . import numbaimpl as active

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - depends on environment
        log.warning("numba unavailable, falling back to numpy kernels")
        from . import numpyimpl as active

        NUMBA_ENABLED = False
else:
    from . import numpyimpl as active

    NUMBA_ENABLED = False

rasterize = active.rasterize
coverage_aa = active.coverage_aa
reproject = active.reproject
scatter_pair_gradient = active.scatter_pair_gradient
icm_sweeps = active.icm_sweeps
bruteforce_labeling = active.bruteforce_labeling

BACKEND = "numba" if NUMBA_ENABLED else "numpy"
