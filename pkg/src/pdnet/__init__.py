"""Prior-guided, depth-enhanced RGB-D salient object detection, from scratch."""

import os as _os
import sys as _sys

# Default mode is single-threaded with a fixed reduction order so training
# runs are bit-reproducible (and BLAS threading loses on our skinny GEMMs
# anyway).  Honored only if numpy has not been imported yet; override with
# PDNET_THREADS=N.
if "numpy" not in _sys.modules:
    _threads = _os.environ.get("PDNET_THREADS", "1")
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .tensor import Rng, ShapeError, Tape, TapeError, Tensor, backward, truncated_normal_init

__version__ = "0.1.0"

__all__ = [
    "Rng",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "backward",
    "truncated_normal_init",
    "__version__",
]
