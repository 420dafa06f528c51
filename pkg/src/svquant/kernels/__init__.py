"""Backend selection for the hot loops.

The jit backend is used when numba imports cleanly; setting the
environment variable ``SVQUANT_NO_NUMBA`` to any nonempty value forces
the pure-numpy fallback. Both backends implement identical semantics;
``benchmarks/bench_kernels.py`` compares their throughput.
"""

from __future__ import annotations

import os

from . import _numpy

if os.environ.get("SVQUANT_NO_NUMBA"):
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        _impl = _numpy
        BACKEND = "numpy"

assign_nearest = _impl.assign_nearest
assign_nearest_weighted = _impl.assign_nearest_weighted
accumulate_clusters = _impl.accumulate_clusters
accumulate_clusters_weighted = _impl.accumulate_clusters_weighted
wkv_sequence = _impl.wkv_sequence

__all__ = [
    "BACKEND",
    "assign_nearest",
    "assign_nearest_weighted",
    "accumulate_clusters",
    "accumulate_clusters_weighted",
    "wkv_sequence",
]
