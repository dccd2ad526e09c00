"""Task-aware cone-beam CT simulation, planning, and evaluation toolkit."""

import os

# Pin the threading layer before numba probes TBB (the sandboxed TBB is
# too old and triggers a warning otherwise).
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
