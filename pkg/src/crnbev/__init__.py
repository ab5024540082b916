"""Camera-radar BEV feature pipeline: radar-assisted view transformation,
average voxel pooling, and multi-modal deformable cross attention."""
import os
import sys

# numba fixes its pool size at import; leave room for an explicit --threads.
# Changing these after numba has loaded its config makes it refuse to compile.
if "numba" not in sys.modules:
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    os.environ.setdefault("NUMBA_NUM_THREADS", str(max(os.cpu_count() or 1, 8)))

__version__ = "0.1.0"
