"""Pin thread/runtime knobs before numpy/numba load so tests are reproducible."""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
os.environ.setdefault("OMP_WAIT_POLICY", "passive")
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
os.environ.setdefault("MAFT_THREADS", str(min(8, os.cpu_count() or 1)))
