"""Desk-scale simulator for decentralized federated RL scheduling of DAG
workloads across heterogeneous silos."""

import os as _os

# All matrices here are tiny; parallelism lives at the run level, so
# multi-threaded BLAS only adds contention. Must be set before numpy loads.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
