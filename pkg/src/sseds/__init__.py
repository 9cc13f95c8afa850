"""Single-shot embedding dimension search for CTR models."""
import os

# Caps BLAS/OpenMP worker pools before NumPy loads; fixed thread counts keep
# reductions in a stable order.
_threads = os.environ.get("SSEDS_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
