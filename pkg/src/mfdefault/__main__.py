import os
import sys


def _thread_cap(argv):
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return None


# BLAS reads its thread count once, when numpy is first imported
_cap = _thread_cap(sys.argv[1:])
if _cap:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = _cap

from .cli import main  # noqa: E402

sys.exit(main())
