import os


def _has_avx2() -> bool:
    try:
        with open("/proc/cpuinfo") as fh:
            return " avx2" in fh.read()
    except OSError:
        return False


# OpenBLAS 0.3.20 mis-detects some AVX-512 FP16 CPUs and its kernels then break
# supernodal CHOLMOD; pinning a known core type must happen before numpy loads.
if "OPENBLAS_CORETYPE" not in os.environ and _has_avx2():
    os.environ["OPENBLAS_CORETYPE"] = "Haswell"

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
