import os
import sys

# Pin the BLAS pool to one thread before any test work: faster at these
# matrix sizes and bitwise reproducible.  A pytest plugin may import
# numpy before this file runs, so the runtime API is used as well.
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
from prunelab._threads import pin_single_thread

pin_single_thread()

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
