import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from lesionnet.archspec import parse_archspec  # noqa: E402
from lesionnet.synthetic import separable_dataset  # noqa: E402

SMALL_ARCH = """\
# one of each building block on 16x16 inputs
input 3 16 16
conv stem out=8 k=3 s=2
pepe b1 proj1=4 exp1=16 proj2=4 out=8
vac a1 down=4 embed=4 up=8 pool=2
residual r1 mid=4 out=16 s=2
head 2
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_arch_text():
    return SMALL_ARCH


@pytest.fixture
def small_spec():
    return parse_archspec(SMALL_ARCH, name="small")


@pytest.fixture
def separable_data():
    return separable_dataset(32, size=8, seed=3)
