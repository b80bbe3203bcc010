import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ovnav.embedspace import CategoryVocabulary

DESK_CATEGORIES = [
    "bed", "nightstand", "wardrobe", "sofa", "tv_stand", "coffee_table",
    "bookshelf", "plant", "stove", "fridge", "kitchen_sink", "toilet",
    "bathtub", "desk", "office_chair", "other",
]


@pytest.fixture
def desk_vocab():
    return CategoryVocabulary(DESK_CATEGORIES, dim=16, seed=7)


@pytest.fixture
def wide_vocab():
    return CategoryVocabulary(DESK_CATEGORIES, dim=64, seed=7)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
