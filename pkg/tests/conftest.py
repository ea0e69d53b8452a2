import numpy as np
import pytest

from cogseg.cohort import generate_synthetic_cohort


@pytest.fixture(scope="session")
def tiny_cohort():
    """Small phantom cohort shared by read-only tests."""
    return generate_synthetic_cohort(
        n_cases=8,
        volume_shape=(32, 64, 64),
        n_annotation_groups=2,
        hard_fraction=0.5,
        seed=11,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
