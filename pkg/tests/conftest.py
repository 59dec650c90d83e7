import numpy as np
import pytest
import torch

from vascmae.geometry import signed_distance_map
from vascmae.model import ModelConfig
from vascmae.sampling import CropSampler
from vascmae.synthvasc import PhantomParams, generate_case

# Small-but-real phantom settings shared by the slower fixtures. The 64-cube
# volume admits exactly one crop, so vessels are dense enough that it clears
# the 10% artery-overlap floor.
TINY_PARAMS = PhantomParams(
    volume_dims=(64, 64, 64),
    n_vessels=(6, 8),
    vessel_radius_mm=(1.3, 2.0),
    n_lesions=(1, 2),
    lesion_diameter_mm=(3.0, 7.0),
    seed=123,
)

# Smallest config the architecture supports cleanly: dim 12 splits into
# (4, 4, 4) positional groups and 4 heads of width 3.
TINY_MODEL = ModelConfig(depth=1, dim=12, heads_spatial=4, heads_axial=4)


@pytest.fixture(scope="session")
def tiny_case():
    return generate_case(TINY_PARAMS, 0)


@pytest.fixture(scope="session")
def tiny_dmap(tiny_case):
    return signed_distance_map(tiny_case.artery_mask, tiny_case.spacing_mm)


@pytest.fixture(scope="session")
def tiny_sampler(tiny_case, tiny_dmap):
    return CropSampler(tiny_case, tiny_dmap)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
