"""Shared helpers: small voxel specimens and their discretisations."""

import os
import sys

import numpy as np
import pytest

from fcmfrac.assembly import Discretization
from fcmfrac.basis import BasisSpec
from fcmfrac.grid import VoxelImage, build_grid, build_quadrature
from fcmfrac.material import material_field

sys.path.insert(0, os.path.dirname(__file__))


def make_disc(dims, h, p=2, mask=None, depth=1, spacing=1.0, density=1.0, family="bspline", law=None):
    img = VoxelImage(np.full(dims, float(density)), (spacing,) * 3, mask=mask)
    grid = build_grid(img, h, p)
    quad = build_quadrature(grid, img, depth)
    return Discretization(img, grid, quad, BasisSpec(family, p), material_field(img, law))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_disc():
    """4x4x8 voxel box, h=2, quadratic B-splines."""
    return make_disc((4, 4, 8), 2.0, 2)


@pytest.fixture(scope="session")
def cut_disc():
    """Box whose mask cuts through cells: inside for x < 5 voxels (h=2)."""
    mask = np.zeros((8, 4, 8), dtype=bool)
    mask[:5] = True
    return make_disc((8, 4, 8), 2.0, 2, mask=mask, depth=2)
