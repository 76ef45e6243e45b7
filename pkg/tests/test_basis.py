import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcmfrac.basis import (
    BasisDomainError,
    BasisSpec,
    bspline_1d,
    dof_map,
    eval_basis,
    legendre_1d,
)
from fcmfrac.grid import VoxelImage, build_grid


@given(p=st.integers(1, 4), n_cells=st.integers(1, 8), data=st.data())
def test_bspline_partition_of_unity(p, n_cells, data):
    cell = data.draw(st.integers(0, n_cells - 1))
    xi = data.draw(st.floats(0.0, 1.0))
    v, d = bspline_1d(cell, xi, p, n_cells)
    assert v.sum() == pytest.approx(1.0, abs=1e-13)
    assert d.sum() == pytest.approx(0.0, abs=1e-11)
    assert np.all(v >= -1e-14)


@given(p=st.integers(1, 4), n_cells=st.integers(1, 6), data=st.data())
def test_bspline_derivative_matches_finite_difference(p, n_cells, data):
    cell = data.draw(st.integers(0, n_cells - 1))
    xi = data.draw(st.floats(0.05, 0.95))
    hstep = 1e-6
    _, d = bspline_1d(cell, xi, p, n_cells)
    vp, _ = bspline_1d(cell, xi + hstep, p, n_cells)
    vm, _ = bspline_1d(cell, xi - hstep, p, n_cells)
    np.testing.assert_allclose(d, (vp - vm) / (2 * hstep), atol=1e-7)


def test_bspline_reproduces_linear_function():
    # Greville abscissae: sum_i g_i N_i(u) = u
    p, n = 3, 5
    from fcmfrac.basis import clamped_knots

    t = clamped_knots(n, p)
    greville = np.array([t[i + 1:i + p + 1].mean() for i in range(n + p)])
    for cell in range(n):
        for xi in np.linspace(0, 1, 7):
            v, _ = bspline_1d(cell, xi, p, n)
            assert v @ greville[cell:cell + p + 1] == pytest.approx(cell + xi, abs=1e-12)


def test_bspline_is_c1_across_cells_for_p2():
    p, n = 2, 4
    # function 2 is supported on cells 0..2; compare one-sided values at the 1|2 interface
    vl, dl = bspline_1d(1, 1.0, p, n)
    vr, dr = bspline_1d(2, 0.0, p, n)
    # cell c covers global functions c..c+p
    gl = dict(zip(range(1, 1 + p + 1), zip(vl, dl)))
    gr = dict(zip(range(2, 2 + p + 1), zip(vr, dr)))
    for k in set(gl) & set(gr):
        assert gl[k][0] == pytest.approx(gr[k][0], abs=1e-13)
        assert gl[k][1] == pytest.approx(gr[k][1], abs=1e-12)


def test_legendre_vertex_modes_and_bubbles():
    for p in (1, 2, 3, 4):
        v0, _ = legendre_1d(0.0, p)
        v1, _ = legendre_1d(1.0, p)
        np.testing.assert_allclose(v0, np.eye(p + 1)[0], atol=1e-14)
        np.testing.assert_allclose(v1, np.eye(p + 1)[p], atol=1e-14)
        xi = np.linspace(0, 1, 9)
        v, _ = legendre_1d(xi, p)
        # the two vertex modes (first, last) form a partition of unity; bubbles are extra
        np.testing.assert_allclose(v[:, 0] + v[:, p], 1.0, atol=1e-14)


def test_tensor_product_gradient_matches_finite_difference(rng):
    spec = BasisSpec("bspline", 2)
    xi = rng.uniform(0.1, 0.9, (5, 3))
    cell = (1, 0, 2)
    shape = (3, 2, 4)
    v, g = eval_basis(spec, xi, cell, shape)
    assert v.shape == (5, 27) and g.shape == (5, 27, 3)
    np.testing.assert_allclose(v.sum(axis=1), 1.0, atol=1e-13)
    hstep = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = hstep
        vp, _ = eval_basis(spec, xi + e, cell, shape)
        vm, _ = eval_basis(spec, xi - e, cell, shape)
        np.testing.assert_allclose(g[:, :, k], (vp - vm) / (2 * hstep), atol=1e-7)


def test_eval_basis_rejects_points_outside_cell():
    with pytest.raises(BasisDomainError):
        eval_basis(BasisSpec("bspline", 2), [0.5, 1.2, 0.5])


def test_basis_spec_validation():
    with pytest.raises(ValueError):
        BasisSpec("nurbs", 2)
    with pytest.raises(ValueError):
        BasisSpec("bspline", 0)
    assert BasisSpec("bspline", 3).n_functions_1d(10) == 13
    assert BasisSpec("legendre", 3).n_functions_1d(10) == 31


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(1, 4), ny=st.integers(1, 4), nz=st.integers(1, 4), p=st.integers(1, 3),
       family=st.sampled_from(["bspline", "legendre"]))
def test_dof_count_on_full_box(nx, ny, nz, p, family):
    img = VoxelImage(np.ones((nx, ny, nz)))
    grid = build_grid(img, 1.0, p)
    spec = BasisSpec(family, p)
    lay = dof_map(grid, spec, components=3)
    expect = np.prod([spec.n_functions_1d(n) for n in (nx, ny, nz)])
    assert lay.n_scalar == expect
    assert lay.n_dofs == 3 * expect
    assert lay.cell_dofs.shape == (nx * ny * nz, (p + 1) ** 3)
    # every function is used and numbering is deterministic
    assert len(np.unique(lay.cell_dofs)) == lay.n_scalar
    np.testing.assert_array_equal(lay.cell_dofs, dof_map(grid, spec).cell_dofs)


def test_dof_map_only_numbers_active_cells():
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[:2, :2, :2] = True
    img = VoxelImage(np.ones((4, 4, 4)), mask=mask)
    grid = build_grid(img, 1.0, 2)
    assert grid.n_cells == 8
    lay = dof_map(grid, BasisSpec("bspline", 2))
    assert lay.n_scalar == 4**3  # (2 cells + p)^3
