import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from verigin.grid import (
    Grid, check_field, check_phase, divergence, face_jump_counts, gradient, integrate, jump_faces,
)


def test_grid_geometry():
    g = Grid(((0.0, 2.0), (1.0, 2.0)), (4, 5))
    assert g.dim == 2 and g.shape == (4, 5) and g.size == 20
    assert g.spacing == (0.5, 0.2)
    assert np.allclose(g.centers[0], [0.25, 0.75, 1.25, 1.75])
    assert g.cell_volume == pytest.approx(0.1)
    assert g.face_area(0) == pytest.approx(0.2)


@pytest.mark.parametrize("extents,cells", [(((0, 1),), (0,)), (((1, 1),), (4,)),
                                           (((0, 1),) * 4, (2,) * 4)])
def test_grid_rejects_bad_geometry(extents, cells):
    with pytest.raises(ValueError):
        Grid(extents, cells)


def test_field_validation(grid10):
    with pytest.raises(ValueError):
        check_field(grid10, np.ones(9))
    with pytest.raises(ValueError):
        check_field(grid10, np.full(10, np.nan))
    with pytest.raises(ValueError):
        check_phase(grid10, np.full(10, 0.5))


def test_integrate_examples(grid10):
    assert integrate(grid10, np.ones(10)) == pytest.approx(1.0, abs=1e-15)
    assert integrate(grid10, np.zeros(10)) == 0.0
    g = Grid.uniform(1, 100)
    assert integrate(g, g.centers[0]) == pytest.approx(0.5, abs=1e-15)


def test_gradient_examples():
    g = Grid.uniform(1, 64)
    x = g.centers[0]
    assert np.all(gradient(g, np.full(64, 3.0)) == 0)
    assert np.allclose(gradient(g, x)[0][1:-1], 1.0, atol=1e-12)
    assert np.max(np.abs(gradient(g, x ** 2)[0][1:-1] - 2 * x[1:-1])) <= 1e-12


def test_gradient_no_flux_zeroes_boundary():
    g = Grid.uniform(2, 8)
    X, Y = g.mesh
    v = gradient(g, X + Y, no_flux=True)
    assert np.all(v[0][[0, -1], :] == 0) and np.all(v[1][:, [0, -1]] == 0)


def test_divergence_examples():
    g1 = Grid.uniform(1, 32)
    assert np.all(divergence(g1, np.full((1, 32), 2.0)) == 0)
    assert np.allclose(divergence(g1, g1.centers[0][None])[1:-1], 1.0, atol=1e-12)
    g2 = Grid.uniform(2, 16)
    X, Y = g2.mesh
    assert np.max(np.abs(divergence(g2, np.stack([X, -Y]))[1:-1, 1:-1])) <= 1e-12


def test_jump_faces_examples():
    g = Grid.uniform(1, 10)
    assert jump_faces(g, np.zeros(10, np.int8)) == []
    chi = np.zeros(10, np.int8)
    chi[4:8] = 1
    faces = jump_faces(g, chi)
    assert len(faces) == 2
    assert {f.inside for f in faces} == {(4,), (7,)}
    assert {f.orientation for f in faces} == {1, -1}
    g2 = Grid.uniform(2, 16)
    chi2 = np.zeros((16, 16), np.int8)
    chi2[6:10, 6:10] = 1
    faces2 = jump_faces(g2, chi2)
    assert len(faces2) == 16
    assert sum(g2.face_area(f.axis) for f in faces2) == pytest.approx(1.0)


def test_face_jump_counts_batched():
    g = Grid.uniform(1, 6)
    chis = np.array([[0, 1, 1, 0, 0, 1], [0] * 6])
    assert list(face_jump_counts(g, chis)[0]) == [3, 0]


vals = st.floats(-1e3, 1e3, allow_nan=False)


@given(arrays(float, 12, elements=vals), arrays(float, 12, elements=vals), vals, vals)
def test_integrate_linear(f, h, a, b):
    g = Grid.uniform(1, 12)
    lhs = integrate(g, a * f + b * h)
    rhs = a * integrate(g, f) + b * integrate(g, h)
    scale = integrate(g, np.abs(a * f) + np.abs(b * h)) + 1e-300
    assert abs(lhs - rhs) <= 1e-13 * scale


@given(arrays(np.int8, (5, 7), elements=st.integers(0, 1)))
def test_jump_count_complement_invariant(chi):
    g = Grid(((0, 1), (0, 1)), (5, 7))
    assert len(jump_faces(g, chi)) == len(jump_faces(g, 1 - chi))


@settings(max_examples=25)
@given(st.integers(16, 128), st.floats(0.5, 3.0), st.floats(0.0, 6.3))
def test_discrete_integration_by_parts(n, k, phase):
    # v vanishes at the boundary, so the boundary term drops out up to O(dx)
    g = Grid.uniform(1, n)
    x = g.centers[0]
    f = np.cos(k * x + phase)
    v = (np.sin(np.pi * x) ** 2)[None]
    err = abs(integrate(g, f * divergence(g, v)) + integrate(g, gradient(g, f)[0] * v[0]))
    norm = np.sqrt(integrate(g, f ** 2) * integrate(g, v[0] ** 2))
    assert err <= 10.0 * g.spacing[0] * norm


def test_single_cell_axis():
    g = Grid.uniform(1, 1)
    assert g.size == 1 and g.cell_volume == 1.0
    assert np.all(gradient(g, np.array([3.0])) == 0.0)
    assert jump_faces(g, np.array([1], np.int8)) == []
