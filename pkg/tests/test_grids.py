import numpy as np
import pytest

from commodvol.errors import ConfigurationError, DataError, DimensionError
from commodvol.grids import (DiffOps, LocalVolSurface, VolFamily, Window, apply_diff, build_mesh, eval_surface,
                             read_surface_csv, write_surface_csv)


class TestBuildMesh:
    def test_fine_mesh(self):
        m = build_mesh(0.5, 0.005, 0.025, 0.1, 0)
        assert (m.I, m.J) == (100, 200)
        assert m.beta == pytest.approx(0.2)
        assert m.eta == pytest.approx(8.0)

    def test_calibration_mesh(self):
        m = build_mesh(0.5, 0.01, 0.05, 0, 0)
        assert (m.I, m.J) == (50, 100)
        assert m.beta == pytest.approx(0.2)
        assert m.eta == pytest.approx(4.0)

    def test_non_integral_truncation_rejected(self):
        with pytest.raises(ConfigurationError, match="5/dy"):
            build_mesh(0.5, 0.005, 0.024, 0.1, 0)

    @pytest.mark.parametrize("args", [(0.0, 0.01, 0.05), (0.5, -0.01, 0.05), (0.5, 0.01, 0.0)])
    def test_non_positive_steps_rejected(self, args):
        with pytest.raises(ConfigurationError):
            build_mesh(*args)

    def test_index_family_needs_step(self):
        with pytest.raises(ConfigurationError):
            build_mesh(0.5, 0.01, 0.05, ds=0.0, L=3)

    def test_node_coordinates(self):
        m = build_mesh(0.5, 0.01, 0.05, ds=0.1, L=4)
        assert m.ys[0] == pytest.approx(-5.0) and m.ys[-1] == pytest.approx(5.0)
        assert m.taus[-1] == pytest.approx(0.5)
        np.testing.assert_allclose(m.index_values(0.8), [0.8, 0.9, 1.0, 1.1, 1.2])


class TestEvalSurface:
    def test_constant_surface(self, mesh):
        a = LocalVolSurface.constant(mesh, 0.08)
        for tau, y in [(0.0, 0.0), (0.237, -3.3), (0.9, 7.0)]:
            assert eval_surface(a, tau, y) == pytest.approx(0.08, abs=1e-15)

    def test_node_query_returns_stored_value(self, mesh, rng):
        a = LocalVolSurface(mesh, rng.uniform(0.01, 0.5, mesh.shape))
        i, j = 17, 123
        assert eval_surface(a, mesh.taus[i], mesh.ys[j]) == a.values[i, j]

    def test_window_double_clamp(self, mesh, rng):
        a = LocalVolSurface(mesh, rng.uniform(0.01, 0.5, mesh.shape))
        w = Window(0.1, 0.5, -0.5, 0.5)
        assert eval_surface(a, 0.05, 0.9, w) == eval_surface(a, 0.1, 0.5, w)
        assert eval_surface(a, 0.05, 0.9, w) == pytest.approx(eval_surface(a, 0.1, 0.5))

    def test_clamp_beyond_horizon(self, mesh, rng):
        a = LocalVolSurface(mesh, rng.uniform(0.01, 0.5, mesh.shape))
        assert eval_surface(a, 2.0, 0.3) == eval_surface(a, 0.5, 0.3)

    def test_inside_window_equals_plain_interpolation(self, mesh, rng):
        a = LocalVolSurface(mesh, rng.uniform(0.01, 0.5, mesh.shape))
        w = Window(0.1, 0.5, -0.5, 0.5)
        assert eval_surface(a, 0.234, -0.123, w) == eval_surface(a, 0.234, -0.123)

    def test_bilinear_reproduced(self, mesh):
        tt, yy = np.meshgrid(mesh.taus, mesh.ys, indexing="ij")
        a = LocalVolSurface(mesh, 0.1 + 0.2 * tt + 0.01 * yy + 0.03 * tt * yy)
        tau, y = 0.123, 0.0371
        assert eval_surface(a, tau, y) == pytest.approx(0.1 + 0.2 * tau + 0.01 * y + 0.03 * tau * y, rel=1e-13)

    def test_negative_tau_rejected(self, flat_surface):
        with pytest.raises(DataError):
            eval_surface(flat_surface, -0.1, 0.0)

    def test_vectorized(self, flat_surface):
        out = eval_surface(flat_surface, np.array([0.1, 0.2]), np.array([0.0, 1.0]))
        assert out.shape == (2,)


class TestSurfaceContainers:
    def test_box_enforced(self, mesh):
        with pytest.raises(ConfigurationError):
            LocalVolSurface.constant(mesh, 3.0)

    def test_shape_checked(self, mesh):
        with pytest.raises(DimensionError):
            LocalVolSurface(mesh, np.zeros((3, 3)) + 0.1)

    def test_values_read_only(self, flat_surface):
        with pytest.raises(ValueError):
            flat_surface.values[0, 0] = 1.0

    def test_family_needs_common_mesh(self, mesh):
        other = build_mesh(0.5, 0.01, 0.1)
        with pytest.raises(DimensionError):
            VolFamily((LocalVolSurface.constant(mesh, 0.1), LocalVolSurface.constant(other, 0.1)))

    def test_csv_round_trip(self, tmp_path, mesh, rng):
        a = LocalVolSurface(mesh, rng.uniform(0.01, 0.5, mesh.shape))
        write_surface_csv(tmp_path / "s.csv", a)
        b = read_surface_csv(tmp_path / "s.csv")
        assert b.mesh.shape == mesh.shape
        np.testing.assert_array_equal(a.values, b.values)


class TestDiffOps:
    def test_second_difference_annihilates_constants(self, mesh):
        ops = DiffOps.for_mesh(mesh)
        np.testing.assert_allclose(apply_diff(ops, "d_yy_centered", np.full(mesh.ys.size, 3.7)), 0.0, atol=1e-9)

    def test_forward_difference_of_linear_row(self, mesh):
        ops = DiffOps.for_mesh(mesh)
        np.testing.assert_allclose(apply_diff(ops, "d_y_forward", mesh.ys)[:-1], 1.0, rtol=1e-12)

    def test_centered_difference_of_quadratic(self, mesh):
        ops = DiffOps.for_mesh(mesh)
        d = apply_diff(ops, "d_y_centered", mesh.ys**2)
        j = int(np.argmin(np.abs(mesh.ys - 0.1)))
        assert d[j] == pytest.approx(0.2, abs=1e-12)
        # One-sided boundary rows are second order too, hence exact for quadratics.
        np.testing.assert_allclose(d, 2 * mesh.ys, atol=1e-9)

    def test_tau_forward(self, mesh):
        ops = DiffOps.for_mesh(mesh)
        np.testing.assert_allclose(apply_diff(ops, "d_tau_forward", 3 * mesh.taus), 3.0, rtol=1e-12)

    def test_length_mismatch(self, mesh):
        with pytest.raises(DimensionError):
            apply_diff(DiffOps.for_mesh(mesh), "d_y_centered", np.zeros(5))

    def test_unknown_operator(self, mesh):
        with pytest.raises(ConfigurationError):
            apply_diff(DiffOps.for_mesh(mesh), "d_yyy", np.zeros(mesh.ys.size))

    def test_second_order_convergence(self):
        errs = []
        for dy in (0.1, 0.05):
            m = build_mesh(0.5, 0.01, dy)
            ops = DiffOps.for_mesh(m)
            inner = np.abs(m.ys) <= 4
            errs.append(np.max(np.abs(apply_diff(ops, "d_y_centered", np.sin(m.ys)) - np.cos(m.ys))[inner]))
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
