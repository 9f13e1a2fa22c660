import logging

import numpy as np
import pytest

from commodvol.errors import ConfigurationError, DimensionError
from commodvol.grids import LocalVolSurface, VolFamily, build_mesh
from commodvol.tikhonov import (BoundaryData, RegWeights, default_weights, penalty_lipschitz, psi_futures,
                                psi_gradient, psi_value, select_alpha2)
from oracles import central_difference

ALL = dict(alpha1=0.3, alpha2=0.2, alpha3=0.1, alpha4=0.7, alpha5=0.6, alpha6=0.5)


@pytest.fixture
def fam_mesh():
    return build_mesh(0.2, 0.05, 1.0, ds=0.1, L=2)


def family(mesh, values):
    return VolFamily(tuple(LocalVolSurface(mesh, v) for v in values))


def futures():
    return [np.array([1.0, 1.05]), np.array([0.98, 1.02]), np.array([1.01, 0.99])]


class TestPsiValue:
    def test_zero_at_prior(self, fam_mesh):
        """The difference terms act on a itself, so the prior must be flat (as a0 = 0.08 is)."""
        a0 = np.full((3,) + fam_mesh.shape, 0.08)
        w = RegWeights(**ALL, a0=0.08, F_hat=futures())
        assert psi_value(family(fam_mesh, a0), futures(), w) == 0.0

    def test_prior_with_structure_still_pays_for_roughness(self, fam_mesh, rng):
        a0 = rng.uniform(0.05, 0.3, (3,) + fam_mesh.shape)
        w = RegWeights(alpha1=1.0, alpha2=1.0, a0=a0)
        assert psi_value(family(fam_mesh, a0), None, w) == pytest.approx(
            sum(np.sum((np.diff(v, axis=1) / fam_mesh.dy) ** 2) for v in a0))

    def test_constant_shift_only_hits_alpha1(self, fam_mesh):
        c = 0.03
        w = RegWeights(**ALL, a0=0.08, F_hat=futures())
        fam = family(fam_mesh, np.full((3,) + fam_mesh.shape, 0.08 + c))
        nodes = fam_mesh.shape[0] * fam_mesh.shape[1]
        assert psi_value(fam, futures(), w) == pytest.approx(0.3 * 3 * nodes * c**2, rel=1e-12)

    def test_index_coupling_term(self):
        m = build_mesh(0.2, 0.05, 1.0, ds=0.1, L=1)
        c = 0.02
        w = RegWeights(alpha6=0.5, a0=0.08)
        fam = family(m, [np.full(m.shape, 0.08), np.full(m.shape, 0.08 + c)])
        nodes = m.shape[0] * m.shape[1]
        assert psi_value(fam, None, w) == pytest.approx(0.5 / 0.1**2 * nodes * c**2, rel=1e-12)

    def test_forward_difference_terms(self, fam_mesh, rng):
        vals = rng.uniform(0.05, 0.3, (3,) + fam_mesh.shape)
        w = RegWeights(alpha2=1.0, a0=0.08)
        expected = sum(np.sum((np.diff(v, axis=1) / fam_mesh.dy) ** 2) for v in vals)
        assert psi_value(family(fam_mesh, vals), None, w) == pytest.approx(expected, rel=1e-12)
        w = RegWeights(alpha3=1.0, a0=0.08, scaled_differences=False)
        expected = sum(np.sum(np.diff(v, axis=0) ** 2) for v in vals)
        assert psi_value(family(fam_mesh, vals), None, w) == pytest.approx(expected, rel=1e-12)

    def test_futures_terms(self, fam_mesh):
        F_hat = futures()
        F = [f * 1.01 for f in F_hat]
        w = RegWeights(alpha5=2.0, a0=0.08, F_hat=F_hat)
        expected = 2.0 * sum(np.sum((f - g) ** 2) for f, g in zip(F, F_hat))
        assert psi_value(family(fam_mesh, np.full((3,) + fam_mesh.shape, 0.08)), F, w) == pytest.approx(expected)
        rel = RegWeights(alpha5=2.0, a0=0.08, F_hat=F_hat, futures_norm="relative")
        assert psi_futures(F, rel) == pytest.approx(expected / sum(g @ g for g in F_hat))

    def test_boundary_data_moves_with_futures(self):
        b = BoundaryData.from_prior([np.array([1.0])])
        np.testing.assert_allclose(b.q(np.array([1.0]), 0), [1 - np.exp(-5.0), 0.0])
        assert b.q(np.array([1.1]), 0)[0] == pytest.approx(1 - np.exp(-5.0) / 1.1)

    def test_scaling(self, fam_mesh, rng):
        vals = rng.uniform(0.05, 0.3, (3,) + fam_mesh.shape)
        F = [f * 1.02 for f in futures()]
        w = RegWeights(**ALL, a0=0.1, F_hat=futures())
        fam = family(fam_mesh, vals)
        assert psi_value(fam, F, w.scaled(3.0)) == pytest.approx(3.0 * psi_value(fam, F, w), rel=1e-12)

    def test_mesh_mismatch(self, fam_mesh):
        w = RegWeights(alpha1=1.0, a0=np.zeros((2, 2)))
        with pytest.raises(DimensionError):
            psi_value(family(fam_mesh, np.full((3,) + fam_mesh.shape, 0.08)), None, w)

    def test_futures_length_mismatch(self, fam_mesh):
        w = RegWeights(alpha5=1.0, F_hat=futures())
        with pytest.raises(DimensionError):
            psi_value(family(fam_mesh, np.full((3,) + fam_mesh.shape, 0.08)), futures()[:2], w)

    def test_negative_weight(self):
        with pytest.raises(ConfigurationError):
            RegWeights(alpha2=-1.0)


class TestPsiGradient:
    def test_zero_at_prior(self, fam_mesh):
        a0 = np.full((3,) + fam_mesh.shape, 0.08)
        w = RegWeights(**ALL, a0=0.08, F_hat=futures())
        gs, gf = psi_gradient(family(fam_mesh, a0), futures(), w)
        assert np.all(gs == 0)
        for g in gf:
            np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_directional_derivative(self, fam_mesh, rng):
        vals = rng.uniform(0.05, 0.3, (3,) + fam_mesh.shape)
        w = RegWeights(**ALL, a0=0.12, F_hat=futures())
        F = [f * 1.03 for f in futures()]
        gs, _ = psi_gradient(family(fam_mesh, vals), F, w)
        d = rng.normal(size=vals.shape)
        fd = central_difference(lambda x: psi_value(family(fam_mesh, x), F, w), vals, d, 1e-5)
        assert np.sum(gs * d) == pytest.approx(fd, rel=1e-6)

    def test_futures_gradient(self, fam_mesh):
        w = RegWeights(**ALL, a0=0.08, F_hat=futures())
        F = [f * np.array([1.02, 0.97]) for f in futures()]
        fam = family(fam_mesh, np.full((3,) + fam_mesh.shape, 0.08))
        _, gf = psi_gradient(fam, F, w)
        for l in range(3):
            for m in range(2):
                e = [np.zeros(2) for _ in range(3)]
                e[l][m] = 1.0
                fd = (psi_futures([f + 1e-6 * x for f, x in zip(F, e)], w)
                      - psi_futures([f - 1e-6 * x for f, x in zip(F, e)], w)) / 2e-6
                assert gf[l][m] == pytest.approx(fd, rel=1e-5)

    def test_linear_in_y_has_interior_zero_gradient(self):
        m = build_mesh(0.2, 0.05, 0.5)
        tt, yy = np.meshgrid(m.taus, m.ys, indexing="ij")
        fam = family(m, [0.2 + 0.01 * yy])
        gs, _ = psi_gradient(fam, None, RegWeights(alpha2=1.0, a0=0.0))
        np.testing.assert_allclose(gs[0][:, 1:-1], 0.0, atol=1e-12)
        assert np.all(np.abs(gs[0][:, [0, -1]]) > 0)


class TestWeights:
    def test_default_ratios(self):
        w = default_weights(1e-3, ds=0.025, dy=0.05, adjust_futures=True)
        assert w.alpha1 == pytest.approx(1e-5)
        assert w.alpha3 == pytest.approx(1e-4)
        assert w.alpha6 == pytest.approx(0.01 * 0.25 * 1e-3)
        assert w.alpha4 == w.alpha5 == 1.0

    def test_lipschitz_bounds_hessian(self, fam_mesh, rng):
        w = RegWeights(alpha1=0.3, alpha2=0.2, alpha3=0.1, alpha6=0.5, a0=0.0)
        fam = family(fam_mesh, rng.uniform(0.05, 0.3, (3,) + fam_mesh.shape))
        x = fam.stack()
        # psi is quadratic with zero prior, so psi(x) = x^T H x / 2 and the Rayleigh quotient is bounded.
        assert 2 * psi_value(fam, None, w) / np.sum(x * x) <= penalty_lipschitz(fam_mesh, w, 3)


class _Run:
    def __init__(self, R):
        self.final_misfit = R


class TestSelectAlpha2:
    def test_first_qualifier(self):
        choice = select_alpha2(lambda a: _Run(a), [1e-2, 1e-3, 1e-4], tol=0.5)
        assert choice.alpha2 == 1e-2 and choice.qualified
        assert len(choice.tried) == 1

    def test_unattainable_tolerance(self, caplog):
        with caplog.at_level(logging.WARNING):
            choice = select_alpha2(lambda a: _Run(a), [1e-2, 1e-3, 1e-4], tol=0.0)
        assert choice.alpha2 == 1e-4 and not choice.qualified
        assert "no alpha2" in caplog.text

    def test_picks_largest_that_fits(self):
        choice = select_alpha2(lambda a: _Run(10 * a), [1e-2, 1e-3, 1e-4], tol=0.01)
        assert choice.alpha2 == 1e-3

    def test_ladder_must_descend(self):
        with pytest.raises(ConfigurationError):
            select_alpha2(lambda a: _Run(a), [1e-4, 1e-2])
