"""Reduced-notation algebra checked against brute-force index contractions."""

import numpy as np
import pytest

from ferropol import tensors as tn


def random_sym(rng):
    a = rng.normal(size=(3, 3))
    return 0.5 * (a + a.T)


class TestConversions:
    def test_stress_round_trip_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            sig = random_sym(rng)
            back = tn.reduced_to_stress(tn.stress_to_reduced(sig))
            np.testing.assert_array_equal(back, 0.5 * (sig + sig.T))

    def test_strain_round_trip_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            eps = random_sym(rng)
            back = tn.reduced_to_strain(tn.strain_to_reduced(eps))
            np.testing.assert_array_equal(back, eps)

    def test_energy_pairing(self):
        # reduced dot product equals the full double contraction
        rng = np.random.default_rng(3)
        for _ in range(50):
            sig = random_sym(rng)
            eps = random_sym(rng)
            reduced = tn.stress_to_reduced(sig) @ tn.strain_to_reduced(eps)
            full = np.einsum("ij,ij->", sig, eps)
            assert reduced == pytest.approx(full, rel=1e-14)


class TestIsotropicCompliance:
    def test_table_values(self):
        # Y = 1e4 MPa, nu = 0.3: S_1111 = 1e-4 / MPa, S_1122 = -3e-5 / MPa
        s = tn.isotropic_compliance(1.0e10, 0.3)
        assert s[0, 0] == pytest.approx(1.0e-10, rel=1e-14)
        assert s[0, 1] == pytest.approx(-3.0e-11, rel=1e-14)

    def test_uniaxial_response(self):
        y, nu = 7.3e9, 0.21
        s = tn.isotropic_compliance(y, nu)
        sig = np.array([5.0e6, 0, 0, 0, 0, 0])
        eps = tn.apply_rank4(s, sig)
        assert eps[0] == pytest.approx(5.0e6 / y, rel=1e-14)
        assert eps[1] == pytest.approx(-nu * 5.0e6 / y, rel=1e-14)
        assert eps[2] == pytest.approx(-nu * 5.0e6 / y, rel=1e-14)

    def test_zero_poisson_decouples_axes(self):
        s = tn.isotropic_compliance(2.0e9, 0.0)
        off = s[:3, :3] - np.diag(np.diag(s[:3, :3]))
        np.testing.assert_array_equal(off, np.zeros((3, 3)))

    def test_inverse_is_identity(self):
        # compliance composed with its inverse maps all six basis tensors back
        s = tn.isotropic_compliance(1.0e10, 0.3)
        c = tn.isotropic_stiffness(1.0e10, 0.3)
        np.testing.assert_allclose(c @ s, np.eye(6), atol=1e-12)

    @pytest.mark.parametrize("y,nu", [(-1.0, 0.3), (0.0, 0.3), (1e9, 0.5), (1e9, -1.0)])
    def test_parameter_range_errors(self, y, nu):
        with pytest.raises(ValueError):
            tn.isotropic_compliance(y, nu)


class TestPiezoContractions:
    def test_zero_map(self):
        d = np.zeros((3, 6))
        np.testing.assert_array_equal(tn.apply_piezo(d, np.ones(6)), np.zeros(3))
        np.testing.assert_array_equal(tn.apply_piezo_t(d, np.ones(3)), np.zeros(6))

    def test_reduced_equals_full_contraction(self):
        # random coupling arrays against the brute-force 3x3x3 summation
        rng = np.random.default_rng(4)
        for _ in range(1000):
            full = rng.normal(size=(3, 3, 3))
            full = 0.5 * (full + np.swapaxes(full, 1, 2))  # symmetric in (j, i)
            d = tn.piezo_from_full(full)
            sig = random_sym(rng)
            ef = rng.normal(size=3)
            vec = tn.apply_piezo(d, tn.stress_to_reduced(sig))
            vec_full = np.einsum("kji,ji->k", full, sig)
            np.testing.assert_allclose(vec, vec_full, rtol=1e-12, atol=1e-14)
            eps = tn.reduced_to_strain(tn.apply_piezo_t(d, ef))
            eps_full = np.einsum("kji,k->ji", full, ef)
            np.testing.assert_allclose(eps, eps_full, rtol=1e-12, atol=1e-14)

    def test_piezo_round_trip(self):
        rng = np.random.default_rng(5)
        d = rng.normal(size=(3, 6))
        np.testing.assert_allclose(tn.piezo_from_full(tn.piezo_to_full(d)), d, atol=1e-15)


class TestRank4Full:
    def test_compliance_full_contraction(self):
        s66 = tn.isotropic_compliance(3.0e9, 0.27)
        full = tn.compliance_to_full(s66)
        rng = np.random.default_rng(6)
        for _ in range(100):
            sig = random_sym(rng)
            eps_red = tn.reduced_to_strain(tn.apply_rank4(s66, tn.stress_to_reduced(sig)))
            eps_full = np.einsum("ijkl,kl->ij", full, sig)
            np.testing.assert_allclose(eps_red, eps_full, rtol=1e-12, atol=1e-20)

    def test_stiffness_full_contraction(self):
        c66 = tn.isotropic_stiffness(3.0e9, 0.27)
        full = tn.stiffness_to_full(c66)
        rng = np.random.default_rng(7)
        for _ in range(100):
            eps = random_sym(rng)
            sig_red = tn.reduced_to_stress(tn.apply_rank4(c66, tn.strain_to_reduced(eps)))
            sig_full = np.einsum("ijkl,kl->ij", full, eps)
            np.testing.assert_allclose(sig_red, sig_full, rtol=1e-12, atol=1e-8)

    def test_major_symmetry(self):
        s66 = tn.isotropic_compliance(3.0e9, 0.27)
        np.testing.assert_array_equal(s66, s66.T)
