"""Increment solver: KKT residuals, Newton, active-set loop.

The 1D electric case has closed-form roots used as oracles throughout:
with zero stress the driving field is E - c*P, so a flowing point sits at
P = (E -+ E_C)/c and a saturated point carries the back-field
lam_S = E - c*P_sat - E_C.
"""

import numpy as np
import pytest

from ferropol import material as mat
from ferropol import vi_solver as vi


@pytest.fixture(scope="module")
def p():
    return mat.preset("table1")


@pytest.fixture(scope="module")
def s():
    return vi.SolverSettings()


def ctrl_e3(e3, sig33=0.0):
    sig = np.zeros(6)
    sig[2] = sig33
    return vi.PointControls(stress=sig, efield=np.array([0.0, 0.0, e3]))


class TestSettings:
    def test_default_thresholds(self, p, s):
        assert s.resolved_delta_P(p) == pytest.approx(p.E_C * 1e-3)
        assert s.resolved_delta_S(p) == pytest.approx(p.P_sat * 1e-3)

    def test_controls_validation(self):
        with pytest.raises(ValueError):
            vi.PointControls(stress=np.full(6, np.nan), efield=np.zeros(3))
        with pytest.raises(ValueError):
            vi.PointControls(stress=np.zeros(5), efield=np.zeros(3))


class TestKktResidual:
    def test_elastic_zero_at_prev(self, p, s):
        prev = mat.InternalState.virgin()
        trial = prev.copy()
        r = vi.kkt_residual(prev, trial, ctrl_e3(0.5 * p.E_C), p, s)
        np.testing.assert_array_equal(r, np.zeros(3))

    def test_switching_root_1d(self, p, s):
        # E = 1.2 E_C from virgin: P = (E - E_C)/c = 0.1, lam_P = 0.1
        prev = mat.InternalState.virgin()
        root = mat.InternalState(P=np.array([0.0, 0.0, 0.1]), lam_P=0.1,
                                 active_P=True)
        r = vi.kkt_residual(prev, root, ctrl_e3(1.2 * p.E_C), p, s)
        np.testing.assert_allclose(r, np.zeros(4), atol=1e-14)

    def test_saturated_root_1d(self, p, s):
        # E = 2 E_C: P = P_sat, lam_S = E - c P_sat - E_C = 0.4 MV/m
        prev = mat.InternalState.virgin()
        root = mat.InternalState(P=np.array([0.0, 0.0, p.P_sat]), lam_P=p.P_sat,
                                 lam_S=0.4e6, active_P=True, active_S=True)
        r = vi.kkt_residual(prev, root, ctrl_e3(2.0 * p.E_C), p, s)
        np.testing.assert_allclose(r, np.zeros(5), atol=1e-14)

    def test_degenerate_direction_error(self, p, s):
        prev = mat.InternalState(P=np.array([0.0, 0.0, 0.1]))
        trial = prev.copy()
        trial.active_P = True
        # E = c*P makes the driving field vanish exactly
        with pytest.raises(vi.DegenerateDirectionError):
            vi.kkt_residual(prev, trial, ctrl_e3(p.c * 0.1), p, s)


class TestKktJacobian:
    @staticmethod
    def fd_jacobian(prev, trial, ctrl, p, s, h=1e-6):
        x0 = vi._pack(trial, trial.active_P, trial.active_S, p)
        n = x0.size
        jac = np.zeros((n, n))
        for c in range(n):
            dx = np.zeros(n)
            dx[c] = h
            rp = vi._residual_x(x0 + dx, prev, ctrl, trial.active_P, trial.active_S, p, s)
            rm = vi._residual_x(x0 - dx, prev, ctrl, trial.active_P, trial.active_S, p, s)
            jac[:, c] = (rp - rm) / (2 * h)
        return jac

    def test_inactive_identity(self, p, s):
        prev = mat.InternalState(P=np.array([0.01, -0.02, 0.1]))
        trial = prev.copy()
        jac = vi.kkt_jacobian(prev, trial, ctrl_e3(0.1 * p.E_C), p, s)
        np.testing.assert_array_equal(jac, np.eye(3))

    def test_fd_match_random_active_states(self, p, s):
        rng = np.random.default_rng(30)
        checked = 0
        while checked < 40:
            P = rng.normal(size=3)
            P *= rng.uniform(0.2, 1.0) * p.P_sat / np.linalg.norm(P)
            sig33 = rng.uniform(-6e7, 6e7)
            e3 = rng.uniform(-2.5e6, 2.5e6)
            ctrl = vi.PointControls(stress=np.array([0, 0, sig33, 0, 0, 0.0]),
                                    efield=np.array([0.0, 0.0, e3]))
            active_S = bool(rng.integers(0, 2))
            trial = mat.InternalState(P=P, lam_P=rng.uniform(0, 0.2),
                                      lam_S=rng.uniform(0, 5e5) if active_S else 0.0,
                                      active_P=True, active_S=active_S)
            prev = mat.InternalState(P=P - rng.normal(size=3) * 0.02)
            ehat = mat.driving_force(ctrl.stress, ctrl.efield, P,
                                     trial.lam_S if active_S else 0.0, p)
            if np.linalg.norm(ehat) < 0.3 * p.E_C:
                continue  # keep away from the direction kink for FD
            jac = vi.kkt_jacobian(prev, trial, ctrl, p, s)
            fd = self.fd_jacobian(prev, trial, ctrl, p, s)
            scale = max(np.abs(fd).max(), 1.0)
            assert np.abs(jac - fd).max() / scale < 1e-5, (
                f"jacobian FD mismatch {np.abs(jac - fd).max() / scale:.2e}")
            checked += 1

    def test_electric_case_block_structure(self, p, s):
        # sigma = 0: the P-P block is I + lam_P/|Ehat| (I - g g^T) c
        prev = mat.InternalState.virgin()
        P = np.array([0.0, 0.0, 0.12])
        lam_p = 0.12
        trial = mat.InternalState(P=P, lam_P=lam_p, active_P=True)
        ctrl = ctrl_e3(1.3e6)
        ehat = ctrl.efield - p.c * P
        norm = np.linalg.norm(ehat)
        g = ehat / norm
        expect = np.eye(3) + lam_p * p.c * (np.eye(3) - np.outer(g, g)) / norm
        jac = vi.kkt_jacobian(prev, trial, ctrl, p, s)
        np.testing.assert_allclose(jac[:3, :3], expect, rtol=1e-12)


class TestNewton:
    def test_elastic_converges_immediately(self, p, s):
        prev = mat.InternalState.virgin()
        trial, conv, iters = vi.newton_solve_fixed_active(
            prev, ctrl_e3(0.5 * p.E_C), False, False, p, s)
        assert conv and iters <= 1
        np.testing.assert_array_equal(trial.P, prev.P)

    def test_switching_step_reaches_oracle(self, p, s):
        prev = mat.InternalState.virgin()
        trial, conv, iters = vi.newton_solve_fixed_active(
            prev, ctrl_e3(1.2 * p.E_C), True, False, p, s)
        assert conv and iters <= 10
        assert trial.P[2] == pytest.approx(0.1, rel=1e-10)
        assert trial.lam_P == pytest.approx(0.1, rel=1e-10)

    def test_saturated_step_multiplier(self, p, s):
        # warm start from the switching-only solve, as in the outer loop
        prev = mat.InternalState.virgin()
        start, conv0, _ = vi.newton_solve_fixed_active(
            prev, ctrl_e3(2.0 * p.E_C), True, False, p, s)
        assert conv0
        trial, conv, _ = vi.newton_solve_fixed_active(
            prev, ctrl_e3(2.0 * p.E_C), True, True, p, s, start=start)
        assert conv
        assert trial.P[2] == pytest.approx(p.P_sat, rel=1e-10)
        assert trial.lam_S == pytest.approx(0.4e6, rel=1e-8)


class TestActiveSetRules:
    def test_virgin_below_coercive_unchanged(self, p, s):
        trial = mat.InternalState.virgin()
        a_p, a_s, changed = vi.update_active_sets(
            trial, ctrl_e3(p.E_C * (1 - 1e-3)), p, s)
        assert (a_p, a_s, changed) == (False, False, False)

    def test_violation_activates_switching(self, p, s):
        # f_P = 2 delta_P above zero activates the switching set
        trial = mat.InternalState.virgin()
        e3 = p.E_C + 2 * s.resolved_delta_P(p)
        a_p, a_s, changed = vi.update_active_sets(trial, ctrl_e3(e3), p, s)
        assert (a_p, a_s, changed) == (True, False, True)

    def test_small_multiplier_clears_switching(self, p, s):
        trial = mat.InternalState(P=np.array([0.0, 0.0, 0.1]),
                                  lam_P=0.5 * s.resolved_delta_S(p), active_P=True)
        a_p, a_s, changed = vi.update_active_sets(trial, ctrl_e3(1.2e6), p, s)
        assert (a_p, changed) == (False, True)

    def test_saturation_added_only_with_switching(self, p, s):
        over = mat.InternalState(P=np.array([0.0, 0.0, p.P_sat + 2 * s.resolved_delta_S(p)]),
                                 lam_P=0.1, active_P=True)
        a_p, a_s, _ = vi.update_active_sets(over, ctrl_e3(2.0e6), p, s)
        assert a_p and a_s

    def test_small_back_field_clears_saturation(self, p, s):
        trial = mat.InternalState(P=np.array([0.0, 0.0, p.P_sat]), lam_P=0.1,
                                  lam_S=0.5 * s.resolved_delta_P(p),
                                  active_P=True, active_S=True)
        a_p, a_s, changed = vi.update_active_sets(trial, ctrl_e3(1.7e6), p, s)
        assert a_p and not a_s and changed


class TestSolveIncrement:
    def test_one_step_full_poling(self, p, s):
        res = vi.solve_increment(mat.InternalState.virgin(), ctrl_e3(2.0 * p.E_C), p, s)
        assert res.converged
        assert res.active_loops <= 3
        np.testing.assert_allclose(res.state.P, [0.0, 0.0, p.P_sat], atol=1e-12)
        assert res.state.lam_S == pytest.approx(0.4e6, rel=1e-8)
        assert res.state.active_P and res.state.active_S

    def test_unloading_keeps_remanent_state(self, p, s):
        poled = vi.solve_increment(mat.InternalState.virgin(), ctrl_e3(2.0 * p.E_C), p, s).state
        res = vi.solve_increment(poled, ctrl_e3(0.0), p, s)
        assert res.converged
        np.testing.assert_allclose(res.state.P, poled.P, atol=1e-12)
        assert res.state.lam_P == 0.0
        assert res.state.lam_S == 0.0
        assert not res.state.active_P and not res.state.active_S
        assert abs(res.dissipation) <= 1e-12 * p.E_C * p.P_sat

    def test_full_reversal_in_one_step(self, p, s):
        poled = vi.solve_increment(mat.InternalState.virgin(), ctrl_e3(2.0 * p.E_C), p, s).state
        res = vi.solve_increment(poled, ctrl_e3(-2.0 * p.E_C), p, s)
        assert res.converged and res.active_loops <= 3
        np.testing.assert_allclose(res.state.P, [0.0, 0.0, -p.P_sat], atol=1e-10)
        assert res.state.lam_S == pytest.approx(0.4e6, rel=1e-8)
        assert res.dissipation == pytest.approx(2.0 * p.P_sat * p.E_C, rel=1e-8)

    def test_depolarization_onset_stress(self, p, s):
        # poled point at E = 0: flow starts once |sigma| 2 S_sat / P_sat closes
        # the gap E_C - c P_sat, i.e. at -30 MPa for the first preset
        poled = mat.InternalState(P=np.array([0.0, 0.0, p.P_sat]))
        onset = -(p.E_C - p.c * p.P_sat) * p.P_sat / (2.0 * p.S_sat)
        assert onset == pytest.approx(-3.0e7)
        below = vi.solve_increment(poled, ctrl_e3(0.0, sig33=0.995 * onset), p, s)
        assert below.state.P[2] == pytest.approx(p.P_sat, rel=1e-12)
        above = vi.solve_increment(poled, ctrl_e3(0.0, sig33=1.05 * onset), p, s)
        assert above.state.P[2] < p.P_sat * (1 - 1e-4)
        assert above.dissipation > 0.0

    def test_complementarity_and_dissipation_random_path(self, p, s):
        rng = np.random.default_rng(31)
        state = mat.InternalState.virgin()
        delta_p = s.resolved_delta_P(p)
        delta_s = s.resolved_delta_S(p)
        e3 = 0.0
        sig33 = 0.0
        for _ in range(60):
            e3 = np.clip(e3 + rng.normal(scale=0.6e6), -2.4e6, 2.4e6)
            sig33 = np.clip(sig33 + rng.normal(scale=2e7), -8e7, 2e7)
            res = vi.solve_increment(state, ctrl_e3(e3, sig33=sig33), p, s)
            assert res.converged
            state = res.state
            lam_s_eff = state.lam_S if state.active_S else 0.0
            ehat = mat.driving_force(np.array([0, 0, sig33, 0, 0, 0.0]),
                                     np.array([0.0, 0.0, e3]), state.P, lam_s_eff, p)
            f_p = mat.switching_fn(ehat, p)
            f_s = mat.saturation_fn(state.P, p)
            # primal feasibility within the set thresholds
            assert f_p <= delta_p + 1e-9 * p.E_C
            assert f_s <= delta_s + 1e-12
            # dual feasibility and complementarity
            assert state.lam_P >= -delta_s
            assert state.lam_S >= -delta_p
            assert min(state.lam_P / p.P_sat, -f_p / p.E_C) <= 1e-3 + 1e-9
            assert min(state.lam_S / p.E_C, -f_s / p.P_sat) <= 1e-3 + 1e-9
            # flow-rule norm identity while flowing below saturation
            if state.active_P and not state.active_S:
                assert np.linalg.norm(res.dP) == pytest.approx(state.lam_P, rel=1e-8, abs=1e-15)
            assert res.dissipation >= -1e-12 * p.E_C * p.P_sat
            assert np.linalg.norm(state.P) <= p.P_sat + delta_s

    def test_flow_parallel_to_driving_field(self, p, s):
        state = mat.InternalState.virgin()
        res = vi.solve_increment(state, ctrl_e3(1.5 * p.E_C), p, s)
        ehat = mat.driving_force(np.zeros(6), np.array([0, 0, 1.5 * p.E_C]),
                                 res.state.P, 0.0, p)
        cos = (res.dP @ ehat) / (np.linalg.norm(res.dP) * np.linalg.norm(ehat))
        assert cos == pytest.approx(1.0, abs=1e-10)
