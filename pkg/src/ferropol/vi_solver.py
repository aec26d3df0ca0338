"""Point-level incremental variational inequality for polarization switching.

Given the previous internal state and prescribed end-of-increment stress and
electric field, the update solves the stationarity/complementarity system

* polarization update parallel to the driving field, scaled by the switching
  multiplier, while the switching set is active (otherwise no update),
* switching condition enforced as an equality on the active set,
* saturation condition enforced as an equality on its active set,

with Newton's method on a fixed active set and an outer loop that adjusts the
sets from the converged multipliers and condition values.  Multipliers are
unconstrained in sign during each Newton solve; the sign checks happen in the
outer loop.

Residual rows and unknowns are nondimensionalized (polarization-like terms by
the saturation polarization, field-like terms by the coercive field) so a
single relative tolerance governs convergence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .material import (
    REG_FRACTION,
    InternalState,
    MaterialParams,
    driving_force_dP_point,
    driving_force_point,
    saturation_fn,
    switching_fn,
)


class DegenerateDirectionError(RuntimeError):
    """Raised when the switching set is active but the driving field vanishes."""


class ActiveSetCycleError(RuntimeError):
    """Raised when the active sets fail to settle; carries the loop history."""

    def __init__(self, history):
        super().__init__(f"active sets did not settle after {len(history)} loops: {history}")
        self.history = list(history)


@dataclass(frozen=True)
class PointControls:
    """Prescribed stress (6-vector, Pa) and electric field (V/m) at the end of an increment."""

    stress: np.ndarray
    efield: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.stress, dtype=float)
        e = np.asarray(self.efield, dtype=float)
        if s.shape != (6,) or e.shape != (3,):
            raise ValueError("controls need a stress 6-vector and a field 3-vector")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(e))):
            raise ValueError("controls must be finite")
        object.__setattr__(self, "stress", s)
        object.__setattr__(self, "efield", e)


@dataclass(frozen=True)
class SolverSettings:
    """Tolerances and limits for the increment solver.

    ``delta_P`` (field-like, V/m) and ``delta_S`` (polarization-like, C/m^2)
    default to ``E_C * 1e-3`` and ``P_sat * 1e-3``; they gate the active-set
    updates.  ``reg`` is the virgin-state regularization threshold relative to
    the saturation polarization.
    """

    newton_tol: float = 1e-11
    newton_max_iter: int = 40
    max_halvings: int = 20
    delta_P: Optional[float] = None
    delta_S: Optional[float] = None
    max_active_loops: int = 12
    reg: float = REG_FRACTION

    def resolved_delta_P(self, p: MaterialParams) -> float:
        return self.delta_P if self.delta_P is not None else p.E_C * 1e-3

    def resolved_delta_S(self, p: MaterialParams) -> float:
        return self.delta_S if self.delta_S is not None else p.P_sat * 1e-3


@dataclass
class IncrementResult:
    """Outcome of one constitutive increment."""

    state: InternalState
    dP: np.ndarray
    dissipation: float
    newton_iters: int
    active_loops: int
    converged: bool


def _unpack(x, active_P, active_S, p):
    P = x[:3] * p.P_sat
    k = 3
    lam_P = 0.0
    lam_S = 0.0
    if active_P:
        lam_P = x[k] * p.P_sat
        k += 1
    if active_S:
        lam_S = x[k] * p.E_C
    return P, lam_P, lam_S


def _pack(state: InternalState, active_P, active_S, p):
    parts = [np.asarray(state.P, dtype=float) / p.P_sat]
    if active_P:
        parts.append([state.lam_P / p.P_sat if state.active_P else 0.0])
    if active_S:
        parts.append([state.lam_S / p.E_C if state.active_S else 0.0])
    return np.concatenate(parts)


def _residual_x(x, prev, ctrl, active_P, active_S, p, s):
    P, lam_P, lam_S = _unpack(x, active_P, active_S, p)
    r = [(P - prev.P) / p.P_sat]
    if active_P:
        ehat = driving_force_point(ctrl.stress, ctrl.efield, P, lam_S, p, s.reg)
        norm = np.linalg.norm(ehat)
        if norm < 1e-12 * p.E_C:
            raise DegenerateDirectionError(
                f"driving field {norm:.3e} V/m below 1e-12*E_C with the switching set active"
            )
        g = ehat / norm
        r[0] = (P - prev.P - lam_P * g) / p.P_sat
        r.append([(norm - p.E_C) / p.E_C])
    if active_S:
        r.append([saturation_fn(P, p) / p.P_sat])
    return np.concatenate(r)


def _jacobian_x(x, prev, ctrl, active_P, active_S, p, s):
    P, lam_P, lam_S = _unpack(x, active_P, active_S, p)
    n = x.size
    jac = np.zeros((n, n))
    if not active_P:
        jac[:3, :3] = np.eye(3)
        if active_S:
            norm_p = np.linalg.norm(P)
            e = P / norm_p if norm_p > 0 else np.zeros(3)
            jac[3, :3] = e  # both blocks carry the 1/P_sat row scale
        return jac

    ehat = driving_force_point(ctrl.stress, ctrl.efield, P, lam_S, p, s.reg)
    norm = np.linalg.norm(ehat)
    if norm < 1e-12 * p.E_C:
        raise DegenerateDirectionError(
            f"driving field {norm:.3e} V/m below 1e-12*E_C with the switching set active"
        )
    g = ehat / norm
    d_dp = driving_force_dP_point(ctrl.stress, ctrl.efield, P, lam_S, p, s.reg)
    d_dlam = -P / np.linalg.norm(P) if np.linalg.norm(P) >= s.reg * p.P_sat else np.zeros(3)
    proj = (np.eye(3) - np.outer(g, g)) / norm  # d(g)/d(ehat)

    # stationarity rows (scaled 1/P_sat), unknown P scaled by P_sat: net factor 1
    jac[:3, :3] = np.eye(3) - lam_P * proj @ d_dp
    col = 3
    jac[:3, col] = -g  # d/d(lam_P/P_sat) of rows already scaled by 1/P_sat
    row_fp = col
    # switching row, scaled 1/E_C; P columns scaled by P_sat
    jac[row_fp, :3] = (g @ d_dp) * (p.P_sat / p.E_C)
    jac[row_fp, col] = 0.0
    if active_S:
        col_s = col + 1
        jac[:3, col_s] = -lam_P * (proj @ d_dlam) * (p.E_C / p.P_sat)
        jac[row_fp, col_s] = float(g @ d_dlam)
        row_fs = col_s
        norm_p = np.linalg.norm(P)
        e = P / norm_p if norm_p > 0 else np.zeros(3)
        jac[row_fs, :3] = e
    return jac


def _state_from_x(x, active_P, active_S, p) -> InternalState:
    P, lam_P, lam_S = _unpack(x, active_P, active_S, p)
    return InternalState(P=P, lam_P=lam_P, lam_S=lam_S, active_P=active_P, active_S=active_S)


def kkt_residual(prev: InternalState, trial: InternalState, ctrl: PointControls,
                 p: MaterialParams, s: SolverSettings) -> np.ndarray:
    """Scaled stationarity/condition residual for the trial state's active flags."""
    x = _pack(trial, trial.active_P, trial.active_S, p)
    return _residual_x(x, prev, ctrl, trial.active_P, trial.active_S, p, s)


def kkt_jacobian(prev: InternalState, trial: InternalState, ctrl: PointControls,
                 p: MaterialParams, s: SolverSettings) -> np.ndarray:
    """Analytic Jacobian of ``kkt_residual`` with respect to the scaled unknowns."""
    x = _pack(trial, trial.active_P, trial.active_S, p)
    return _jacobian_x(x, prev, ctrl, trial.active_P, trial.active_S, p, s)


def newton_solve_fixed_active(prev: InternalState, ctrl: PointControls,
                              active_P: bool, active_S: bool,
                              p: MaterialParams, s: SolverSettings,
                              start: Optional[InternalState] = None):
    """Newton iteration on the fixed-active-set system.

    Multipliers are free in sign here.  Returns ``(trial, converged, iters)``;
    a singular Jacobian or iteration overrun is reported through the flag, not
    raised.
    """
    x = _pack(start if start is not None else prev, active_P, active_S, p)
    r = _residual_x(x, prev, ctrl, active_P, active_S, p, s)
    iters = 0
    for _ in range(s.newton_max_iter):
        if np.max(np.abs(r)) <= s.newton_tol:
            return _state_from_x(x, active_P, active_S, p), True, iters
        jac = _jacobian_x(x, prev, ctrl, active_P, active_S, p, s)
        try:
            dx = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            return _state_from_x(x, active_P, active_S, p), False, iters
        base = np.linalg.norm(r)
        step = 1.0
        for _ in range(s.max_halvings):
            r_new = _residual_x(x + step * dx, prev, ctrl, active_P, active_S, p, s)
            if np.linalg.norm(r_new) <= base or np.max(np.abs(r_new)) <= s.newton_tol:
                break
            step *= 0.5
        x = x + step * dx
        r = r_new
        iters += 1
    converged = bool(np.max(np.abs(r)) <= s.newton_tol)
    return _state_from_x(x, active_P, active_S, p), converged, iters


def update_active_sets(trial: InternalState, ctrl: PointControls,
                       p: MaterialParams, s: SolverSettings):
    """One pass of the active-set adjustment rules.

    Removal thresholds compare each multiplier against the small offset with
    its own dimension (polarization-like for the switching multiplier,
    field-like for the saturation multiplier); condition values are compared
    against the offset of their own dimension likewise.
    """
    delta_p = s.resolved_delta_P(p)
    delta_s = s.resolved_delta_S(p)
    lam_s_eff = trial.lam_S if trial.active_S else 0.0
    ehat = driving_force_point(ctrl.stress, ctrl.efield, trial.P, lam_s_eff, p, s.reg)
    f_p = switching_fn(ehat, p)
    f_s = saturation_fn(trial.P, p)

    active_P, active_S = trial.active_P, trial.active_S
    if active_P and not active_S and trial.lam_P < delta_s:
        active_P = False
    elif not active_P and f_p > delta_p:
        active_P = True
    if not active_S and active_P and f_s > delta_s:
        active_S = True
    elif active_S and trial.lam_S < delta_p:
        active_S = False
    changed = (active_P != trial.active_P) or (active_S != trial.active_S)
    return active_P, active_S, changed


def solve_increment(prev: InternalState, ctrl: PointControls,
                    p: MaterialParams, s: SolverSettings) -> IncrementResult:
    """Solve one constitutive increment to a fixed point of solve + set update.

    The active sets start inactive each increment (elastic trial first); a
    carried-over saturation set can otherwise lock a spurious multiplier on
    unloading.  Dissipation uses the end-of-increment driving field.
    """
    active_P = False
    active_S = False
    trial = prev.copy()
    trial.active_P = False
    trial.active_S = False
    trial.lam_P = 0.0
    trial.lam_S = 0.0
    history = []
    iters_total = 0
    loops = 0
    settled = False
    while loops < s.max_active_loops:
        loops += 1
        trial, converged, iters = newton_solve_fixed_active(
            prev, ctrl, active_P, active_S, p, s, start=trial)
        iters_total += iters
        if not converged:
            return IncrementResult(state=trial, dP=trial.P - prev.P, dissipation=0.0,
                                   newton_iters=iters_total, active_loops=loops,
                                   converged=False)
        history.append((active_P, active_S))
        active_P, active_S, changed = update_active_sets(trial, ctrl, p, s)
        if not changed:
            settled = True
            break
        trial.active_P = active_P
        trial.active_S = active_S
        if not active_P:
            trial.lam_P = 0.0
        if not active_S:
            trial.lam_S = 0.0
    if not settled:
        raise ActiveSetCycleError(history)

    d_p = trial.P - prev.P
    lam_s_eff = trial.lam_S if trial.active_S else 0.0
    ehat = driving_force_point(ctrl.stress, ctrl.efield, trial.P, lam_s_eff, p, s.reg)
    dissipation = float(ehat @ d_p)
    return IncrementResult(state=trial, dP=d_p, dissipation=dissipation,
                           newton_iters=iters_total, active_loops=loops, converged=True)
