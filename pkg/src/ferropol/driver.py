"""Load-program execution at a single material point.

A program is an ordered list of segments, each holding target stress and
electric field reached by piecewise-linear interpolation over a number of
steps.  Every step is solved by the incremental variational-inequality
update; the trace records controls, state, recovered strain and dielectric
displacement, dissipation and solver effort per step.

The module also carries a closed-form uniaxial oracle: for collinear stress,
field and polarization the complementarity system reduces to a scalar
problem solved here by dense sub-stepping and bisection, fully independent
of the Newton/active-set machinery it is used to check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .material import InternalState, MaterialParams, reversible_response
from .vi_solver import PointControls, SolverSettings, solve_increment

CSV_COLUMNS = (
    "step,E1,E2,E3,s11,s22,s33,s23,s13,s12,P1,P2,P3,lamP,lamS,"
    "D1,D2,D3,e11,e22,e33,e23,e13,e12,diss,newton,loops"
)


class StepFailure(RuntimeError):
    """Solver failure wrapped with the load-step index."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"load step {step} failed: {reason}")
        self.step = step


@dataclass
class Segment:
    """Linear ramp to the given stress/field targets over ``steps`` increments."""

    stress: np.ndarray
    efield: np.ndarray
    steps: int

    def __post_init__(self):
        self.stress = np.asarray(self.stress, dtype=float).reshape(6)
        self.efield = np.asarray(self.efield, dtype=float).reshape(3)
        if self.steps < 1:
            raise ValueError("segment step count must be >= 1")


@dataclass
class LoadProgram:
    """Program segments plus an optional non-virgin starting state."""

    segments: List[Segment]
    initial_state: Optional[InternalState] = None

    def total_steps(self) -> int:
        return sum(seg.steps for seg in self.segments)


@dataclass
class TraceStep:
    """Per-step record of controls, state and recovered fields."""

    step: int
    stress: np.ndarray
    efield: np.ndarray
    P: np.ndarray
    lam_P: float
    lam_S: float
    strain: np.ndarray
    edisp: np.ndarray
    diss_inc: float
    diss_cum: float
    newton_iters: int
    active_loops: int


def _record(step, stress, efield, state, p, diss_inc, diss_cum, iters, loops) -> TraceStep:
    eps, edisp = reversible_response(stress, efield, state.P, p)
    return TraceStep(
        step=step,
        stress=np.array(stress, copy=True),
        efield=np.array(efield, copy=True),
        P=np.array(state.P, copy=True),
        lam_P=float(state.lam_P),
        lam_S=float(state.lam_S),
        strain=eps,
        edisp=edisp,
        diss_inc=diss_inc,
        diss_cum=diss_cum,
        newton_iters=iters,
        active_loops=loops,
    )


def run_program(prog: LoadProgram, p: MaterialParams, s: SolverSettings) -> List[TraceStep]:
    """Execute a load program step by step; returns the trace including row 0."""
    state = (prog.initial_state or InternalState.virgin()).copy()
    stress = np.zeros(6)
    efield = np.zeros(3)
    trace = [_record(0, stress, efield, state, p, 0.0, 0.0, 0, 0)]
    diss_cum = 0.0
    step = 0
    for seg in prog.segments:
        start_stress, start_efield = stress.copy(), efield.copy()
        for k in range(1, seg.steps + 1):
            step += 1
            frac = k / seg.steps
            stress = (1.0 - frac) * start_stress + frac * seg.stress
            efield = (1.0 - frac) * start_efield + frac * seg.efield
            ctrl = PointControls(stress=stress, efield=efield)
            try:
                result = solve_increment(state, ctrl, p, s)
            except RuntimeError as exc:
                raise StepFailure(step, str(exc)) from exc
            if not result.converged:
                raise StepFailure(step, "increment did not converge")
            state = result.state
            diss_cum += result.dissipation
            trace.append(_record(step, stress, efield, state, p,
                                 result.dissipation, diss_cum,
                                 result.newton_iters, result.active_loops))
    return trace


def write_trace_csv(path, trace: Sequence[TraceStep]) -> None:
    """Write a trace as strict CSV (fixed columns, SI units, full precision)."""
    def fmt(x: float) -> str:
        return f"{x:.17g}"

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_COLUMNS + "\n")
        for row in trace:
            cells = [str(row.step)]
            cells += [fmt(v) for v in row.efield]
            cells += [fmt(v) for v in row.stress]
            cells += [fmt(v) for v in row.P]
            cells += [fmt(row.lam_P), fmt(row.lam_S)]
            cells += [fmt(v) for v in row.edisp]
            cells += [fmt(v) for v in row.strain]
            cells += [fmt(row.diss_inc), str(row.newton_iters), str(row.active_loops)]
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# closed-form uniaxial oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleStep:
    """Scalar per-step oracle record along the shared axis."""

    step: int
    stress: float
    efield: float
    P: float
    lam_P: float
    lam_S: float
    strain: float
    edisp: float
    diss_inc: float
    diss_cum: float


def _uniaxial_axis(prog: LoadProgram) -> int:
    """Common axis of all targets, or raise if the program is not uniaxial."""
    axis = None
    vectors = []
    for seg in prog.segments:
        if np.any(seg.stress[3:] != 0.0):
            raise ValueError("oracle requires shear-free uniaxial stress")
        vectors.append(seg.stress[:3])
        vectors.append(seg.efield)
    if prog.initial_state is not None:
        vectors.append(np.asarray(prog.initial_state.P, dtype=float))
    for v in vectors:
        nz = np.nonzero(v)[0]
        if nz.size > 1:
            raise ValueError("oracle requires collinear uniaxial loading")
        if nz.size == 1:
            if axis is None:
                axis = int(nz[0])
            elif axis != int(nz[0]):
                raise ValueError("oracle requires a single shared axis")
    return 2 if axis is None else axis


def _ehat_1d(P: float, sig: float, ef: float, p: MaterialParams, reg: float) -> float:
    """Scalar driving field along the axis, saturation back-field excluded."""
    out = ef - p.c * P
    if abs(P) >= reg * p.P_sat:
        out += sig * ef * p.d_p / p.P_sat
        out += 2.0 * p.S_sat * sig * P / p.P_sat**2
    return out


def _oracle_substep(P: float, sig: float, ef: float, p: MaterialParams, reg: float):
    """Advance the scalar complementarity system to controls (sig, ef).

    Returns ``(P_new, lam_S)``; the switching multiplier of a step is the
    accumulated |dP| outside.
    """
    e0 = _ehat_1d(P, sig, ef, p, reg)
    if abs(e0) <= p.E_C:
        return P, 0.0
    sgn = 1.0 if e0 > 0.0 else -1.0
    target = sgn * p.P_sat

    def flow_gap(q: float) -> float:
        return _ehat_1d(q, sig, ef, p, reg) - sgn * p.E_C

    if P == target or flow_gap(target) * flow_gap(P) > 0.0:
        # still driven outward at the saturation sphere: clamp, back-field holds
        lam_s = sgn * _ehat_1d(target, sig, ef, p, reg) - p.E_C
        return target, lam_s
    lo, hi = (P, target) if P < target else (target, P)
    flo = flow_gap(lo)
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        fmid = flow_gap(mid)
        if flo * fmid <= 0.0:
            hi = mid
        else:
            lo, flo = mid, fmid
    return 0.5 * (lo + hi), 0.0


def oracle_1d(prog: LoadProgram, p: MaterialParams,
              substeps: Optional[int] = None, reg: float = 1e-8) -> List[OracleStep]:
    """Closed-form trace for a uniaxial program, on the program's step grid.

    Each program step is refined internally (about 1e4 substeps across the
    whole program by default) and resolved by bisection on the scalar flow
    condition; saturation is handled by clamping with an explicit back-field.
    """
    axis = _uniaxial_axis(prog)
    if substeps is None:
        substeps = max(1, round(10000 / max(1, prog.total_steps())))
    if prog.initial_state is not None:
        P = float(np.asarray(prog.initial_state.P)[axis])
    else:
        P = 0.0

    def recover(sig, ef, P):
        coup = p.d_p * P / p.P_sat
        eps = sig / p.Y + coup * ef + p.S_sat * P * P / p.P_sat**2
        edisp = coup * sig + p.eps_perm * ef + P
        return eps, edisp

    sig = ef = 0.0
    eps0, d0 = recover(sig, ef, P)
    rows = [OracleStep(0, sig, ef, P, 0.0, 0.0, eps0, d0, 0.0, 0.0)]
    diss_cum = 0.0
    step = 0
    for seg in prog.segments:
        sig_start, ef_start = sig, ef
        sig_end = float(seg.stress[axis])
        ef_end = float(seg.efield[axis])
        for k in range(1, seg.steps + 1):
            step += 1
            frac_hi = k / seg.steps
            frac_lo = (k - 1) / seg.steps
            P_start = P
            lam_s = 0.0
            diss_step = 0.0
            for j in range(1, substeps + 1):
                frac = frac_lo + (frac_hi - frac_lo) * j / substeps
                sig = (1.0 - frac) * sig_start + frac * sig_end
                ef = (1.0 - frac) * ef_start + frac * ef_end
                P_new, lam_s = _oracle_substep(P, sig, ef, p, reg)
                diss_step += p.E_C * abs(P_new - P)
                P = P_new
            lam_p = abs(P - P_start)
            diss_cum += diss_step
            eps, edisp = recover(sig, ef, P)
            rows.append(OracleStep(step, sig, ef, P, lam_p, lam_s, eps, edisp,
                                   diss_step, diss_cum))
    return rows


def oracle_depol_onset(p: MaterialParams, pol: Optional[float] = None,
                       sigma_hi: float = -2.0e8) -> float:
    """Compressive stress at which a poled point starts to depolarize (E = 0).

    Bisection on the scalar switching condition; independent of the solver.
    """
    P = p.P_sat if pol is None else pol

    def gap(sig: float) -> float:
        return abs(_ehat_1d(P, sig, 0.0, p, 1e-8)) - p.E_C

    lo, hi = 0.0, sigma_hi
    if gap(lo) >= 0.0:
        raise ValueError("point already switching at zero stress")
    if gap(hi) <= 0.0:
        raise ValueError("bracket does not reach the switching threshold")
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# canned scenarios
# ---------------------------------------------------------------------------

def build_scenario(name: str, p: MaterialParams, steps: Optional[int] = None,
                   angle_deg: float = 0.0, sigma_max: float = -1.0e8) -> LoadProgram:
    """Construct one of the bundled load scenarios.

    ``hysteresis`` and ``butterfly`` share a four-segment triangular field
    sweep to +-2 E_C; ``mech_depol`` poles, unloads and ramps a compressive
    axial stress; ``nonprop`` starts from a fully poled state tilted by
    ``angle_deg`` against the field axis and sweeps the vertical field up and
    back down.
    """
    e2 = np.array([0.0, 0.0, 2.0 * p.E_C])
    zero6 = np.zeros(6)
    if name in ("hysteresis", "butterfly"):
        n = steps or 50
        segs = [
            Segment(zero6, e2, n),
            Segment(zero6, np.zeros(3), n),
            Segment(zero6, -e2, n),
            Segment(zero6, e2, n),
        ]
        return LoadProgram(segments=segs)
    if name == "mech_depol":
        n = steps or 50
        sig = np.zeros(6)
        sig[2] = sigma_max
        segs = [
            Segment(zero6, e2, n),
            Segment(zero6, np.zeros(3), n),
            Segment(sig, np.zeros(3), n),
        ]
        return LoadProgram(segments=segs)
    if name == "nonprop":
        n = steps or 80
        a = math.radians(angle_deg)
        init = InternalState(P=p.P_sat * np.array([math.sin(a), 0.0, math.cos(a)]))
        segs = [
            Segment(zero6, e2, n),
            Segment(zero6, np.zeros(3), n),
        ]
        return LoadProgram(segments=segs, initial_state=init)
    raise KeyError(f"unknown scenario {name!r}")


def extract_landmarks(trace: Sequence[TraceStep], p: MaterialParams) -> dict:
    """Characteristic points of a hysteresis-style trace along axis 3.

    Onsets are reported as (below, at) field brackets of the first flowing
    step; the remanent displacement is read at the first return to zero field
    after poling.
    """
    out = {}
    flow = [i for i in range(1, len(trace)) if trace[i].lam_P > 0.0]
    if flow:
        i = flow[0]
        out["switching_onset_E"] = (trace[i - 1].efield[2], trace[i].efield[2])
    sat = [i for i in range(1, len(trace))
           if np.linalg.norm(trace[i].P) >= p.P_sat * (1.0 - 1e-9)]
    if sat:
        i = sat[0]
        out["saturation_knee_E"] = (trace[i - 1].efield[2], trace[i].efield[2])
    if sat:
        for i in range(sat[0], len(trace)):
            if abs(trace[i].efield[2]) < 1e-9 * p.E_C:
                out["remanent_D"] = float(trace[i].edisp[2])
                out["remanent_strain"] = float(trace[i].strain[2])
                break
    rev = [i for i in flow if trace[i].efield[2] < 0.0 and trace[i].P[2] < trace[i - 1].P[2]]
    if rev:
        i = rev[0]
        out["reverse_onset_E"] = (trace[i - 1].efield[2], trace[i].efield[2])
    return out
