"""Structural benchmark drivers built on the finite-element layer.

Three canned problems:

* ``beam``: a cantilever poled along its axis, grounded electrodes at the
  clamped and tip faces, loaded by a shear traction at the tip.  Bending
  compresses the top fibers and partially depolarizes them.
* ``bimorph``: two bonded layers; only the upper one is poled through its
  thickness, then all electrodes are grounded and the remanent in-plane
  contraction of the upper layer bends the structure.
* ``nonprop_field``: a plane-strain specimen pre-poled at an angle to the
  electrode axis with insulated sides, then driven by a vertical field.

Geometry defaults are documented guesses where the source material gives
only sketches; everything is configurable through ``BenchmarkConfig``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import fem
from . import material as mat
from .driver import LoadProgram, TraceStep
from .material import MaterialParams
from .vi_solver import SolverSettings


@dataclass
class BenchmarkConfig:
    """Geometry, mesh, load and schedule of one benchmark run."""

    name: str = "beam"
    material: str = "table1"
    length: float = 10.0e-3
    width: float = 2.0e-3
    height: float = 2.0e-3
    divisions: Tuple[int, int, int] = (20, 4, 4)
    load: float = 2.0e6
    steps: int = 10
    poling_factor: float = 2.0
    lower_thickness: float = 0.6e-3
    upper_thickness: float = 0.4e-3
    angle_deg: float = 180.0
    out_dir: Optional[str] = None

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "BenchmarkConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown benchmark config keys: {sorted(unknown)}")
        if "divisions" in raw:
            raw["divisions"] = tuple(raw["divisions"])
        return cls(**raw)


def _load_material(spec: str) -> MaterialParams:
    try:
        return mat.preset(spec)
    except KeyError:
        return mat.params_from_file(spec)


def _rigid_support_dofs(mesh: fem.Mesh, clamp_axis: int = 0):
    """Clamp-face normal displacement plus a 3-2-1 rigid-body restraint."""
    coords = mesh.nodes
    span = coords.max(axis=0) - coords.min(axis=0)
    tol = 1e-9 * max(span.max(), 1.0)
    face = mesh.node_set(lambda x: abs(x[clamp_axis] - coords[:, clamp_axis].min()) <= tol)
    dofs = [3 * n + clamp_axis for n in face]
    on_face = coords[face]
    rest = [a for a in range(3) if a != clamp_axis]
    origin = face[np.lexsort((on_face[:, rest[1]], on_face[:, rest[0]]))[0]]
    dofs += [3 * origin + rest[0], 3 * origin + rest[1]]
    far = face[np.argmax(np.abs(on_face[:, rest[0]] - coords[origin, rest[0]]))]
    dofs += [3 * far + rest[1]]
    idx = np.array(sorted(set(dofs)), dtype=int)
    return idx, np.zeros(idx.size)


def _write_report(path, summary: Dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(summary):
            val = summary[key]
            if isinstance(val, float):
                fh.write(f"{key} = {val:.12g}\n")
            else:
                fh.write(f"{key} = {val}\n")


def _snapshot(model: fem.FEModel, state: fem.FEState, path) -> None:
    flds = fem.recover_fields(model, state)
    fem.write_vtk(path, model.mesh,
                  point_data={"displacement": state.u.reshape(-1, 3),
                              "potential": state.phi},
                  cell_data={"polarization": flds["P"],
                             "efield": flds["efield"],
                             "edisp": flds["edisp"],
                             "stress": flds["stress"]})


# ---------------------------------------------------------------------------
# cantilever depolarization
# ---------------------------------------------------------------------------

def run_beam(cfg: BenchmarkConfig, settings: Optional[SolverSettings] = None) -> Dict:
    """Poled cantilever with a tip shear traction; reports depolarization."""
    p = _load_material(cfg.material)
    s = settings or SolverSettings()
    mesh = fem.uniform_box_mesh((cfg.length, cfg.width, cfg.height), cfg.divisions)
    model = fem.FEModel(mesh, p, s)

    span = mesh.nodes.max(axis=0)
    tol = 1e-9 * span.max()
    fixed_u = _rigid_support_dofs(mesh, clamp_axis=0)
    electrodes = np.concatenate([mesh.node_set(lambda x: x[0] <= tol),
                                 mesh.node_set(lambda x: x[0] >= cfg.length - tol)])
    tip_quads = mesh.boundary_quads("x", 1)

    state = fem.FEState.zeros(mesh)
    state.P[:, 0] = p.P_sat  # fully poled along the beam axis

    reports = []
    for k in range(cfg.steps + 1):
        frac = k / cfg.steps
        ctrl = fem.StepControls(
            fixed_u=fixed_u,
            fixed_phi=(electrodes, np.zeros(electrodes.size)),
            tractions=[(tip_quads, np.array([0.0, frac * cfg.load, 0.0]))])
        state, rep = fem.solve_step(model, state, ctrl)
        reports.append(rep)

    pol = np.linalg.norm(state.P, axis=1)
    min_pi = float(pol.min() / p.P_sat)

    # top-surface layer: elements adjacent to the y-max face, scanned along x
    centroids = mesh.nodes[mesh.elems].mean(axis=1)
    ny = cfg.divisions[1]
    dy = cfg.width / ny
    top = np.flatnonzero(centroids[:, 1] > cfg.width - dy)
    xs = np.unique(np.round(centroids[top, 0], 12))
    poled_col = []
    for x in xs:
        col = top[np.isclose(centroids[top, 0], x)]
        poled_col.append(bool(np.all(pol[col] >= p.P_sat * (1.0 - 1e-3))))
    boundary = cfg.length
    for i in range(len(xs)):
        if all(poled_col[i:]):
            boundary = xs[i] - 0.5 * cfg.length / cfg.divisions[0]
            break

    summary = {
        "benchmark": "beam",
        "min_PI_over_Psat": min_pi,
        "fully_poled_x_m": float(boundary),
        "tip_traction_Pa": cfg.load,
        "max_active_loops": max(r["loops"] for r in reports),
        "total_dissipation_J": float(sum(r["dissipation"] for r in reports)),
        "final_residual": reports[-1]["residual"],
        "elements": mesh.n_elems,
    }
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_report(out / "beam_report.txt", summary)
        _snapshot(model, state, out / "beam_fields.vtk")
        cfg.to_json(out / "beam_config.json")
    return summary


# ---------------------------------------------------------------------------
# bimorph bending after one-sided poling
# ---------------------------------------------------------------------------

def run_bimorph(cfg: BenchmarkConfig, settings: Optional[SolverSettings] = None) -> Dict:
    """Pole the upper layer, ground everything, report tip deflections."""
    p = _load_material(cfg.material)
    s = settings or SolverSettings()
    nx, ny, nz = cfg.divisions
    nz_low = max(1, nz // 2)
    nz_up = max(1, nz - nz_low)
    t_low, t_up = cfg.lower_thickness, cfg.upper_thickness
    zs = np.concatenate([np.linspace(0.0, t_low, nz_low + 1),
                         np.linspace(t_low, t_low + t_up, nz_up + 1)[1:]])
    mesh = fem.box_mesh(np.linspace(0, cfg.length, nx + 1),
                        np.linspace(0, cfg.width, ny + 1), zs)
    model = fem.FEModel(mesh, p, s)

    span = t_low + t_up
    tol = 1e-9 * max(cfg.length, span)
    fixed_u = _rigid_support_dofs(mesh, clamp_axis=0)
    bottom = mesh.node_set(lambda x: abs(x[2]) <= tol)
    midplane = mesh.node_set(lambda x: abs(x[2] - t_low) <= tol)
    topplane = mesh.node_set(lambda x: abs(x[2] - span) <= tol)
    electrodes = np.concatenate([bottom, midplane, topplane])
    pole_phi = -cfg.poling_factor * p.E_C * t_up  # E_z = +poling_factor*E_C above

    state = fem.FEState.zeros(mesh)
    reports = []
    schedule = [k / cfg.steps for k in range(cfg.steps + 1)] + \
               [1.0 - k / cfg.steps for k in range(1, cfg.steps + 1)]
    for frac in schedule:
        values = np.concatenate([np.zeros(bottom.size), np.zeros(midplane.size),
                                 frac * pole_phi * np.ones(topplane.size)])
        ctrl = fem.StepControls(fixed_u=fixed_u, fixed_phi=(electrodes, values))
        state, rep = fem.solve_step(model, state, ctrl)
        reports.append(rep)

    uz = state.u.reshape(-1, 3)[:, 2]
    nodes = mesh.nodes
    tipsel = lambda y: mesh.node_set(
        lambda x: abs(x[0] - cfg.length) <= tol and abs(x[1] - y) <= tol
        and abs(x[2]) <= tol)
    center_nodes = tipsel(cfg.width / 2.0)
    corner_nodes = np.concatenate([tipsel(0.0), tipsel(cfg.width)])
    center = float(np.mean(uz[center_nodes]))
    corner = float(np.mean(np.abs(uz[corner_nodes])) * np.sign(np.mean(uz[corner_nodes])))

    upper = np.flatnonzero(mesh.nodes[mesh.elems].mean(axis=1)[:, 2] > t_low)
    pol_up = np.linalg.norm(state.P[upper], axis=1)
    summary = {
        "benchmark": "bimorph",
        "center_tip_deflection_m": center,
        "corner_tip_deflection_m": corner,
        "corner_exceeds_center": bool(abs(corner) > abs(center)),
        "deflection_toward_poled_layer": bool(center > 0.0),
        "upper_layer_min_PI_over_Psat": float(pol_up.min() / p.P_sat),
        "max_active_loops": max(r["loops"] for r in reports),
        "elements": mesh.n_elems,
    }
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_report(out / "bimorph_report.txt", summary)
        _snapshot(model, state, out / "bimorph_fields.vtk")
        cfg.to_json(out / "bimorph_config.json")
    return summary


# ---------------------------------------------------------------------------
# non-proportional repoling on a plane-strain specimen
# ---------------------------------------------------------------------------

def run_nonprop_field(cfg: BenchmarkConfig,
                      settings: Optional[SolverSettings] = None) -> Dict:
    """Pre-poled specimen with insulated sides under a vertical field sweep."""
    p = _load_material(cfg.material)
    s = settings or SolverSettings()
    nx, ny, nz = cfg.divisions
    mesh = fem.uniform_box_mesh((cfg.length, cfg.width, cfg.height), (nx, ny, max(1, nz)))
    model = fem.FEModel(mesh, p, s)

    tol = 1e-9 * max(cfg.length, cfg.width)
    # plane strain: suppress all thickness displacement
    uz_dofs = np.arange(mesh.n_nodes) * 3 + 2
    n0 = mesh.node_set(lambda x: abs(x[0]) <= tol and abs(x[1]) <= tol and abs(x[2]) <= tol)[0]
    n1 = mesh.node_set(lambda x: abs(x[0] - cfg.length) <= tol and abs(x[1]) <= tol
                       and abs(x[2]) <= tol)[0]
    fixed_idx = np.concatenate([uz_dofs, [3 * n0, 3 * n0 + 1, 3 * n1 + 1]])
    fixed_u = (fixed_idx.astype(int), np.zeros(fixed_idx.size))
    bottom = mesh.node_set(lambda x: abs(x[1]) <= tol)
    top = mesh.node_set(lambda x: abs(x[1] - cfg.width) <= tol)
    electrodes = np.concatenate([bottom, top])

    def controls(phi_top):
        values = np.concatenate([np.zeros(bottom.size), phi_top * np.ones(top.size)])
        return fem.StepControls(fixed_u=fixed_u, fixed_phi=(electrodes, values))

    a = math.radians(cfg.angle_deg)
    target = p.P_sat * np.array([math.sin(a), math.cos(a), 0.0])
    state = fem.FEState.zeros(mesh)
    # impose the polarization in small steps, equilibrating at zero voltage
    for gamma in np.linspace(0.2, 1.0, 5):
        state.P = np.tile(gamma * target, (mesh.n_elems, 1))
        state, _ = fem.solve_step(model, state, controls(0.0))

    centroids = mesh.nodes[mesh.elems].mean(axis=1)
    center_el = int(np.argmin(np.linalg.norm(
        centroids - np.array([cfg.length / 2, cfg.width / 2, cfg.height / 2]), axis=1)))
    _, _, _, edisp0 = model.element_averages(state)
    d_base = edisp0[center_el].copy()

    sweep_phi = -cfg.poling_factor * p.E_C * cfg.width  # vertical field +y
    rows: List[Dict] = []
    schedule = [k / cfg.steps for k in range(cfg.steps + 1)] + \
               [1.0 - k / cfg.steps for k in range(1, cfg.steps + 1)]
    reports = []
    for frac in schedule:
        state, rep = fem.solve_step(model, state, controls(frac * sweep_phi))
        reports.append(rep)
        _, e_bar, _, d_bar = model.element_averages(state)
        rows.append({"E_applied": frac * cfg.poling_factor * p.E_C,
                     "E_center": float(e_bar[center_el, 1]),
                     "dD_vertical": float(d_bar[center_el, 1] - d_base[1])})

    summary = {
        "benchmark": "nonprop_field",
        "angle_deg": cfg.angle_deg,
        "dD_vertical_final": rows[-1]["dD_vertical"],
        "dD_vertical_peak": max(r["dD_vertical"] for r in rows),
        "max_active_loops": max(r["loops"] for r in reports),
        "elements": mesh.n_elems,
    }
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_report(out / "nonprop_field_report.txt", summary)
        with open(out / "nonprop_field_curve.csv", "w", encoding="utf-8") as fh:
            fh.write("E_applied,E_center,dD_vertical\n")
            for r in rows:
                fh.write(f"{r['E_applied']:.17g},{r['E_center']:.17g},"
                         f"{r['dD_vertical']:.17g}\n")
        _snapshot(model, state, out / "nonprop_field_fields.vtk")
        cfg.to_json(out / "nonprop_field_config.json")
    return summary


def run_benchmark(name: str, cfg: BenchmarkConfig,
                  settings: Optional[SolverSettings] = None) -> Dict:
    """Dispatch one of the named benchmarks."""
    runners = {"beam": run_beam, "bimorph": run_bimorph,
               "nonprop_field": run_nonprop_field}
    if name not in runners:
        raise KeyError(f"unknown benchmark {name!r}")
    return runners[name](cfg, settings)


# ---------------------------------------------------------------------------
# single-element equivalence driver
# ---------------------------------------------------------------------------

def single_element_trace(prog: LoadProgram, p: MaterialParams,
                         settings: Optional[SolverSettings] = None,
                         size: float = 1.0e-3) -> List[TraceStep]:
    """Drive one traction-free hexahedron through a load program.

    The electric field must be axial (z); stress targets are applied as
    consistent tractions on all six faces.  Under these homogeneous boundary
    conditions the element reproduces the material-point problem exactly, so
    the trace is directly comparable with ``driver.run_program``.
    """
    s = settings or SolverSettings()
    mesh = fem.uniform_box_mesh((size, size, size), (1, 1, 1))
    model = fem.FEModel(mesh, p, s)
    fixed_u = _rigid_support_dofs(mesh, clamp_axis=0)
    bottom = mesh.node_set(lambda x: x[2] <= 0.0)
    top = mesh.node_set(lambda x: x[2] >= size)
    electrodes = np.concatenate([bottom, top])
    face_quads = {(axis, side): mesh.boundary_quads(axis, side)
                  for axis in ("x", "y", "z") for side in (0, 1)}
    normals = {("x", 0): [-1, 0, 0], ("x", 1): [1, 0, 0],
               ("y", 0): [0, -1, 0], ("y", 1): [0, 1, 0],
               ("z", 0): [0, 0, -1], ("z", 1): [0, 0, 1]}

    state = fem.FEState.zeros(mesh)
    if prog.initial_state is not None:
        state.P[:] = prog.initial_state.P

    rows: List[TraceStep] = []
    diss_cum = 0.0

    def record(step, stress6, efield3, rep):
        nonlocal diss_cum
        eps_bar, e_bar, sig_bar, d_bar = model.element_averages(state)
        diss_cum += rep.get("dissipation", 0.0) / model.vol[0]
        rows.append(TraceStep(
            step=step, stress=sig_bar[0].copy(), efield=e_bar[0].copy(),
            P=state.P[0].copy(), lam_P=float(state.lam_P[0]),
            lam_S=float(state.lam_S[0]), strain=eps_bar[0].copy(),
            edisp=d_bar[0].copy(),
            diss_inc=rep.get("dissipation", 0.0) / model.vol[0],
            diss_cum=diss_cum, newton_iters=rep.get("newton_iters", 0),
            active_loops=rep.get("loops", 0)))

    def solve_at(stress6, efield3):
        if abs(efield3[0]) > 0 or abs(efield3[1]) > 0:
            raise ValueError("single-element driver supports axial fields only")
        sig_full = mat.stress6_to_full(stress6)
        tractions = []
        for key, quads in face_quads.items():
            n = np.array(normals[key], dtype=float)
            t = sig_full @ n
            if np.any(t != 0.0):
                tractions.append((quads, t))
        values = np.concatenate([np.zeros(bottom.size),
                                 -efield3[2] * size * np.ones(top.size)])
        ctrl = fem.StepControls(fixed_u=fixed_u,
                                fixed_phi=(electrodes, values),
                                tractions=tractions)
        return fem.solve_step(model, state, ctrl)

    stress = np.zeros(6)
    efield = np.zeros(3)
    state, rep = solve_at(stress, efield)
    record(0, stress, efield, {"dissipation": rep["dissipation"],
                               "newton_iters": 0, "loops": 0})
    step = 0
    for seg in prog.segments:
        start_stress, start_efield = stress.copy(), efield.copy()
        for k in range(1, seg.steps + 1):
            step += 1
            frac = k / seg.steps
            stress = (1 - frac) * start_stress + frac * seg.stress
            efield = (1 - frac) * start_efield + frac * seg.efield
            state, rep = solve_at(stress, efield)
            record(step, stress, efield, rep)
    return rows
