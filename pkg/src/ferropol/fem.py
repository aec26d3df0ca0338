"""Structured hexahedral finite-element layer for the coupled problem.

Trilinear nodal elements carry displacement and electric potential; the
remanent polarization and both Lagrange multipliers take one value per
element.  Each load step runs the element-wise active-set loop around a
monolithic Newton solve of the coupled system (balance of momentum, Gauss'
law, per-element stationarity and active conditions).

Internal unknowns are nondimensionalized as in the point solver; the global
linear systems are factorized with a direct sparse LU.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import material as mat
from .material import MaterialParams
from .tensors import VOIGT_PAIRS, VOIGT_WEIGHTS
from .vi_solver import SolverSettings

# hex8 local ordering: bottom face counterclockwise, then top face
_CORNERS = np.array([
    [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
    [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
], dtype=float)

# local node ids of the six faces, outward orientation
_FACES = {
    ("z", 0): (0, 3, 2, 1), ("z", 1): (4, 5, 6, 7),
    ("y", 0): (0, 1, 5, 4), ("y", 1): (3, 7, 6, 2),
    ("x", 0): (0, 4, 7, 3), ("x", 1): (1, 2, 6, 5),
}

_AXIS = {"x": 0, "y": 1, "z": 2}


def _shape(xi):
    n = np.prod(1.0 + _CORNERS * xi, axis=1) / 8.0
    grad = np.empty((8, 3))
    for a in range(3):
        pref = 1.0 + _CORNERS * xi
        pref[:, a] = 1.0
        grad[:, a] = _CORNERS[:, a] * np.prod(pref, axis=1) / 8.0
    return n, grad


_GP = _CORNERS / np.sqrt(3.0)
_GW = np.ones(8)
_N_GP = np.array([_shape(x)[0] for x in _GP])        # (8gp, 8)
_DN_GP = np.array([_shape(x)[1] for x in _GP])       # (8gp, 8, 3)


@dataclass
class Mesh:
    """Conforming hexahedral mesh."""

    nodes: np.ndarray
    elems: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elems(self) -> int:
        return self.elems.shape[0]

    def node_set(self, predicate) -> np.ndarray:
        """Indices of nodes whose coordinates satisfy the predicate."""
        hits = [i for i, x in enumerate(self.nodes) if predicate(x)]
        return np.array(hits, dtype=int)

    def boundary_quads(self, axis: str, side: int, tol: float = 1e-9) -> np.ndarray:
        """Outward-oriented quad faces lying on the bounding plane of an axis."""
        a = _AXIS[axis]
        coords = self.nodes[:, a]
        value = coords.max() if side else coords.min()
        span = max(coords.max() - coords.min(), 1.0)
        local = _FACES[(axis, side)]
        quads = []
        for conn in self.elems:
            ids = conn[list(local)]
            if np.all(np.abs(self.nodes[ids, a] - value) <= tol * span):
                quads.append(ids)
        return np.array(quads, dtype=int).reshape(-1, 4)


def box_mesh(xs: Sequence[float], ys: Sequence[float], zs: Sequence[float]) -> Mesh:
    """Tensor-product hexahedral mesh from per-axis coordinate arrays."""
    xs, ys, zs = (np.asarray(v, dtype=float) for v in (xs, ys, zs))
    nx, ny, nz = len(xs) - 1, len(ys) - 1, len(zs) - 1
    nodes = np.array([[x, y, z] for z in zs for y in ys for x in xs])

    def nid(i, j, k):
        return i + j * (nx + 1) + k * (nx + 1) * (ny + 1)

    elems = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                elems.append([nid(i, j, k), nid(i + 1, j, k),
                              nid(i + 1, j + 1, k), nid(i, j + 1, k),
                              nid(i, j, k + 1), nid(i + 1, j, k + 1),
                              nid(i + 1, j + 1, k + 1), nid(i, j + 1, k + 1)])
    return Mesh(nodes=nodes, elems=np.array(elems, dtype=int))


def uniform_box_mesh(lengths, divisions) -> Mesh:
    lx, ly, lz = lengths
    nx, ny, nz = divisions
    return box_mesh(np.linspace(0, lx, nx + 1), np.linspace(0, ly, ny + 1),
                    np.linspace(0, lz, nz + 1))


@dataclass
class FEState:
    """Nodal and element-wise solution state."""

    u: np.ndarray          # (3N,)
    phi: np.ndarray        # (N,)
    P: np.ndarray          # (M, 3)
    lam_P: np.ndarray      # (M,)
    lam_S: np.ndarray      # (M,)
    active_P: np.ndarray   # (M,) bool
    active_S: np.ndarray   # (M,) bool

    @classmethod
    def zeros(cls, mesh: Mesh) -> "FEState":
        m = mesh.n_elems
        return cls(u=np.zeros(3 * mesh.n_nodes), phi=np.zeros(mesh.n_nodes),
                   P=np.zeros((m, 3)), lam_P=np.zeros(m), lam_S=np.zeros(m),
                   active_P=np.zeros(m, dtype=bool), active_S=np.zeros(m, dtype=bool))

    def copy(self) -> "FEState":
        return FEState(u=self.u.copy(), phi=self.phi.copy(), P=self.P.copy(),
                       lam_P=self.lam_P.copy(), lam_S=self.lam_S.copy(),
                       active_P=self.active_P.copy(), active_S=self.active_S.copy())


@dataclass
class StepControls:
    """Boundary data for one load step.

    ``fixed_u``: (dof indices into the 3N displacement vector, values);
    ``fixed_phi``: (node indices, values); ``tractions``: list of
    (boundary quads, traction vector) pairs.
    """

    fixed_u: Tuple[np.ndarray, np.ndarray]
    fixed_phi: Tuple[np.ndarray, np.ndarray]
    tractions: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


class FEModel:
    """Mesh plus material and the precomputed element operators."""

    def __init__(self, mesh: Mesh, params: MaterialParams,
                 settings: Optional[SolverSettings] = None):
        self.mesh = mesh
        self.params = params
        self.settings = settings or SolverSettings()
        self._precompute()

    def _precompute(self):
        mesh, p = self.mesh, self.params
        coords = mesh.nodes[mesh.elems]                      # (M, 8, 3)
        jac = np.einsum("gna,mnb->mgab", _DN_GP, coords)     # (M, 8gp, 3, 3)
        det = np.linalg.det(jac)
        if np.any(det <= 0.0):
            raise ValueError("mesh contains inverted or degenerate elements")
        inv = np.linalg.inv(jac)
        dndx = np.einsum("gna,mgab->mgnb", _DN_GP, inv)      # (M, gp, node, 3)
        m = mesh.n_elems
        b = np.zeros((m, 8, 6, 24))
        for n in range(8):
            c = 3 * n
            b[:, :, 0, c + 0] = dndx[:, :, n, 0]
            b[:, :, 1, c + 1] = dndx[:, :, n, 1]
            b[:, :, 2, c + 2] = dndx[:, :, n, 2]
            b[:, :, 3, c + 1] = dndx[:, :, n, 2]
            b[:, :, 3, c + 2] = dndx[:, :, n, 1]
            b[:, :, 4, c + 0] = dndx[:, :, n, 2]
            b[:, :, 4, c + 2] = dndx[:, :, n, 0]
            b[:, :, 5, c + 0] = dndx[:, :, n, 1]
            b[:, :, 5, c + 1] = dndx[:, :, n, 0]
        self.B = b
        self.G = np.transpose(dndx, (0, 1, 3, 2))            # (M, gp, 3, 8)
        self.wdet = det * _GW[None, :]
        self.vol = self.wdet.sum(axis=1)
        self.Bbar = np.einsum("mg,mgia->mia", self.wdet, b) / self.vol[:, None, None]
        self.Gbar = np.einsum("mg,mgkn->mkn", self.wdet, self.G) / self.vol[:, None, None]
        self.K_uu = np.einsum("mg,mgia,ij,mgjb->mab", self.wdet, b, p.C_E, b)
        self.edof_u = (3 * mesh.elems[:, :, None] + np.arange(3)[None, None, :]).reshape(m, 24)
        self.edof_phi = 3 * mesh.n_nodes + mesh.elems
        a_char = self.vol.mean() ** (2.0 / 3.0)
        self.force_char = p.Y * p.S_sat * a_char
        self.charge_char = p.P_sat * a_char

    def _coupling_arrays(self, P):
        p = self.params
        d = mat.piezo_tensor(P, p, self.settings.reg)                    # (M, 3, 6)
        eps_i = mat.remanent_strain(P, p, self.settings.reg)             # (M, 6)
        dd_full = mat.piezo_tensor_dP_full(P, p, self.settings.reg)
        dd_red = np.stack([VOIGT_WEIGHTS[v] * dd_full[:, :, j, i, :]
                           for v, (i, j) in enumerate(VOIGT_PAIRS)], axis=2)  # (M,3,6,3)
        de_full = mat.remanent_strain_dP_full(P, p, self.settings.reg)
        de_red = np.stack([VOIGT_WEIGHTS[v] * de_full[:, i, j, :]
                           for v, (i, j) in enumerate(VOIGT_PAIRS)], axis=1)  # (M, 6, 3)
        return d, eps_i, dd_red, de_red

    def gauss_fields(self, state: FEState):
        """Strain, field, stress and dielectric displacement at every Gauss point."""
        p = self.params
        ue = state.u[self.edof_u]
        phie = state.phi[self.mesh.elems]
        eps = np.einsum("mgia,ma->mgi", self.B, ue)
        efield = -np.einsum("mgkn,mn->mgk", self.G, phie)
        d, eps_i, _, _ = self._coupling_arrays(state.P)
        eps_el = eps - eps_i[:, None, :] - np.einsum("mkv,mgk->mgv", d, efield)
        sig = np.einsum("ij,mgj->mgi", p.C_E, eps_el)
        edisp = (np.einsum("mkv,mgv->mgk", d, sig) + p.eps_perm * efield
                 + state.P[:, None, :])
        return eps, efield, sig, edisp

    def element_averages(self, state: FEState):
        eps, efield, sig, edisp = self.gauss_fields(state)
        w = self.wdet / self.vol[:, None]
        return (np.einsum("mg,mgi->mi", w, eps), np.einsum("mg,mgk->mk", w, efield),
                np.einsum("mg,mgi->mi", w, sig), np.einsum("mg,mgk->mk", w, edisp))


def surface_load_vector(mesh: Mesh, quads: np.ndarray, traction: np.ndarray) -> np.ndarray:
    """Consistent nodal forces for a constant traction on bilinear quads."""
    forces = np.zeros(3 * mesh.n_nodes)
    if quads.size == 0:
        return forces
    g = 1.0 / np.sqrt(3.0)
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    traction = np.asarray(traction, dtype=float)
    for quad in quads:
        x = mesh.nodes[quad]
        for xi, eta in corners * g:
            n = (1 + corners[:, 0] * xi) * (1 + corners[:, 1] * eta) / 4.0
            dxi = corners[:, 0] * (1 + corners[:, 1] * eta) / 4.0
            deta = corners[:, 1] * (1 + corners[:, 0] * xi) / 4.0
            da = np.linalg.norm(np.cross(dxi @ x, deta @ x))
            for a in range(4):
                forces[3 * quad[a]: 3 * quad[a] + 3] += n[a] * da * traction
    return forces


class FEAssembly:
    """Residual and Jacobian of the monolithic system for fixed active sets."""

    def __init__(self, model: FEModel, prev_P: np.ndarray, active_P: np.ndarray,
                 active_S: np.ndarray, controls: StepControls):
        if np.any(active_S & ~active_P):
            raise ValueError("saturation set must be a subset of the switching set")
        self.model = model
        self.prev_P = prev_P
        self.active_P = active_P
        self.active_S = active_S
        self.controls = controls
        mesh = model.mesh
        self.n_u = 3 * mesh.n_nodes
        self.n_phi = mesh.n_nodes
        self.act = np.flatnonzero(active_P)
        self.sat = np.flatnonzero(active_S)
        n_ext = self.n_u + self.n_phi
        # internal unknowns: per switching-active element [P(3), lam_P],
        # then one lam_S per saturated element
        self.p_cols = n_ext + 4 * np.arange(self.act.size)[:, None] + np.arange(3)[None, :]
        self.lamp_cols = n_ext + 4 * np.arange(self.act.size) + 3
        base = n_ext + 4 * self.act.size
        self.lams_cols = base + np.arange(self.sat.size)
        self.n_total = base + self.sat.size
        self.sat_slot = np.full(mesh.n_elems, -1, dtype=int)
        self.sat_slot[self.sat] = np.arange(self.sat.size)

        self.f_ext = np.zeros(self.n_u)
        for quads, trac in controls.tractions:
            self.f_ext += surface_load_vector(mesh, quads, trac)

        fixed = np.zeros(self.n_total, dtype=bool)
        fixed[controls.fixed_u[0]] = True
        fixed[self.n_u + np.asarray(controls.fixed_phi[0], dtype=int)] = True
        self.free = ~fixed

    def pack(self, state: FEState) -> np.ndarray:
        p = self.model.params
        x = np.zeros(self.n_total)
        x[:self.n_u] = state.u
        x[self.n_u:self.n_u + self.n_phi] = state.phi
        x[self.p_cols] = state.P[self.act] / p.P_sat
        x[self.lamp_cols] = state.lam_P[self.act] / p.P_sat
        x[self.lams_cols] = state.lam_S[self.sat] / p.E_C
        return x

    def unpack(self, x: np.ndarray, template: FEState) -> FEState:
        p = self.model.params
        out = template.copy()
        out.u = x[:self.n_u].copy()
        out.phi = x[self.n_u:self.n_u + self.n_phi].copy()
        out.P = self.prev_P.copy()
        out.P[self.act] = x[self.p_cols] * p.P_sat
        out.lam_P = np.zeros(self.model.mesh.n_elems)
        out.lam_P[self.act] = x[self.lamp_cols] * p.P_sat
        out.lam_S = np.zeros(self.model.mesh.n_elems)
        out.lam_S[self.sat] = x[self.lams_cols] * p.E_C
        out.active_P = self.active_P.copy()
        out.active_S = self.active_S.copy()
        return out

    def apply_dirichlet(self, x: np.ndarray) -> np.ndarray:
        x = x.copy()
        x[np.asarray(self.controls.fixed_u[0], dtype=int)] = self.controls.fixed_u[1]
        x[self.n_u + np.asarray(self.controls.fixed_phi[0], dtype=int)] = self.controls.fixed_phi[1]
        return x

    def _element_state(self, x):
        p = self.model.params
        u = x[:self.n_u]
        phi = x[self.n_u:self.n_u + self.n_phi]
        P = self.prev_P.copy()
        P[self.act] = x[self.p_cols] * p.P_sat
        lam_p = x[self.lamp_cols] * p.P_sat
        lam_s = np.zeros(self.model.mesh.n_elems)
        lam_s[self.sat] = x[self.lams_cols] * p.E_C
        return u, phi, P, lam_p, lam_s

    def residual(self, x: np.ndarray) -> np.ndarray:
        model, p = self.model, self.model.params
        u, phi, P, lam_p, lam_s = self._element_state(x)
        mesh = model.mesh
        ue = u[model.edof_u]
        phie = phi[mesh.elems]
        eps = np.einsum("mgia,ma->mgi", model.B, ue)
        efield = -np.einsum("mgkn,mn->mgk", model.G, phie)
        d, eps_i, _, _ = model._coupling_arrays(P)
        eps_el = eps - eps_i[:, None, :] - np.einsum("mkv,mgk->mgv", d, efield)
        sig = np.einsum("ij,mgj->mgi", p.C_E, eps_el)
        edisp = (np.einsum("mkv,mgv->mgk", d, sig) + p.eps_perm * efield
                 + P[:, None, :])

        r = np.zeros(self.n_total)
        r_u = np.einsum("mg,mgia,mgi->ma", model.wdet, model.B, sig)
        np.add.at(r, model.edof_u.ravel(), r_u.ravel())
        r[:self.n_u] -= self.f_ext
        r_phi = np.einsum("mg,mgkn,mgk->mn", model.wdet, model.G, edisp)
        np.add.at(r, model.edof_phi.ravel(), r_phi.ravel())

        if self.act.size:
            w = model.wdet / model.vol[:, None]
            sig_bar = np.einsum("mg,mgi->mi", w, sig)[self.act]
            e_bar = np.einsum("mg,mgk->mk", w, efield)[self.act]
            ehat = mat.driving_force(sig_bar, e_bar, P[self.act], lam_s[self.act],
                                     p, model.settings.reg)
            norm = np.linalg.norm(ehat, axis=1)
            if np.any(norm < 1e-12 * p.E_C):
                bad = self.act[norm < 1e-12 * p.E_C]
                raise RuntimeError(f"degenerate driving direction in elements {bad}")
            g_dir = ehat / norm[:, None]
            r[self.p_cols.ravel()] = ((P[self.act] - self.prev_P[self.act]
                                       - lam_p[:, None] * g_dir) / p.P_sat).ravel()
            r[self.lamp_cols] = (norm - p.E_C) / p.E_C
            if self.sat.size:
                r[self.lams_cols] = (np.linalg.norm(P[self.sat], axis=1) - p.P_sat) / p.P_sat
        return r

    def jacobian(self, x: np.ndarray) -> sp.csc_matrix:
        model, p = self.model, self.model.params
        u, phi, P, lam_p, lam_s = self._element_state(x)
        mesh = model.mesh
        ue = u[model.edof_u]
        phie = phi[mesh.elems]
        efield = -np.einsum("mgkn,mn->mgk", model.G, phie)
        d, eps_i, dd_red, de_red = model._coupling_arrays(P)
        eps = np.einsum("mgia,ma->mgi", model.B, ue)
        eps_el = eps - eps_i[:, None, :] - np.einsum("mkv,mgk->mgv", d, efield)
        sig = np.einsum("ij,mgj->mgi", p.C_E, eps_el)

        rows, cols, vals = [], [], []

        def add_block(r_idx, c_idx, block):
            rr = np.broadcast_to(np.asarray(r_idx)[..., :, None], block.shape)
            cc = np.broadcast_to(np.asarray(c_idx)[..., None, :], block.shape)
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(np.ascontiguousarray(block).ravel())

        cdt = np.einsum("ij,mkj->mik", p.C_E, d)                      # (M, 6, 3)
        k_uphi = np.einsum("mg,mgia,mik,mgkb->mab", model.wdet, model.B, cdt, model.G)
        dc = np.einsum("mki,ij->mkj", d, p.C_E)                       # (M, 3, 6)
        k_phiu = np.einsum("mg,mgkn,mki,mgia->mna", model.wdet, model.G, dc, model.B)
        m3 = p.eps_perm * np.eye(3)[None, :, :] - np.einsum("mkv,vw,mlw->mkl", d, p.C_E, d)
        k_phiphi = -np.einsum("mg,mgkn,mkl,mglb->mnb", model.wdet, model.G, m3, model.G)

        add_block(model.edof_u, model.edof_u, model.K_uu)
        add_block(model.edof_u, model.edof_phi, k_uphi)
        add_block(model.edof_phi, model.edof_u, k_phiu)
        add_block(model.edof_phi, model.edof_phi, k_phiphi)

        if self.act.size:
            a = self.act
            w = model.wdet / model.vol[:, None]
            sig_bar = np.einsum("mg,mgi->mi", w, sig)[a]
            e_bar = np.einsum("mg,mgk->mk", w, efield)[a]
            p_act = P[a]
            lam_s_act = lam_s[a]

            # stress sensitivity to the element polarization at each gp
            theta_g = de_red[a][:, None, :, :] + np.einsum(
                "akvl,agk->agvl", dd_red[a], efield[a])                # (A, gp, 6, 3)
            sig_p = -np.einsum("ij,agjl->agil", p.C_E, theta_g)
            k_up = np.einsum("ag,agix,agil->axl", model.wdet[a], model.B[a], sig_p)
            dd_sig = np.einsum("akvl,agv->agkl", dd_red[a], sig[a])
            d_sigp = np.einsum("akv,agvl->agkl", d[a], sig_p)
            ddisp_dp = dd_sig + d_sigp + np.eye(3)[None, None, :, :]
            k_phip = np.einsum("ag,agkn,agkl->anl", model.wdet[a], model.G[a], ddisp_dp)
            add_block(model.edof_u[a], self.p_cols, k_up * p.P_sat)
            add_block(model.edof_phi[a], self.p_cols, k_phip * p.P_sat)

            ehat = mat.driving_force(sig_bar, e_bar, p_act, lam_s_act, p, model.settings.reg)
            norm = np.linalg.norm(ehat, axis=1)
            g_dir = ehat / norm[:, None]
            d_dp, d_dsig, d_de, d_dlam = mat.driving_force_partials(
                sig_bar, e_bar, p_act, lam_s_act, p, model.settings.reg)
            theta_bar = de_red[a] + np.einsum("akvl,ak->avl", dd_red[a], e_bar)
            bbar = model.Bbar[a]
            gbar = model.Gbar[a]
            de_du = np.einsum("alv,vw,awb->alb", d_dsig, p.C_E, bbar)   # (A, 3, 24)
            dsig_dphi = np.einsum("ij,akj,akn->ain", p.C_E, d[a], gbar)  # (A, 6, 8)
            de_dphi = (-np.einsum("alk,akn->aln", d_de, gbar)
                       + np.einsum("alv,avn->aln", d_dsig, dsig_dphi))
            de_dp_tot = d_dp - np.einsum("alv,vw,awq->alq", d_dsig, p.C_E, theta_bar)

            proj = (np.eye(3)[None, :, :]
                    - np.einsum("al,aq->alq", g_dir, g_dir)) / norm[:, None, None]

            row_p = self.p_cols
            blk = -lam_p[:, None, None] * np.einsum("alq,aqb->alb", proj, de_du) / p.P_sat
            add_block(row_p, model.edof_u[a], blk)
            blk = -lam_p[:, None, None] * np.einsum("alq,aqb->alb", proj, de_dphi) / p.P_sat
            add_block(row_p, model.edof_phi[a], blk)
            blk = (np.broadcast_to(np.eye(3), (a.size, 3, 3)).copy()
                   - lam_p[:, None, None]
                   * np.einsum("alq,aqr->alr", proj, de_dp_tot))
            add_block(row_p, self.p_cols, blk)
            add_block(row_p, self.lamp_cols[:, None], -g_dir[:, :, None])

            row_fp = self.lamp_cols[:, None]
            add_block(row_fp, model.edof_u[a],
                      np.einsum("al,alb->ab", g_dir, de_du)[:, None, :] / p.E_C)
            add_block(row_fp, model.edof_phi[a],
                      np.einsum("al,aln->an", g_dir, de_dphi)[:, None, :] / p.E_C)
            add_block(row_fp, self.p_cols,
                      np.einsum("al,alq->aq", g_dir, de_dp_tot)[:, None, :]
                      * (p.P_sat / p.E_C))

            has_s = self.sat_slot[a] >= 0
            if np.any(has_s):
                asub = np.flatnonzero(has_s)
                lams_cols = self.lams_cols[self.sat_slot[a[asub]]]
                dehat_dlam = d_dlam[asub] * p.E_C                      # lam_S column scale
                blk = -lam_p[asub, None] * np.einsum(
                    "alq,aq->al", proj[asub], dehat_dlam) / p.P_sat
                add_block(row_p[asub], lams_cols[:, None], blk[:, :, None])
                add_block(row_fp[asub], lams_cols[:, None],
                          np.einsum("al,al->a", g_dir[asub], dehat_dlam)[:, None, None]
                          / p.E_C)
                pn = np.linalg.norm(p_act[asub], axis=1)
                e_unit = p_act[asub] / pn[:, None]
                add_block(lams_cols[:, None], row_p[asub], e_unit[:, None, :])

        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        return sp.coo_matrix((vals, (rows, cols)),
                             shape=(self.n_total, self.n_total)).tocsc()


def _scaled_norm(assembly: FEAssembly, r: np.ndarray) -> float:
    model = assembly.model
    free = assembly.free
    n_u, n_phi = assembly.n_u, assembly.n_phi
    r_u = r[:n_u][free[:n_u]]
    r_q = r[n_u:n_u + n_phi][free[n_u:n_u + n_phi]]
    r_i = r[n_u + n_phi:]
    out = 0.0
    if r_u.size:
        out = max(out, np.abs(r_u).max() / model.force_char)
    if r_q.size:
        out = max(out, np.abs(r_q).max() / model.charge_char)
    if r_i.size:
        out = max(out, np.abs(r_i).max())
    return out


def newton_solve_global(model: FEModel, state: FEState, prev_P: np.ndarray,
                        controls: StepControls, tol: Optional[float] = None,
                        max_iter: int = 30):
    """Monolithic Newton solve with the active sets held fixed."""
    s = model.settings
    tol = tol if tol is not None else max(s.newton_tol, 1e-13) * 10.0
    assembly = FEAssembly(model, prev_P, state.active_P, state.active_S, controls)
    x = assembly.apply_dirichlet(assembly.pack(state))
    free = assembly.free
    r = assembly.residual(x)
    iters = 0
    for _ in range(max_iter):
        res = _scaled_norm(assembly, r)
        if res <= tol:
            return assembly.unpack(x, state), True, iters, res
        jac = assembly.jacobian(x)[free][:, free].tocsc()
        try:
            lu = splu(jac)
        except RuntimeError as exc:
            raise RuntimeError(
                "singular coupled system; check Dirichlet constraints") from exc
        dx = np.zeros_like(x)
        dx[free] = lu.solve(-r[free])
        base = res
        step = 1.0
        r_new = r
        for _ in range(12):
            r_new = assembly.residual(x + step * dx)
            new_norm = _scaled_norm(assembly, r_new)
            if new_norm <= base or new_norm <= tol:
                break
            step *= 0.5
        x = x + step * dx
        r = r_new
        iters += 1
    res = _scaled_norm(assembly, r)
    return assembly.unpack(x, state), res <= tol, iters, res


def update_element_sets(model: FEModel, state: FEState):
    """Per-element active-set adjustment from a converged solve."""
    p, s = model.params, model.settings
    delta_p = s.resolved_delta_P(p)
    delta_s = s.resolved_delta_S(p)
    _, e_bar, sig_bar, _ = model.element_averages(state)
    lam_s_eff = np.where(state.active_S, state.lam_S, 0.0)
    ehat = mat.driving_force(sig_bar, e_bar, state.P, lam_s_eff, p, s.reg)
    f_p = mat.switching_fn(ehat, p)
    f_s = mat.saturation_fn(state.P, p)
    a_p, a_s = state.active_P, state.active_S
    remove_p = a_p & ~a_s & (state.lam_P < delta_s)
    add_p = ~a_p & (f_p > delta_p)
    new_p = (a_p & ~remove_p) | add_p
    add_s = ~a_s & new_p & (f_s > delta_s)
    remove_s = a_s & (state.lam_S < delta_p)
    new_s = (a_s & ~remove_s) | add_s
    changed = bool(np.any(new_p != a_p) or np.any(new_s != a_s))
    return new_p, new_s, changed


def solve_step(model: FEModel, state: FEState, controls: StepControls,
               max_loops: Optional[int] = None) -> Tuple[FEState, Dict]:
    """One load step: element active-set loop around the monolithic Newton.

    A repeating set configuration means one or more marginal elements chatter
    between the add and remove offsets.  In that case the union of the cycling
    sets is enforced and accepted if the resulting multipliers are
    sign-feasible; the enforced-active configuration satisfies the conditions
    exactly where the chattering inactive one violates them marginally.
    """
    s = model.settings
    max_loops = max_loops or s.max_active_loops
    prev_P = state.P.copy()
    work = state.copy()
    work.active_P[:] = False
    work.active_S[:] = False
    work.lam_P[:] = 0.0
    work.lam_S[:] = 0.0
    loops = 0
    total_iters = 0
    history = []
    seen = {(work.active_P.tobytes(), work.active_S.tobytes())}
    res = np.inf
    settled = False
    forced = False
    while loops < max_loops:
        loops += 1
        work, converged, iters, res = newton_solve_global(model, work, prev_P, controls)
        total_iters += iters
        if not converged:
            raise RuntimeError(
                f"global Newton stalled at scaled residual {res:.3e} in loop {loops}")
        history.append((int(work.active_P.sum()), int(work.active_S.sum())))
        if forced:
            feasible = (np.all(work.lam_P[work.active_P] >= -s.resolved_delta_S(model.params))
                        and np.all(work.lam_S[work.active_S] >= -s.resolved_delta_P(model.params)))
            if not feasible:
                raise RuntimeError(
                    f"cycling active sets with infeasible multipliers: history {history}")
            settled = True
            break
        new_p, new_s, changed = update_element_sets(model, work)
        if not changed:
            settled = True
            break
        key = (new_p.tobytes(), new_s.tobytes())
        if key in seen:
            new_p = work.active_P | new_p
            new_s = (work.active_S | new_s) & new_p
            forced = True
        seen.add(key)
        work.active_P = new_p
        work.active_S = new_s
        work.lam_P[~new_p] = 0.0
        work.lam_S[~new_s] = 0.0
    if not settled:
        raise RuntimeError(f"element active sets did not settle: history {history}")

    _, e_bar, sig_bar, _ = model.element_averages(work)
    lam_s_eff = np.where(work.active_S, work.lam_S, 0.0)
    ehat = mat.driving_force(sig_bar, e_bar, work.P, lam_s_eff, model.params,
                             model.settings.reg)
    diss = float(np.einsum("m,mk,mk->", model.vol, ehat, work.P - prev_P))
    report = {
        "loops": loops,
        "newton_iters": total_iters,
        "residual": res,
        "dissipation": diss,
        "active_P": int(work.active_P.sum()),
        "active_S": int(work.active_S.sum()),
        "history": history,
    }
    return work, report


def recover_fields(model: FEModel, state: FEState) -> Dict[str, np.ndarray]:
    """Per-element volume averages of the recovered fields."""
    eps, efield, sig, edisp = model.element_averages(state)
    return {"strain": eps, "efield": efield, "stress": sig, "edisp": edisp,
            "P": state.P.copy()}


def write_vtk(path, mesh: Mesh, point_data: Dict[str, np.ndarray],
              cell_data: Dict[str, np.ndarray], title: str = "coupled fields") -> None:
    """Legacy ASCII VTK unstructured-grid writer (hex cells only)."""
    def fmt(v):
        return f"{v:.9e}"

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title + "\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for x in mesh.nodes:
            fh.write(" ".join(fmt(v) for v in x) + "\n")
        fh.write(f"CELLS {mesh.n_elems} {9 * mesh.n_elems}\n")
        for conn in mesh.elems:
            fh.write("8 " + " ".join(str(int(n)) for n in conn) + "\n")
        fh.write(f"CELL_TYPES {mesh.n_elems}\n")
        for _ in range(mesh.n_elems):
            fh.write("12\n")
        if point_data:
            fh.write(f"POINT_DATA {mesh.n_nodes}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr)
                if arr.ndim == 1:
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in arr:
                        fh.write(fmt(v) + "\n")
                else:
                    fh.write(f"VECTORS {name} double\n")
                    for v in arr:
                        fh.write(" ".join(fmt(c) for c in v) + "\n")
        if cell_data:
            fh.write(f"CELL_DATA {mesh.n_elems}\n")
            for name, arr in cell_data.items():
                arr = np.asarray(arr)
                if arr.ndim == 1:
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in arr:
                        fh.write(fmt(v) + "\n")
                elif arr.shape[1] == 3:
                    fh.write(f"VECTORS {name} double\n")
                    for v in arr:
                        fh.write(" ".join(fmt(c) for c in v) + "\n")
                else:
                    fh.write(f"SCALARS {name} double {arr.shape[1]}\n"
                             "LOOKUP_TABLE default\n")
                    for v in arr:
                        fh.write(" ".join(fmt(c) for c in v) + "\n")
