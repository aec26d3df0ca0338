"""Reduced-notation algebra for the small symmetric tensors of electromechanics.

Conventions, fixed package-wide:

* Component order for symmetric rank-2 tensors is ``(11, 22, 33, 23, 13, 12)``.
* Strain-like 6-vectors carry engineering shears (``2*eps_23`` etc.); stress-like
  6-vectors carry true shear components.  With this split the plain dot product
  of a stress 6-vector and a strain 6-vector equals the physical double
  contraction ``sigma_ij eps_ij``, so no stray factors appear in energies.
* Piezoelectric coupling arrays are stored ``(3, 6)`` with doubled shear
  columns; the same array then maps a stress 6-vector to a 3-vector and, via
  its transpose, a 3-vector to an engineering-shear strain 6-vector.
* Rank-4 moduli are ``(6, 6)`` with major symmetry.  A compliance matrix maps
  stress 6-vectors to strain 6-vectors; a stiffness matrix maps the other way.

Dense ``3x3``, ``3x3x3`` and ``3x3x3x3`` forms are provided for cross-checks
against brute-force index contractions; the reduced form is what the solvers
use.
"""

from __future__ import annotations

import numpy as np

# (i, j) index pairs behind each reduced slot, 0-based.
VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))

# 1 for normal slots, 2 for shear slots (the engineering-strain doubling).
VOIGT_WEIGHTS = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


def stress_to_reduced(sig: np.ndarray) -> np.ndarray:
    """3x3 symmetric stress -> 6-vector with true shear components."""
    sig = np.asarray(sig, dtype=float)
    return np.array([sig[i, j] for i, j in VOIGT_PAIRS])


def reduced_to_stress(s6: np.ndarray) -> np.ndarray:
    """Stress 6-vector -> full symmetric 3x3 matrix."""
    s6 = np.asarray(s6, dtype=float)
    full = np.zeros((3, 3))
    for m, (i, j) in enumerate(VOIGT_PAIRS):
        full[i, j] = s6[m]
        full[j, i] = s6[m]
    return full


def strain_to_reduced(eps: np.ndarray) -> np.ndarray:
    """3x3 symmetric strain -> 6-vector with engineering (doubled) shears."""
    eps = np.asarray(eps, dtype=float)
    return np.array([VOIGT_WEIGHTS[m] * eps[i, j] for m, (i, j) in enumerate(VOIGT_PAIRS)])


def reduced_to_strain(e6: np.ndarray) -> np.ndarray:
    """Engineering-shear strain 6-vector -> full symmetric 3x3 matrix."""
    e6 = np.asarray(e6, dtype=float)
    full = np.zeros((3, 3))
    for m, (i, j) in enumerate(VOIGT_PAIRS):
        full[i, j] = e6[m] / VOIGT_WEIGHTS[m]
        full[j, i] = full[i, j]
    return full


def piezo_to_full(d: np.ndarray) -> np.ndarray:
    """(3, 6) reduced coupling array -> dense d[k, j, i], symmetric in (j, i).

    Shear columns are halved when expanded so that the dense array reproduces
    the tensor components themselves.
    """
    d = np.asarray(d, dtype=float)
    full = np.zeros(d.shape[:-2] + (3, 3, 3))
    for m, (i, j) in enumerate(VOIGT_PAIRS):
        full[..., :, j, i] = d[..., :, m] / VOIGT_WEIGHTS[m]
        full[..., :, i, j] = d[..., :, m] / VOIGT_WEIGHTS[m]
    return full


def piezo_from_full(full: np.ndarray) -> np.ndarray:
    """Dense d[k, j, i] -> (3, 6) reduced array with doubled shear columns."""
    full = np.asarray(full, dtype=float)
    out = np.zeros(full.shape[:-3] + (3, 6))
    for m, (i, j) in enumerate(VOIGT_PAIRS):
        out[..., :, m] = VOIGT_WEIGHTS[m] * full[..., :, j, i]
    return out


def compliance_to_full(s66: np.ndarray) -> np.ndarray:
    """(6, 6) compliance -> dense S[i, j, k, l] with all minor/major symmetries."""
    s66 = np.asarray(s66, dtype=float)
    full = np.zeros((3, 3, 3, 3))
    for m, (i, j) in enumerate(VOIGT_PAIRS):
        for n, (k, l) in enumerate(VOIGT_PAIRS):
            val = s66[m, n] / (VOIGT_WEIGHTS[m] * VOIGT_WEIGHTS[n])
            for a, b in ((i, j), (j, i)):
                for c, e in ((k, l), (l, k)):
                    full[a, b, c, e] = val
    return full


def stiffness_to_full(c66: np.ndarray) -> np.ndarray:
    """(6, 6) stiffness -> dense C[i, j, k, l]."""
    c66 = np.asarray(c66, dtype=float)
    full = np.zeros((3, 3, 3, 3))
    for m, (i, j) in enumerate(VOIGT_PAIRS):
        for n, (k, l) in enumerate(VOIGT_PAIRS):
            for a, b in ((i, j), (j, i)):
                for c, e in ((k, l), (l, k)):
                    full[a, b, c, e] = c66[m, n]
    return full


def isotropic_compliance(young: float, poisson: float) -> np.ndarray:
    """Isotropic (6, 6) compliance from Young's modulus and Poisson's ratio.

    Raises ValueError for a non-positive modulus or a Poisson ratio outside
    the open interval (-1, 0.5).
    """
    if not young > 0.0:
        raise ValueError(f"Young's modulus must be positive, got {young!r}")
    if not -1.0 < poisson < 0.5:
        raise ValueError(f"Poisson's ratio must lie in (-1, 0.5), got {poisson!r}")
    s = np.zeros((6, 6))
    s[:3, :3] = -poisson / young
    np.fill_diagonal(s[:3, :3], 1.0 / young)
    shear = 2.0 * (1.0 + poisson) / young  # engineering shear strain per shear stress
    s[3, 3] = s[4, 4] = s[5, 5] = shear
    return s


def isotropic_stiffness(young: float, poisson: float) -> np.ndarray:
    """Isotropic (6, 6) stiffness, the exact inverse of ``isotropic_compliance``."""
    s = isotropic_compliance(young, poisson)
    return np.linalg.inv(s)


def apply_rank4(m66: np.ndarray, v6: np.ndarray) -> np.ndarray:
    """Apply a reduced rank-4 modulus to a reduced rank-2 tensor."""
    return np.asarray(m66) @ np.asarray(v6)


def apply_piezo(d: np.ndarray, stress6: np.ndarray) -> np.ndarray:
    """Contract the coupling array with a stress 6-vector: returns a 3-vector."""
    return np.asarray(d) @ np.asarray(stress6)


def apply_piezo_t(d: np.ndarray, efield: np.ndarray) -> np.ndarray:
    """Contract a 3-vector with the coupling array: returns a strain-like 6-vector."""
    return np.asarray(d).T @ np.asarray(efield)
