"""Constitutive mappings for density-dependent brittle bone.

Units are mm / N / MPa throughout; densities in g/cm^3.  Strain arguments
are full symmetric ``(..., 3, 3)`` tensors so every function vectorises over
leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# rho_ash = 0.877 * 1.15 * rho_K2HPO4 + 0.08
ASH_SLOPE = 0.877 * 1.15
ASH_OFFSET = 0.08

CORTICAL_THRESHOLD = 0.486
TRABECULAR_THRESHOLD = 0.3
E_PLATEAU = 2398.0

NU = 0.3
GC0 = 7.0
E0 = 20000.0
BETA = 0.8
ETA = 1.0e-5


def hu_to_k2hpo4(hu, slope: float, intercept: float):
    """Scanner calibration: equivalent K2HPO4 mineral density from HU."""
    return slope * np.asarray(hu, dtype=float) + intercept


def hu_to_ash(rho_k2hpo4):
    """Ash density from K2HPO4-equivalent density; negative inputs clamp to 0."""
    rho = np.maximum(np.asarray(rho_k2hpo4, dtype=float), 0.0)
    out = ASH_SLOPE * rho + ASH_OFFSET
    return float(out) if out.ndim == 0 else out


def ash_to_E(rho_ash):
    """Young's modulus [MPa] from ash density (cortical / plateau / trabecular branches)."""
    rho = np.maximum(np.asarray(rho_ash, dtype=float), 0.0)
    E = np.where(
        rho > CORTICAL_THRESHOLD,
        10200.0 * rho**2.01,
        np.where(rho > TRABECULAR_THRESHOLD, E_PLATEAU, 33900.0 * rho**2.2),
    )
    return float(E) if E.ndim == 0 else E


def E_to_ash(E):
    """A density that maps back to ``E`` under :func:`ash_to_E`.

    Moduli above the cortical law's value at the branch threshold use the
    cortical branch, smaller ones the low-density trabecular branch.
    """
    E = np.asarray(E, dtype=float)
    e_cort_min = 10200.0 * CORTICAL_THRESHOLD**2.01
    rho = np.where(E > e_cort_min, (E / 10200.0) ** (1 / 2.01), (E / 33900.0) ** (1 / 2.2))
    return float(rho) if rho.ndim == 0 else rho


def E_to_Gc(E, gc0: float = GC0, e0: float = E0, beta: float = BETA):
    """Critical energy release rate [N/mm] as a power law of the local modulus."""
    if not (gc0 > 0 and e0 > 0):
        raise ValueError("Gc0 and E0 must be positive")
    E = np.asarray(E, dtype=float)
    out = gc0 * (E / e0) ** beta
    return float(out) if out.ndim == 0 else out


def lame(E, nu: float = NU):
    """First Lame parameter and shear modulus."""
    E = np.asarray(E, dtype=float)
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    return lam, mu


def bulk_modulus(lam, mu):
    return lam + 2.0 * mu / 3.0


@dataclass(frozen=True)
class MaterialPoint:
    E: float
    nu: float
    lam: float
    mu: float
    kappa: float
    Gc: float
    rho_ash: float = float("nan")

    @classmethod
    def from_ash(cls, rho_ash, nu=NU, gc0=GC0, e0=E0, beta=BETA):
        E = ash_to_E(rho_ash)
        return cls.from_E(E, nu, E_to_Gc(E, gc0, e0, beta), rho_ash)

    @classmethod
    def from_E(cls, E, nu=NU, Gc=GC0, rho_ash=float("nan")):
        if not E > 0:
            raise ValueError("Young's modulus must be positive")
        if not 0 < nu < 0.5:
            raise ValueError("Poisson ratio must lie in (0, 0.5)")
        lam, mu = lame(E, nu)
        return cls(float(E), float(nu), float(lam), float(mu), float(bulk_modulus(lam, mu)), float(Gc), float(rho_ash))


@dataclass(frozen=True)
class MaterialLaw:
    """Parameters of the image-to-material chain."""

    gc0: float = GC0
    e0: float = E0
    beta: float = BETA
    nu: float = NU
    hu_slope: float | None = None
    hu_intercept: float | None = None
    fracture: bool = True


@dataclass(frozen=True, eq=False)
class MaterialField:
    """Per-voxel material arrays (x-fastest voxel order)."""

    rho_ash: np.ndarray
    E: np.ndarray
    nu: float
    lam: np.ndarray
    mu: np.ndarray
    kappa: np.ndarray
    Gc: np.ndarray

    def at(self, index) -> MaterialPoint:
        i = int(index)
        return MaterialPoint(float(self.E[i]), self.nu, float(self.lam[i]), float(self.mu[i]),
                             float(self.kappa[i]), float(self.Gc[i]), float(self.rho_ash[i]))


def image_to_ash(image, law: MaterialLaw | None = None) -> np.ndarray:
    """Ash density per voxel (x-fastest) following the image ``kind``."""
    law = law or MaterialLaw()
    vals = image.flat_values()
    if image.kind == "rho_ash":
        return np.maximum(vals, 0.0)
    if image.kind == "hu":
        cal = (law.hu_slope, law.hu_intercept)
        if cal[0] is None or cal[1] is None:
            cal = image.hu_calibration
        if cal is None or cal[0] is None:
            raise ValueError("HU image requires calibration coefficients (hu_slope, hu_intercept)")
        vals = hu_to_k2hpo4(vals, *cal)
    return hu_to_ash(vals)


def material_field(image, law: MaterialLaw | None = None) -> MaterialField:
    """Per-voxel material from the image.

    Voxels outside the image mask carry the fictitious-domain reference
    material: the densest inside voxel (its stiffness is later scaled by
    ``alpha_fcm``).  Their image values are ignored, so a zero-valued void
    still gets positive ``E`` and ``Gc``.
    """
    law = law or MaterialLaw()
    rho = image_to_ash(image, law)
    inside = image.flat_inside()
    if inside.any() and not inside.all():
        rho = np.where(inside, rho, rho[inside].max())
    E = ash_to_E(rho)
    lam, mu = lame(E, law.nu)
    Gc = E_to_Gc(E, law.gc0, law.e0, law.beta) if law.fracture else np.full_like(E, np.inf)
    return MaterialField(rho, E, float(law.nu), lam, mu, bulk_modulus(lam, mu), Gc)


# ---------------------------------------------------------------------------
# energies and stresses
# ---------------------------------------------------------------------------

def degradation(s, eta: float = ETA):
    return (1.0 - eta) * np.asarray(s, dtype=float) ** 2 + eta


def degradation_derivative(s, eta: float = ETA):
    return 2.0 * (1.0 - eta) * np.asarray(s, dtype=float)


def dissipation(s):
    return 1.0 - np.asarray(s, dtype=float) ** 2


def macaulay_pos(x):
    return 0.5 * (x + np.abs(x))


def macaulay_neg(x):
    return 0.5 * (x - np.abs(x))


def _trace_dev(eps):
    eps = np.asarray(eps, dtype=float)
    tr = np.trace(eps, axis1=-2, axis2=-1)
    dev = eps - (tr / 3.0)[..., None, None] * np.eye(3)
    return tr, dev


@dataclass(frozen=True, eq=False)
class SplitEnergies:
    psi_pos: np.ndarray
    psi_neg: np.ndarray
    sigma: np.ndarray  # undegraded stress, positive + negative parts


def split_energy(eps, kappa, mu) -> SplitEnergies:
    """Volumetric-deviatoric split: tension volume and deviator positive, compression volume negative."""
    tr, dev = _trace_dev(eps)
    kappa = np.asarray(kappa, dtype=float)
    mu = np.asarray(mu, dtype=float)
    tp, tn = macaulay_pos(tr), macaulay_neg(tr)
    devdev = np.einsum("...ij,...ij->...", dev, dev)
    psi_pos = 0.5 * kappa * tp**2 + mu * devdev
    psi_neg = 0.5 * kappa * tn**2
    eye = np.eye(3)
    sigma = (kappa * tr)[..., None, None] * eye + 2.0 * mu[..., None, None] * dev
    return SplitEnergies(psi_pos, psi_neg, sigma)


def positive_energy(eps, kappa, mu):
    tr, dev = _trace_dev(eps)
    return 0.5 * kappa * macaulay_pos(tr) ** 2 + mu * np.einsum("...ij,...ij->...", dev, dev)


def isotropic_energy(eps, lam, mu):
    eps = np.asarray(eps, dtype=float)
    tr = np.trace(eps, axis1=-2, axis2=-1)
    return 0.5 * lam * tr**2 + mu * np.einsum("...ij,...ij->...", eps, eps)


def degraded_stress(eps, s, kappa, mu, eta: float = ETA):
    """Stress of ``g(s) psi_pos + psi_neg``; compressive volume change is never degraded."""
    tr, dev = _trace_dev(eps)
    g = degradation(s, eta)
    kappa = np.asarray(kappa, dtype=float)
    mu = np.asarray(mu, dtype=float)
    eye = np.eye(3)
    vol = (g * kappa * macaulay_pos(tr) + kappa * macaulay_neg(tr))[..., None, None] * eye
    return vol + (2.0 * g * mu)[..., None, None] * dev


def tangent_moduli(tr, s, kappa, mu, eta: float = ETA):
    """Effective ``(lambda', mu')`` of the piecewise-linear split law at trace ``tr``.

    ``sigma = lambda' tr(eps) I + 2 mu' eps`` holds exactly on each side of
    ``tr = 0`` so these are both secant and tangent moduli.
    """
    g = degradation(s, eta)
    k_eff = np.where(tr > 0, g * kappa, kappa)
    mu_eff = g * mu
    return k_eff - 2.0 * mu_eff / 3.0, mu_eff
