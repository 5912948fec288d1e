"""Dill exposure model: inhibitor bleaching under Beer-Lambert absorption.

The normalized system is

    dI/dz = -I (A M + B)        I(0, t) = R
    dM/dt = -C I M              M(z, 0) = 1

with exposure time folded into ``C_eff``.  Solving to ``t = 1`` gives the
fractional inhibitor concentration left in the film.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .grids import Field2D, Field3D


@dataclass(frozen=True)
class ExposureParams:
    """Absorption (1/nm), dose constant and vertical discretization."""

    A: float = 0.0
    B: float = 0.005
    C_eff: float = 1.0
    thickness_nm: float = 75.0
    nz: int = 26

    def __post_init__(self):
        if self.A < 0 or self.B < 0:
            raise InvalidArgument("absorption coefficients A, B must be >= 0")
        if not self.C_eff > 0:
            raise InvalidArgument(f"C_eff must be positive, got {self.C_eff}")
        if not self.thickness_nm > 0:
            raise InvalidArgument(f"thickness must be positive, got {self.thickness_nm}")
        if int(self.nz) != self.nz or self.nz < 2:
            raise InvalidArgument(f"nz must be an integer >= 2, got {self.nz}")

    @property
    def dz_nm(self) -> float:
        return self.thickness_nm / (self.nz - 1)

    def z_nm(self) -> np.ndarray:
        return np.arange(self.nz) * self.dz_nm


def _check_aerial(aerial: Field2D) -> np.ndarray:
    r = aerial.values
    if np.any(r < 0):
        raise InvalidArgument("aerial intensity must be non-negative")
    return r


def solve_exposure_closed_form(aerial: Field2D, p: ExposureParams) -> Field3D:
    """Exact inhibitor field for a non-bleaching resist (``A == 0``).

    With ``A = 0`` the intensity no longer depends on ``M``, so
    ``M(z) = exp(-C_eff * R * exp(-B z))``.
    """
    if p.A != 0:
        raise InvalidArgument("closed form requires A == 0; use solve_exposure_general")
    r = _check_aerial(aerial)
    atten = np.exp(-p.B * p.z_nm())[:, None, None]
    m = np.exp(-p.C_eff * r[None, :, :] * atten)
    return Field3D(m, aerial.pitch_nm, p.dz_nm)


def _attenuate(r: np.ndarray, m: np.ndarray, A: float, B: float, dz: float) -> np.ndarray:
    """Integrate dI/dz = -I (A M + B) down each column.

    The absorption is treated as piecewise linear in z, so each slab applies
    its exact exponential factor; with M fixed this is exact Beer-Lambert.
    """
    out = np.empty_like(m)
    out[0] = r
    if A == 0.0:
        out[1:] = r * np.exp(-B * dz * np.arange(1, m.shape[0]))[:, None, None]
        return out
    slab = A * 0.5 * (m[1:] + m[:-1]) + B
    np.cumsum(slab, axis=0, out=out[1:])
    np.exp(-dz * out[1:], out=out[1:])
    out[1:] *= r
    return out


def solve_exposure_general(aerial: Field2D, p: ExposureParams, nt: int = 64) -> Field3D:
    """Time-march the coupled intensity/inhibitor system for any ``A >= 0``.

    Each step freezes the intensity at the step midpoint (predicted with a
    half step) and applies the exact exponential decay of ``M`` under that
    intensity. The scheme is second order in ``1/nt``.
    """
    if int(nt) != nt or nt < 2:
        raise InvalidArgument(f"nt must be an integer >= 2, got {nt}")
    r = _check_aerial(aerial)
    dz = p.dz_nm
    dc = p.C_eff / nt
    shape = (p.nz,) + r.shape
    log_m = np.zeros(shape)
    m = np.ones(shape)
    if p.A == 0.0:
        # intensity is independent of M; only the bleaching needs marching
        intensity = _attenuate(r, m, 0.0, p.B, dz)
        for _ in range(int(nt)):
            log_m -= dc * intensity
        return Field3D(np.exp(log_m), aerial.pitch_nm, dz)
    for _ in range(int(nt)):
        intensity = _attenuate(r, m, p.A, p.B, dz)
        m_half = np.exp(log_m - 0.5 * dc * intensity)
        intensity = _attenuate(r, m_half, p.A, p.B, dz)
        log_m -= dc * intensity
        np.exp(log_m, out=m)
    return Field3D(m, aerial.pitch_nm, dz)


def intensity_profile(aerial: Field2D, M: Field3D, p: ExposureParams) -> Field3D:
    """Light intensity through the film for a given inhibitor field."""
    if M.values.shape[1:] != aerial.values.shape or M.nz != p.nz:
        raise InvalidArgument(
            f"inhibitor field {M.values.shape} does not match aerial {aerial.shape} / nz={p.nz}"
        )
    if not np.isclose(M.dz_nm, p.dz_nm, rtol=1e-9):
        raise InvalidArgument("inhibitor field slice spacing does not match exposure params")
    r = _check_aerial(aerial)
    return Field3D(_attenuate(r, M.values, p.A, p.B, p.dz_nm), aerial.pitch_nm, p.dz_nm)
