"""Deterministic test and demo fields.

Smooth random fields are finite Fourier sums with skew matrix coefficients.
Planted fixtures put a localized, fixed-axis rotation bump or a rescaled
harmonic sphere into an otherwise smooth background.
"""

from __future__ import annotations

import numpy as np

from . import domain
from .domain import Grid
from .group import J2, expm, random_skew, skew_basis

ABELIAN_C = 0.5


def _modes(grid: Grid, max_mode: int):
    x1, x2 = grid.coords
    k = 2.0 * np.pi if not grid.is_square else np.pi
    out = []
    for m1 in range(max_mode + 1):
        for m2 in range(max_mode + 1):
            if m1 == m2 == 0:
                continue
            for f1 in (np.cos, np.sin):
                for f2 in (np.cos, np.sin):
                    out.append(f1(k * m1 * x1) * f2(k * m2 * x2))
    return out


def smooth_skew_field(
    grid: Grid, r: int, rng: np.random.Generator, amplitude: float = 1.0, max_mode: int = 2,
    mean: bool = True,
) -> np.ndarray:
    """Smooth skew-matrix valued field with max-norm about ``amplitude``.

    Mode ``m`` is damped by ``1/(1+|m|^2)`` so the field is dominated by the
    lowest frequencies.
    """
    field = np.zeros(grid.shape + (r, r))
    basis = _modes(grid, max_mode)
    idx = 0
    for m1 in range(max_mode + 1):
        for m2 in range(max_mode + 1):
            if m1 == m2 == 0:
                continue
            for _ in range(4):
                c = random_skew(rng, r) / (1.0 + m1 * m1 + m2 * m2)
                field += basis[idx][..., None, None] * c
                idx += 1
    if mean:
        field += random_skew(rng, r) * 0.5
    peak = float(np.max(np.abs(field)))
    return field * (amplitude / peak if peak > 0 else 0.0)


def smooth_form(grid: Grid, r: int, rng: np.random.Generator, amplitude: float = 1.0, max_mode: int = 2):
    """Smooth skew-valued one-form, shape ``(2, n, n, r, r)``."""
    return np.stack([smooth_skew_field(grid, r, rng, amplitude, max_mode) for _ in range(2)])


def smooth_gauge(grid: Grid, r: int, rng: np.random.Generator, amplitude: float = 1.0, max_mode: int = 2):
    """Smooth gauge field ``expm`` of a smooth skew field."""
    return expm(smooth_skew_field(grid, r, rng, amplitude, max_mode))


def scale_to_l2(form: np.ndarray, grid: Grid, target: float) -> np.ndarray:
    norm = domain.l2_norm(form, grid, lead=1)
    return form * (target / norm) if norm > 0 else form


def identity_field(grid: Grid, r: int) -> np.ndarray:
    return np.broadcast_to(np.eye(r), grid.shape + (r, r)).copy()


def zero_form(grid: Grid, r: int) -> np.ndarray:
    return np.zeros((2,) + grid.shape + (r, r))


def abelian_form(grid: Grid, c1, c2=0.0) -> np.ndarray:
    """``(c1 dx^1 + c2 dx^2) J`` for scalar or per-point coefficients."""
    J = J2()
    c1 = np.broadcast_to(c1, grid.shape)
    c2 = np.broadcast_to(c2, grid.shape)
    return np.stack([c1[..., None, None] * J, c2[..., None, None] * J])


def abelian_gauge(theta: np.ndarray) -> np.ndarray:
    """``exp(theta J)`` at every point."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def abelian_angle(S: np.ndarray) -> np.ndarray:
    """Rotation angle of a field of planar rotations."""
    return np.arctan2(S[..., 1, 0], S[..., 0, 0])


def abelian_mixed(grid: Grid, c: float = ABELIAN_C, s: float = 0.25):
    """Abelian connection with a gradient part and a divergence-free part.

    ``Omega = (d g + perp-grad psi) J`` with ``g = c x^1 + (c/4) sin(pi x^1) cos(pi x^2)``
    and ``psi = s sin(pi x^1) sin(pi x^2)`` vanishing on the boundary.  The
    Coulomb gauge is ``theta = -g + const`` and the potential is ``psi``.

    Returns
    -------
    Omega, g, psi
    """
    x1, x2 = grid.coords
    p = np.pi
    g = c * x1 + 0.25 * c * np.sin(p * x1) * np.cos(p * x2)
    g1 = c + 0.25 * c * p * np.cos(p * x1) * np.cos(p * x2)
    g2 = -0.25 * c * p * np.sin(p * x1) * np.sin(p * x2)
    psi = s * np.sin(p * x1) * np.sin(p * x2)
    psi1 = s * p * np.cos(p * x1) * np.sin(p * x2)
    psi2 = s * p * np.sin(p * x1) * np.cos(p * x2)
    Omega = abelian_form(grid, g1 - psi2, g2 + psi1)
    return Omega, g, psi


# ---------------------------------------------------------------------------
# planted concentrations


def bump_profile(s: np.ndarray) -> np.ndarray:
    """Compactly supported ``C^2`` profile, 1 at the origin and 0 for ``s >= 1``."""
    s = np.clip(s, 0.0, 1.0)
    return (1.0 - s * s) ** 3


def bump_energy_constant() -> float:
    """``int |grad b|^2`` over the plane for the profile ``b(|y|)``.

    ``b'(s) = -6 s (1 - s^2)^2`` so the integral is ``2 pi int_0^1 36 s^3 (1-s^2)^4 ds``
    which equals ``2 pi * 36 / 60 = 6 pi / 5``.
    """
    return 6.0 * np.pi / 5.0


def bump_axis(r: int) -> np.ndarray:
    """Unit-Frobenius rotation generator used for bumps."""
    if r == 2:
        return J2() / np.sqrt(2.0)
    return skew_basis(r)[0]


def plant_bump(S: np.ndarray, grid: Grid, center, radius: float, energy: float, axis=None) -> np.ndarray:
    """Multiply ``S`` on the right by a localized fixed-axis rotation.

    The rotation angle is ``Phi b(|x - center| / radius)`` about a unit
    generator ``K``, so the continuum Dirichlet energy ``1/2 int |d(exp)|^2``
    is ``Phi^2 * 3 pi / 5`` independently of ``radius``.  ``Phi`` is chosen
    so this equals ``energy``.  With ``A = A0 = 0`` and ``S`` constant near
    the bump, the discrete energy added is close to ``energy``.
    """
    r = S.shape[-1]
    K = bump_axis(r) if axis is None else axis
    K = K / np.linalg.norm(K)
    phi = np.sqrt(2.0 * energy / bump_energy_constant())
    prof = bump_profile(domain.distance_to(center, grid) / radius) * phi
    return S @ expm(prof[..., None, None] * K)


BUBBLE_SCALE = 4.0 * np.sqrt(2.0)


def bubble_profile(y1: np.ndarray, y2: np.ndarray) -> np.ndarray:
    """Harmonic sphere into SO(3) whose largest gradient is 1.

    ``n(z)`` is the inverse stereographic projection of ``z = y / (4 sqrt 2)``
    and the map is the half-turn ``2 n n^T - I`` about ``n``.  In the norm
    ``|grad P|^2 = 1/2 sum_k |d_k P|_F^2`` its gradient is ``8 / s^2 = 1``
    at the origin (``s = 4 sqrt 2``) and decreases away from it.
    """
    z1, z2 = y1 / BUBBLE_SCALE, y2 / BUBBLE_SCALE
    q = 1.0 + z1 * z1 + z2 * z2
    n = np.stack([2.0 * z1 / q, 2.0 * z2 / q, (2.0 - q) / q], axis=-1)
    return 2.0 * n[..., :, None] * n[..., None, :] - np.eye(3)


def plant_bubble(grid: Grid, center, lam: float) -> np.ndarray:
    """Gauge field ``P((x - center) / lam)`` with the bubble profile ``P``."""
    x1, x2 = grid.coords
    return bubble_profile((x1 - center[0]) / lam, (x2 - center[1]) / lam)
