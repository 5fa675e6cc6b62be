"""Connections, the gauge action, the energy and its gradient.

Shapes: a gauge field ``S`` is ``(n, n, r, r)``; a one-form ``A`` is
``(2, n, n, r, r)`` with ``A[k]`` the ``dx^k`` component.  ``A0`` is the
reference connection and ``a = A - A0``.

Three discretisations of the gradient are offered by :func:`flow_residual`:

``"local"``
    The expanded equation for the matrix field ``u``, with the five-point
    Laplacian and ghost values that encode the oblique boundary condition.
    This is what the time stepper uses.
``"global"``
    The same compact stencil assembled from covariant building blocks
    (rough Laplacian, quadratic term, the ``{., a}`` pairing and the
    codifferential of ``a``).
``"divergence"``
    The codifferential of ``w = S*(A) - A0`` twisted by ``S*(A)``, with the
    central and one-sided stencils of :mod:`gaugeflow.domain`.  It has a
    wider stencil, needs no ghost values and is the default.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import domain
from .domain import Grid
from .group import INJECTIVITY_GUARD, T, bracket, expm_skew, logm_near, skew, sym

SKEW_FLOOR = 1e-8
SKEW_RELATIVE = 0.1


class GaugeCovarianceError(ArithmeticError):
    """The discrete pullback is too far from skew to be trusted."""


@dataclass
class EnergyReport:
    total: float
    density: np.ndarray = field(repr=False)
    local: list = field(default_factory=list)

    def add_local(self, center, radius: float, grid: Grid) -> float:
        value = domain.local_integral(self.density, center, radius, grid)
        self.local.append((tuple(center), radius, value))
        return value


def cov_deriv(S: np.ndarray, A: np.ndarray, grid: Grid) -> np.ndarray:
    """``u_{|k} = d_k u + [A_k, u]`` for both components."""
    return domain.grad(S, grid) + bracket(A, S[None])


def pullback(S: np.ndarray, A: np.ndarray, grid: Grid, check: bool = True) -> np.ndarray:
    """Gauge transform ``S^T dS + S^T A S`` of the connection ``A``.

    The raw discrete result is only skew up to truncation error.  It is
    projected onto skew matrices; when ``check`` is set an error is raised if
    the discarded symmetric part exceeds ``1e-8`` plus a tenth of the skew
    signal, which means the grid does not resolve the field.
    """
    St = T(S)[None]
    raw = St @ domain.grad(S, grid) + St @ A @ S[None]
    out = skew(raw)
    if check:
        defect = float(np.max(np.abs(sym(raw))))
        allowed = SKEW_FLOOR + SKEW_RELATIVE * float(np.max(np.abs(out)))
        if defect > allowed:
            raise GaugeCovarianceError(
                f"discretization broke gauge covariance: symmetric defect {defect:.3g} > {allowed:.3g}"
            )
    return out


def energy_density(omega: np.ndarray) -> np.ndarray:
    """``1/2 sum_k |w_k|_F^2`` at every point."""
    return 0.5 * np.sum(omega * omega, axis=(0, -2, -1))


def energy(S: np.ndarray, A: np.ndarray, A0: np.ndarray, grid: Grid) -> EnergyReport:
    """Energy ``1/2 ||S*(A) - A0||^2`` with its density."""
    omega = pullback(S, A, grid) - A0
    dens = energy_density(omega)
    return EnergyReport(domain.integral(dens, grid), dens)


def local_energy(S, A, A0, center, radius: float, grid: Grid) -> float:
    """Energy of ``S`` inside the closed disk around ``center``."""
    return domain.local_integral(energy(S, A, A0, grid).density, center, radius, grid)


# ---------------------------------------------------------------------------
# ghost layer for the oblique boundary condition


def boundary_velocity(u: np.ndarray, A_nu: np.ndarray, a_nu: np.ndarray) -> np.ndarray:
    """Prescribed outward normal derivative ``-[A_nu, u] - u a_nu``."""
    return -bracket(A_nu, u) - u @ a_nu


def _edge_ghost(u, u_in, V, two_h):
    """Ghost value across one edge, built in log coordinates at ``u``.

    With ``Z = log(u^T u_in)`` the ghost is ``u exp(Z + 2h u^T V)``, so the
    central difference of the logarithm across the edge is exactly
    ``u^T V``.  Neighbours too far apart for the logarithm fall back to the
    linear ghost ``u_in + 2h V``.
    """
    ut = T(u)
    M = ut @ u_in
    eye = np.eye(u.shape[-1])
    # the Frobenius norm bounds the spectral norm the logarithm is guarded by
    near = np.sum((M - eye) ** 2, axis=(-2, -1)) < (0.95 * INJECTIVITY_GUARD) ** 2
    if not np.all(near):
        M = np.where(near[..., None, None], M, eye)
    ghost = u @ expm_skew(logm_near(M) + two_h * skew(ut @ V))
    if not np.all(near):
        ghost = np.where(near[..., None, None], ghost, u_in + two_h * V)
    return ghost


def fill_square_ghosts(U: np.ndarray, S: np.ndarray, A: np.ndarray, a: np.ndarray, h: float) -> None:
    """Write the ghost layer of the square into the padded field ``U``.

    ``U[1:-1, 1:-1]`` must already hold ``S``.  Each edge ghost makes the
    normal central difference at its boundary point match
    ``-[A_nu, u] - u a_nu`` (see :func:`_edge_ghost`); a corner ghost is the
    mean of its two neighbours in the layer.
    """
    # edges in the order i = 0, i = n-1 (normals -e1, +e1), j = 0, j = n-1
    u = np.stack([S[0], S[-1], S[:, 0], S[:, -1]])
    u_in = np.stack([S[1], S[-2], S[:, 1], S[:, -2]])
    sgn = np.array([-1.0, 1.0, -1.0, 1.0])[:, None, None, None]
    A_nu = sgn * np.stack([A[0, 0], A[0, -1], A[1, :, 0], A[1, :, -1]])
    a_nu = sgn * np.stack([a[0, 0], a[0, -1], a[1, :, 0], a[1, :, -1]])
    ghost = _edge_ghost(u, u_in, boundary_velocity(u, A_nu, a_nu), 2.0 * h)
    U[0, 1:-1], U[-1, 1:-1], U[1:-1, 0], U[1:-1, -1] = ghost
    for ci in (0, -1):
        for cj in (0, -1):
            U[ci, cj] = 0.5 * (U[ci, cj + (1 if cj == 0 else -1)] + U[ci + (1 if ci == 0 else -1), cj])


def extend_with_ghosts(S: np.ndarray, A: np.ndarray, A0: np.ndarray, grid: Grid):
    """Pad ``S``, ``A`` and ``a`` with one ghost layer.

    On the torus the layer is periodic.  On the square the connection is
    extended by quadratic extrapolation and the ghost values of ``S`` come
    from :func:`fill_square_ghosts`.

    Returns
    -------
    U, A_ext, a_ext
        Arrays of shape ``(n+2, n+2, r, r)`` and ``(2, n+2, n+2, r, r)``.
    """
    if not grid.is_square:
        U = domain.pad_periodic(S)
        A_ext = np.stack([domain.pad_periodic(A[0]), domain.pad_periodic(A[1])])
        a_ext = A_ext - np.stack([domain.pad_periodic(A0[0]), domain.pad_periodic(A0[1])])
        return U, A_ext, a_ext
    a = A - A0
    A_ext = np.stack([domain.pad_extrapolate(A[0]), domain.pad_extrapolate(A[1])])
    a_ext = np.stack([domain.pad_extrapolate(a[0]), domain.pad_extrapolate(a[1])])
    U = np.pad(S, [(1, 1), (1, 1), (0, 0), (0, 0)])
    fill_square_ghosts(U, S, A, a, grid.h)
    return U, A_ext, a_ext


def _compact_parts(S, A, A0, grid: Grid) -> dict:
    """Building blocks shared by the local and global compact residuals."""
    U, A_ext, a_ext = extend_with_ghosts(S, A, A0, grid)
    inv2h = 1.0 / (2.0 * grid.h)
    P = bracket(A_ext, U[None])
    Du = np.stack([(U[2:, 1:-1] - U[:-2, 1:-1]) * inv2h, (U[1:-1, 2:] - U[1:-1, :-2]) * inv2h])
    ucov = Du + P[:, 1:-1, 1:-1]
    lap = domain.laplacian(U, grid, padded=True)
    div_P = (P[0, 2:, 1:-1] - P[0, :-2, 1:-1]) * inv2h + (P[1, 1:-1, 2:] - P[1, 1:-1, :-2]) * inv2h
    div_a = (a_ext[0, 2:, 1:-1] - a_ext[0, :-2, 1:-1]) * inv2h + (
        a_ext[1, 1:-1, 2:] - a_ext[1, 1:-1, :-2]
    ) * inv2h
    a = A - A0
    B = T(S)[None] @ ucov
    return dict(U=U, ucov=ucov, lap=lap, div_P=div_P, div_a=div_a, a=a, B=B)


def _local_force(S, A, A0, grid: Grid, parts=None) -> np.ndarray:
    p = parts if parts is not None else _compact_parts(S, A, A0, grid)
    ucov, a, B = p["ucov"], p["a"], p["B"]
    u = S
    F = p["lap"] + p["div_P"] + bracket(A, ucov).sum(axis=0)
    F = F - (ucov @ B).sum(axis=0)
    F = F + u @ bracket(B, a).sum(axis=0)
    F = F + u @ (p["div_a"] + bracket(A, a).sum(axis=0))
    return F


def _global_force(S, A, A0, grid: Grid, parts=None) -> np.ndarray:
    p = parts if parts is not None else _compact_parts(S, A, A0, grid)
    ucov, a = p["ucov"], p["a"]
    u = S
    # -nabla_A^* nabla_A u, the rough Laplacian of u twisted by A
    rough = p["lap"] + p["div_P"] + bracket(A, ucov).sum(axis=0)
    quadratic = (ucov @ T(u)[None] @ ucov).sum(axis=0)
    pairing = -(u @ bracket(T(u)[None] @ ucov, a).sum(axis=0))
    codiff_a = -p["div_a"] - bracket(A, a).sum(axis=0)
    return rough - quadratic - pairing - u @ codiff_a


def flow_force(S, A, A0, grid: Grid, form: str = "local") -> np.ndarray:
    """Right-hand side ``F`` of the matrix equation ``du/dt = F`` before projection."""
    if form == "local":
        return _local_force(S, A, A0, grid)
    if form == "global":
        return _global_force(S, A, A0, grid)
    raise ValueError(f"unknown compact form {form!r}")


def flow_residual(S, A, A0, grid: Grid, form: str = "divergence") -> np.ndarray:
    """Gradient of the energy in the Lie algebra at every point.

    The flow moves by ``S^{-1} dS/dt = -R``.  For the compact forms ``R`` is
    minus the skew part of ``u^T F``; the ``"divergence"`` form evaluates
    ``d*w - sum_k [S*(A)_k, w_k]`` directly.
    """
    if form == "divergence":
        At = pullback(S, A, grid)
        omega = At - A0
        return domain.d_star(omega, grid) - bracket(At, omega).sum(axis=0)
    F = flow_force(S, A, A0, grid, form)
    return -skew(T(S) @ F)


def coulomb_residual(S, A, A0, grid: Grid) -> np.ndarray:
    """Codifferential of ``w = S*(A) - A0`` twisted by the reference ``A0``."""
    omega = pullback(S, A, grid) - A0
    return domain.d_star(omega, grid) - bracket(A0, omega).sum(axis=0)


def conjugate_connection(A: np.ndarray, g: np.ndarray, grid: Grid) -> np.ndarray:
    """Gauge transform ``g^T A g + g^T dg`` without the skew check."""
    return pullback(g, A, grid, check=False)


def write_energy_csv(path, rows, with_drift: bool = False) -> None:
    """Write ``t,total,residual_l2,residual_linf[,drift]`` rows."""
    header = ["t", "total", "residual_l2", "residual_linf"] + (["drift"] if with_drift else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["%.17g" % v for v in row[: len(header)]])
