"""Coulomb gauge of a connection on the square and its potential.

Given a skew-valued one-form ``Omega`` we look for a gauge ``S`` with
``d*(S*(Omega)) = 0`` by running the flow with ``A = Omega`` and ``A0 = 0``
from a compatible start, then write ``S*(Omega) = perp-grad xi`` with ``xi``
vanishing on the boundary.  ``perp-grad f = (-d_2 f, d_1 f)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import domain, flow, gauge
from .domain import Grid
from .group import expm

DECOMP_CONSTANT = 1.0


class DecompositionStatus(str, enum.Enum):
    CONVERGED = "Converged"
    NON_CONVERGED = "NonConverged"


def smoothstep(s: np.ndarray) -> np.ndarray:
    """Quintic ramp: 0 for ``s <= 0``, 1 for ``s >= 1``, slope at most 15/8."""
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


def collar_cutoff(dist: np.ndarray, delta: float) -> np.ndarray:
    """``eta``: 0 within ``delta`` of the boundary, 1 beyond ``2 delta``."""
    return smoothstep((dist - delta) / delta)


def _collar_ramp(dist: np.ndarray, delta: float) -> np.ndarray:
    """``(1 - eta(d)) d``: slope 1 at the edge, zero beyond ``2 delta``."""
    return (1.0 - collar_cutoff(dist, delta)) * dist


def build_initial(Omega: np.ndarray, delta: float, grid: Grid) -> np.ndarray:
    """Compatible starting gauge supported in the collar of width ``2 delta``.

    Away from the corners ``S0 = expm((1 - eta(d)) d Omega(nu))`` with ``d``
    the distance to the edge and ``nu`` its outward normal, so ``S0 = I``
    and ``d_nu S0 = -Omega(nu)`` on the edge.  Near the corners two edges
    compete.  The field is built as a product ``g h``: ``g`` handles the
    edges ``x1 = 0, 1`` for ``Omega`` and ``h`` handles ``x2 = 0, 1`` for the
    transformed connection ``g*(Omega)``.  Since ``(g h)*Omega = h*(g*Omega)``
    and the coefficient inside ``h`` is frozen over the first two columns
    next to the side edges (so ``h`` has no ``x1`` derivative there), both
    conditions hold up to ``O(h)``, and exactly away from the corners.
    """
    if not grid.is_square:
        raise ValueError("build_initial needs the square")
    if delta < 4.0 * grid.h:
        raise ValueError(f"collar width {delta} is below 4h = {4 * grid.h}")
    x1, x2 = grid.coords
    low, high = _collar_ramp(x1, delta), _collar_ramp(1.0 - x1, delta)
    g = expm((high - low)[..., None, None] * Omega[0])
    F = gauge.pullback(g, Omega, grid, check=False)[1].copy()
    F[0] = F[1] = F[2]
    F[-1] = F[-2] = F[-3]
    low, high = _collar_ramp(x2, delta), _collar_ramp(1.0 - x2, delta)
    return g @ expm((high - low)[..., None, None] * F)


# ---------------------------------------------------------------------------
# Poisson solve for the potential


def dirichlet_laplacian(n: int, h: float) -> sp.csr_matrix:
    """Negative five-point Laplacian on the ``(n-2)^2`` interior points."""
    m = n - 2
    main = 2.0 * np.ones(m)
    off = -np.ones(m - 1)
    t = sp.diags([off, main, off], [-1, 0, 1])
    eye = sp.identity(m)
    return ((sp.kron(t, eye) + sp.kron(eye, t)) / h**2).tocsr()


def curl(omega: np.ndarray, grid: Grid) -> np.ndarray:
    """``d_1 w_2 - d_2 w_1``."""
    return domain.grad(omega[1], grid)[0] - domain.grad(omega[0], grid)[1]


def solve_xi(omega_tilde: np.ndarray, grid: Grid, solver: str = "cg") -> np.ndarray:
    """Potential ``xi`` with ``Lap xi = curl(omega_tilde)`` and ``xi = 0`` on the boundary.

    Each entry above the diagonal is solved separately with conjugate
    gradients (relative residual ``1e-10``); ``solver="direct"`` uses a
    sparse LU factorisation instead.
    """
    if not grid.is_square:
        raise ValueError("solve_xi needs the square")
    n, r = grid.n, omega_tilde.shape[-1]
    src = curl(omega_tilde, grid)
    L = dirichlet_laplacian(n, grid.h)
    xi = np.zeros(grid.shape + (r, r))
    for p in range(r):
        for q in range(p + 1, r):
            b = -src[1:-1, 1:-1, p, q].ravel()
            if not np.any(b):
                continue
            if solver == "direct":
                sol = spla.spsolve(L.tocsc(), b)
            else:
                sol, info = spla.cg(L, b, rtol=1e-10, atol=0.0, maxiter=10 * n * n)
                if info != 0:
                    raise ArithmeticError(f"conjugate gradients did not converge (info={info})")
            xi[1:-1, 1:-1, p, q] = sol.reshape(n - 2, n - 2)
            xi[1:-1, 1:-1, q, p] = -xi[1:-1, 1:-1, p, q]
    return xi


# ---------------------------------------------------------------------------
# the pipeline


@dataclass
class DecompositionResult:
    S: np.ndarray = field(repr=False)
    xi: np.ndarray = field(repr=False)
    omega_tilde: np.ndarray = field(repr=False)
    residual_coulomb: float
    residual_decomp: float
    ratio: float
    status: DecompositionStatus
    bound_holds: bool
    interior_coulomb: float = math.nan
    flow_state: flow.FlowState | None = field(default=None, repr=False)

    def summary_row(self) -> dict:
        return {
            "status": self.status.value,
            "residual_coulomb": self.residual_coulomb,
            "interior_coulomb": self.interior_coulomb,
            "residual_decomp": self.residual_decomp,
            "ratio": self.ratio,
            "bound_holds": int(self.bound_holds),
        }


def sobolev_norm(xi: np.ndarray, grid: Grid) -> float:
    """``(||xi||_2^2 + ||grad xi||_2^2)^(1/2)``."""
    return math.sqrt(domain.l2_norm(xi, grid) ** 2 + domain.l2_norm(domain.grad(xi, grid), grid, lead=1) ** 2)


def estimate_ratio(xi, S, Omega, grid: Grid) -> float:
    """``(||xi||_{1,2} + ||grad S||_2) / ||Omega||_2``; zero when ``Omega = 0``."""
    norm = domain.l2_norm(Omega, grid, lead=1)
    if norm == 0.0:
        return 0.0
    return (sobolev_norm(xi, grid) + domain.l2_norm(domain.grad(S, grid), grid, lead=1)) / norm


def interior_norm(f: np.ndarray, grid: Grid) -> float:
    """L2 norm over the points at least one step away from the boundary."""
    inner = np.where(grid.boundary_mask == domain.PointKind.INTERIOR, 1.0, 0.0)
    sq = domain.pointwise_norm(f) ** 2
    return math.sqrt(domain.integral(sq * inner, grid))


def decompose(
    Omega: np.ndarray, grid: Grid, config: flow.FlowConfig | None = None, delta: float | None = None
) -> DecompositionResult:
    """Flow ``A = Omega`` (``A0 = 0``) to a Coulomb gauge and solve for ``xi``."""
    config = config if config is not None else flow.FlowConfig()
    if delta is None:
        delta = max(0.1, 4.0 * grid.h)
    A0 = np.zeros_like(Omega)
    S0 = build_initial(Omega, delta, grid)
    state = flow.run(S0, Omega, A0, grid, config)
    S = state.S
    omega_tilde = gauge.pullback(S, Omega, grid)
    xi = solve_xi(omega_tilde, grid)
    dstar = domain.d_star(omega_tilde, grid)
    res_c = domain.l2_norm(dstar, grid)
    res_d = domain.l2_norm(domain.perp_grad(xi, grid) - omega_tilde, grid, lead=1)
    bound = DECOMP_CONSTANT * grid.h + 10.0 * res_c * math.sqrt(2.0)
    status = (
        DecompositionStatus.CONVERGED if state.status is flow.Status.CONVERGED else DecompositionStatus.NON_CONVERGED
    )
    return DecompositionResult(
        S=S, xi=xi, omega_tilde=omega_tilde, residual_coulomb=res_c, residual_decomp=res_d,
        ratio=estimate_ratio(xi, S, Omega, grid), status=status, bound_holds=res_d <= bound,
        interior_coulomb=interior_norm(dstar, grid), flow_state=state,
    )


def mollify(Omega: np.ndarray, grid: Grid, width: float) -> np.ndarray:
    """Gaussian smoothing of every component with standard deviation ``width`` (length units)."""
    mode = "nearest" if grid.is_square else "wrap"
    sigma = (width / grid.h, width / grid.h)
    out = np.empty_like(Omega)
    for k in range(Omega.shape[0]):
        for p in range(Omega.shape[-2]):
            for q in range(Omega.shape[-1]):
                out[k, :, :, p, q] = scipy.ndimage.gaussian_filter(Omega[k, :, :, p, q], sigma, mode=mode)
    return out


def decompose_mollified(Omega, grid: Grid, config=None, widths=(4.0, 2.0, 1.0), delta=None) -> list:
    """Decompose Gaussian-smoothed copies of a rough ``Omega``.

    ``widths`` are in grid steps, coarsest first.  Returns a list of
    ``(width, DecompositionResult)``; the sequence approaches the rough data
    as the width shrinks.
    """
    return [(w, decompose(mollify(Omega, grid, w * grid.h), grid, config, delta)) for w in widths]


@dataclass
class EnergyBudget:
    """Both sides of the start-up energy bounds, with margins ``rhs - lhs``."""

    twice_energy: float
    grad_S0_sq: float
    omega_sq: float
    final_sq: float | None = None

    @property
    def squares_margin(self) -> float:
        """``||dS0||^2 + ||Omega||^2 - 2E(S0)``; can be negative since the cross term is dropped."""
        return self.grad_S0_sq + self.omega_sq - self.twice_energy

    @property
    def triangle_margin(self) -> float:
        """``(||dS0|| + ||Omega||)^2 - 2E(S0)``, nonnegative up to discretisation."""
        return (math.sqrt(self.grad_S0_sq) + math.sqrt(self.omega_sq)) ** 2 - self.twice_energy

    @property
    def monotone_margin(self) -> float | None:
        """``2E(S0) - ||Omega~_final||^2`` when a final state was given."""
        return None if self.final_sq is None else self.twice_energy - self.final_sq


def energy_budget_check(Omega: np.ndarray, S0: np.ndarray, grid: Grid, S_final: np.ndarray | None = None) -> EnergyBudget:
    A0 = np.zeros_like(Omega)
    twice = 2.0 * gauge.energy(S0, Omega, A0, grid).total
    final = None
    if S_final is not None:
        final = 2.0 * gauge.energy(S_final, Omega, A0, grid).total
    return EnergyBudget(
        twice_energy=twice,
        grad_S0_sq=domain.l2_norm(domain.grad(S0, grid), grid, lead=1) ** 2,
        omega_sq=domain.l2_norm(Omega, grid, lead=1) ** 2,
        final_sq=final,
    )
