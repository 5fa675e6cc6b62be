"""Energy concentration, blow-up rescaling and the cut-off restart.

The flow can only be continued past a concentration point after the field
near that point has been replaced by a nearly constant one.  This module
finds such points, rescales the field around them, builds the replacement
fields (inside the domain and at an edge of the square) and drives the
flow through the resulting restarts.

Gradient sizes use ``|grad u|^2 = 1/2 sum_k |d_k u|_F^2``, under which
``exp(theta J)`` has gradient ``|grad theta|``.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from . import domain, flow, gauge
from .coulomb import smoothstep
from .domain import Grid
from .group import InjectivityError, T, bracket, expm, logm

# the drop inequality at a restart is checked up to DROP_SLACK * h * E_before
DROP_SLACK = 1.0
# greedy maxima below this fraction of eps0 are not listed
CANDIDATE_FRACTION = 0.25


class LocalizationError(ArithmeticError):
    """No cut-off radius on the grid makes the replacement cheap enough."""


class RestartError(RuntimeError):
    """A restarted field violates the boundary condition; ``field`` holds it."""

    def __init__(self, message: str, field: np.ndarray | None = None):
        super().__init__(message)
        self.field = field


class EnergyDropViolation(AssertionError):
    pass


def _zero_connection(S: np.ndarray) -> np.ndarray:
    r = S.shape[-1]
    return np.zeros((2,) + S.shape[:2] + (r, r))


def _density(S, A, A0, grid: Grid) -> np.ndarray:
    omega = gauge.pullback(S, A, grid, check=False) - A0
    return gauge.energy_density(omega)


def gradient_norm(S: np.ndarray, grid: Grid) -> np.ndarray:
    """``sqrt(1/2 sum_k |d_k S|_F^2)`` at every point."""
    return domain.pointwise_norm(domain.grad(S, grid), lead=1) / math.sqrt(2.0)


# ---------------------------------------------------------------------------
# concentration scan


@dataclass
class ConcentrationReport:
    points: list
    threshold: float
    radius: float
    flagged: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.flagged)


def local_energy_map(density: np.ndarray, grid: Grid, radius: float) -> np.ndarray:
    """Energy in the closed disk of ``radius`` around every grid point."""
    k = int(math.floor(radius / grid.h * (1.0 + 1e-12)))
    off = np.arange(-k, k + 1) * grid.h
    footprint = (np.hypot(*np.meshgrid(off, off, indexing="ij")) <= radius * (1.0 + 1e-12)).astype(float)
    weighted = density * grid.weights
    mode = "constant" if grid.is_square else "wrap"
    return scipy.ndimage.correlate(weighted, footprint, mode=mode, cval=0.0)


def concentration_scan(S, A, A0, grid: Grid, r: float, eps0: float = 4.0 * math.pi) -> ConcentrationReport:
    """Greedy maxima of the local energy at radius ``r``, at least ``4r`` apart.

    Every grid point is a candidate center.  Candidates are taken in order of
    decreasing local energy and skipped when closer than ``4r`` to one already
    taken; those with local energy at least ``eps0`` are flagged.  A bump much
    smaller than ``r`` gives a plateau of equal local energies; ties (to a
    relative ``1e-9``) go to the larger energy within ``r/2``.
    """
    if r < 4.0 * grid.h * (1.0 - 1e-12):
        raise ValueError(f"scan radius {r} is below 4h = {4 * grid.h}")
    density = _density(S, A, A0, grid)
    local = local_energy_map(density, grid, r)
    half = local_energy_map(density, grid, 0.5 * r)
    x1, x2 = grid.coords
    scale = 1e-9 * max(float(np.max(local)), 1e-300)
    order = np.lexsort((-half.ravel(), -np.round(local.ravel() / scale)))
    floor = CANDIDATE_FRACTION * eps0
    points = []
    for flat in order:
        value = float(local.flat[flat])
        if value < floor:
            break
        c = (float(x1.flat[flat]), float(x2.flat[flat]))
        if any(_distance(c, p[0], grid) < 4.0 * r for p in points):
            continue
        points.append((c, r, value))
    flagged = [p for p in points if p[2] >= eps0]
    return ConcentrationReport(points, eps0, r, flagged)


def _distance(a, b, grid: Grid) -> float:
    d = np.subtract(a, b)
    if not grid.is_square:
        d = d - np.round(d)
    return float(np.hypot(*d))


# ---------------------------------------------------------------------------
# blow-up rescaling


@dataclass
class BlowupFrame:
    center: tuple
    lam: float
    R: float
    w: np.ndarray = field(repr=False)
    spacing: float
    coords: tuple = field(repr=False)
    rho: float = math.inf
    max_gradient: float = math.nan

    def header(self) -> str:
        return f"lambda={self.lam!r} center={self.center[0]!r},{self.center[1]!r} rho={self.rho!r}"


def blowup_center(S: np.ndarray, grid: Grid, center, radius: float) -> tuple:
    """Grid point of largest gradient within ``radius`` of ``center``."""
    g = np.where(domain.disk_mask(center, radius, grid), gradient_norm(S, grid), -1.0)
    i, j = np.unravel_index(int(np.argmax(g)), grid.shape)
    return (i * grid.h, j * grid.h)


def _sample(S: np.ndarray, grid: Grid, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of log-coordinates around the nearest node."""
    n = grid.n
    f1, f2 = p1 / grid.h, p2 / grid.h
    if grid.is_square:
        i0 = np.clip(np.floor(f1), 0, n - 2).astype(int)
        j0 = np.clip(np.floor(f2), 0, n - 2).astype(int)
    else:
        i0 = np.floor(f1).astype(int)
        j0 = np.floor(f2).astype(int)
    t1 = np.clip(f1 - i0, 0.0, 1.0)
    t2 = np.clip(f2 - j0, 0.0, 1.0)
    wrap = (lambda k: k % n) if not grid.is_square else (lambda k: k)
    ni = wrap(i0 + (t1 >= 0.5))
    nj = wrap(j0 + (t2 >= 0.5))
    base = S[ni, nj]
    out = np.zeros_like(base)
    for di, wi in ((0, 1.0 - t1), (1, t1)):
        for dj, wj in ((0, 1.0 - t2), (1, t2)):
            weight = wi * wj
            # corners without weight are replaced by the base point so their
            # logarithm is never needed
            corner = np.where((weight > 0)[..., None, None], S[wrap(i0 + di), wrap(j0 + dj)], base)
            out += weight[..., None, None] * logm(T(base) @ corner)
    return base @ expm(out)


def extract_blowup(S: np.ndarray, grid: Grid, center, R: float = 8.0, spacing: float | None = None) -> BlowupFrame:
    """Rescale ``S`` around ``center`` by ``lam = 1 / |grad S|(center)``.

    The window ``[-R, R]^2`` in rescaled coordinates is sampled at ``h / lam``
    unless ``spacing`` is given.  On the torus the window wraps; on the square
    it is clipped to the domain and ``rho`` records the rescaled distance from
    the center to the boundary.
    """
    grad = gradient_norm(S, grid)
    i = int(round(center[0] / grid.h)) % grid.n
    j = int(round(center[1] / grid.h)) % grid.n
    top = float(grad[i, j])
    if top <= 1e-12:
        raise ValueError("zero gradient: the blow-up scale is undefined")
    lam = 1.0 / top
    c = (i * grid.h, j * grid.h)
    spacing = grid.h / lam if spacing is None else spacing
    m = int(math.floor(R / spacing + 1e-9))
    axes = []
    rho = math.inf
    for k in range(2):
        y = np.arange(-m, m + 1) * spacing
        if grid.is_square:
            lo, hi = -c[k] / lam, (1.0 - c[k]) / lam
            rho = min(rho, -lo, hi)
            y = y[(y >= lo - 1e-9) & (y <= hi + 1e-9)]
        axes.append(y)
    if grid.is_square and rho > R:
        rho = math.inf
    y1, y2 = np.meshgrid(*axes, indexing="ij")
    w = _sample(S, grid, c[0] + lam * y1, c[1] + lam * y2)
    # central differences only: the one-sided window edges are less accurate
    dw = np.stack([
        (w[2:, 1:-1] - w[:-2, 1:-1]) / (2.0 * spacing),
        (w[1:-1, 2:] - w[1:-1, :-2]) / (2.0 * spacing),
    ])
    max_grad = float(np.max(domain.pointwise_norm(dw, lead=1))) / math.sqrt(2.0)
    return BlowupFrame(c, lam, R, w, spacing, tuple(axes), rho, max_grad)


def harmonic_residual(w: np.ndarray, spacing: float = 1.0) -> float:
    """L2 norm of ``Lap w - sum_k (d_k w) w^T (d_k w)`` on the inner half-window."""
    inv = 1.0 / spacing
    c = w[1:-1, 1:-1]
    lap = (w[2:, 1:-1] + w[:-2, 1:-1] + w[1:-1, 2:] + w[1:-1, :-2] - 4.0 * c) * inv * inv
    d1 = (w[2:, 1:-1] - w[:-2, 1:-1]) * (0.5 * inv)
    d2 = (w[1:-1, 2:] - w[1:-1, :-2]) * (0.5 * inv)
    F = lap - d1 @ T(c) @ d1 - d2 @ T(c) @ d2
    m1, m2 = w.shape[:2]
    a1, b1 = m1 // 4, m1 - m1 // 4
    a2, b2 = m2 // 4, m2 - m2 // 4
    inner = F[max(a1 - 1, 0) : b1 - 1, max(a2 - 1, 0) : b2 - 1]
    return float(np.sqrt(np.sum(inner * inner) * spacing * spacing))


def write_frame(path, frame: BlowupFrame) -> None:
    """GFDUMP of the rescaled field and a ``.header`` sidecar.

    A clipped (non-square) window is padded with identities up to a square
    grid; the sidecar records the true window shape.
    """
    m1, m2 = frame.w.shape[:2]
    m = max(m1, m2, 8)
    out = np.broadcast_to(np.eye(frame.w.shape[-1]), (m, m) + frame.w.shape[-2:]).copy()
    out[:m1, :m2] = frame.w
    domain.write_gfdump(path, out, domain.make_grid("Square", m))
    with open(str(path) + ".header", "w") as fh:
        fh.write(frame.header() + f" shape={m1}x{m2} spacing={frame.spacing!r}\n")


# ---------------------------------------------------------------------------
# oscillation and reference point


def _annulus(S: np.ndarray, center, delta: float, grid: Grid):
    if delta < 8.0 * grid.h * (1.0 - 1e-12):
        raise ValueError(f"delta {delta} is below 8h = {8 * grid.h}")
    d = domain.distance_to(center, grid)
    idx = np.argwhere((d > 0.5 * delta) & (d <= delta * (1.0 + 1e-12)))
    if len(idx) < 2:
        raise ValueError("annulus contains fewer than two grid points")
    return idx, S[idx[:, 0], idx[:, 1]].reshape(len(idx), -1)


def _farthest(values: np.ndarray, chunk: int = 512) -> np.ndarray:
    """For every row the largest distance to any other row."""
    out = np.empty(len(values))
    sq = np.sum(values * values, axis=1)
    for s in range(0, len(values), chunk):
        block = values[s : s + chunk]
        d2 = sq[s : s + chunk, None] + sq[None, :] - 2.0 * block @ values.T
        out[s : s + chunk] = np.sqrt(np.maximum(np.max(d2, axis=1), 0.0))
    return out


def oscillation(S: np.ndarray, center, delta: float, grid: Grid) -> float:
    """Largest ``|S(x) - S(y)|_F`` over pairs in ``delta/2 < |x - center| <= delta``."""
    _, values = _annulus(S, center, delta, grid)
    return float(np.max(_farthest(values)))


def reference_point(S: np.ndarray, center, delta: float, grid: Grid) -> tuple[int, int]:
    """Annulus point whose value is closest to all the others (a 1-center)."""
    idx, values = _annulus(S, center, delta, grid)
    k = int(np.argmin(_farthest(values)))
    return int(idx[k, 0]), int(idx[k, 1])


# ---------------------------------------------------------------------------
# cut-off approximations


@dataclass
class Approximation:
    S: np.ndarray = field(repr=False)
    center: tuple
    delta: float
    energy_delta: float
    cost: float
    removed: float
    reference: tuple
    delta_prime: float | None = None
    bc_residual: float | None = None


def _interior_field(S, center, delta, grid: Grid, ref):
    d = domain.distance_to(center, grid)
    u0 = S[ref]
    out = S.copy()
    inner = d <= 0.5 * delta
    out[inner] = u0
    ring = (d > 0.5 * delta) & (d < delta)
    phi = smoothstep((d[ring] - 0.5 * delta) / (0.5 * delta))
    out[ring] = u0 @ expm(phi[:, None, None] * logm(T(u0) @ S[ring]))
    return out


def _costs(S, S_new, A, A0, center, delta, grid: Grid):
    before = _density(S, A, A0, grid)
    after = _density(S_new, A, A0, grid)
    d = domain.distance_to(center, grid)
    big = d <= 2.0 * delta * (1.0 + 1e-12)
    small = d <= delta * (1.0 + 1e-12)
    wts = grid.weights
    e_new = float(np.sum(np.where(big, after * wts, 0.0)))
    e_old = float(np.sum(np.where(big, before * wts, 0.0)))
    e_ring = float(np.sum(np.where(big & ~small, before * wts, 0.0)))
    removed = float(np.sum(np.where(small, before * wts, 0.0)))
    return abs(e_new - e_old), e_new - e_ring, removed


def approximate_interior(S, center, delta: float, u0_point, grid: Grid, A=None, A0=None):
    """Replace ``S`` near ``center`` by a field that is constant on ``D_{delta/2}``.

    ``S~ = u0 exp(phi log(u0^T S))`` with ``phi`` rising from 0 at ``delta/2``
    to 1 at ``delta`` (slope below ``4/delta``); points with
    ``|x - center| >= delta`` are copied unchanged.  ``u0 = S[u0_point]``;
    ``None`` picks the reference point of :func:`reference_point`.

    Returns
    -------
    S_new, energy_delta
        ``energy_delta = |E(S~; D_{2 delta}) - E(S; D_{2 delta})|`` for the
        connection pair ``A, A0`` (zero when omitted).
    """
    A = _zero_connection(S) if A is None else A
    A0 = _zero_connection(S) if A0 is None else A0
    ref = reference_point(S, center, delta, grid) if u0_point is None else tuple(u0_point)
    S_new = _interior_field(S, center, delta, grid, ref)
    return S_new, _costs(S, S_new, A, A0, center, delta, grid)[0]


def _edge_of(center, grid: Grid):
    """``(axis, low)`` of the edge containing ``center``."""
    tol = 0.5 * grid.h
    for axis in (0, 1):
        if abs(center[axis]) <= tol:
            return axis, True
        if abs(center[axis] - 1.0) <= tol:
            return axis, False
    raise ValueError(f"center {tuple(center)} is not on the boundary")


def _inward_distance(grid: Grid, axis: int, low: bool) -> np.ndarray:
    x = grid.coords[axis]
    return x if low else 1.0 - x


def _foot(S: np.ndarray, axis: int, low: bool) -> np.ndarray:
    """Values on the edge broadcast along the normal direction."""
    edge = S[0 if low else -1] if axis == 0 else S[:, 0 if low else -1]
    return np.broadcast_to(edge[None] if axis == 0 else edge[:, None], S.shape)


def boundary_velocity(u, A, A0, axis: int, low: bool, sel=None):
    """``V(u) = [A_nu, u] + u a_nu`` for the outward normal of the edge."""
    sgn = -1.0 if low else 1.0
    A_nu = sgn * A[axis]
    a_nu = sgn * (A[axis] - A0[axis])
    if sel is not None:
        A_nu, a_nu = A_nu[sel], a_nu[sel]
    return bracket(A_nu, u) + u @ a_nu


def boundary_condition_residual(v, A, A0, grid: Grid, axis: int, low: bool, mask=None) -> float:
    """Largest ``|d_nu v + [A_nu, v] + v a_nu|_F`` on one edge.

    The normal derivative is the second-order one-sided difference.
    """
    h = grid.h
    if axis == 0:
        rows = (v[0], v[1], v[2]) if low else (v[-1], v[-2], v[-3])
    else:
        rows = (v[:, 0], v[:, 1], v[:, 2]) if low else (v[:, -1], v[:, -2], v[:, -3])
    # derivative along the inward direction, then flip to the outward normal
    d_in = (-3.0 * rows[0] + 4.0 * rows[1] - rows[2]) / (2.0 * h)
    sl = (0 if low else -1, slice(None)) if axis == 0 else (slice(None), 0 if low else -1)
    sgn = -1.0 if low else 1.0
    A_nu = sgn * A[axis][sl]
    a_nu = sgn * (A[axis] - A0[axis])[sl]
    res = -d_in + bracket(A_nu, rows[0]) + rows[0] @ a_nu
    norm = domain.pointwise_norm(res[:, None])[:, 0]
    if mask is not None:
        norm = norm[mask]
    return float(np.max(norm)) if norm.size else 0.0


def approximate_boundary(S, A, A0, center_on_edge, delta: float, delta_prime: float, grid: Grid, u0_point=None):
    """Cut-off approximation at an edge point that keeps the boundary condition.

    Step one is :func:`approximate_interior` (giving ``w``).  Along the edge
    ``q(y, r) = w(y,0) exp(r w(y,0)^T V(w(y,0)))`` with ``r`` the distance to
    the edge solves the boundary condition, and the result is
    ``v = u0 exp(xi phi log(u0^T q) + (1 - xi phi) log(u0^T w))`` where ``xi``
    is 1 within ``delta_prime`` of the edge and 0 beyond ``2 delta_prime``,
    and ``phi`` is 1 on ``D_delta`` and 0 outside ``D_{2 delta}``.

    Returns
    -------
    v, energy_delta, bc_residual
        ``bc_residual`` is taken over the edge points in ``D_{2 delta}``.
    """
    return _boundary(S, A, A0, center_on_edge, delta, delta_prime, grid, u0_point)[:3]


def _boundary(S, A, A0, center, delta, delta_prime, grid: Grid, u0_point=None):
    if not grid.is_square:
        raise ValueError("the boundary construction needs the square")
    if delta_prime < 2.0 * grid.h * (1.0 - 1e-12):
        raise ValueError(f"collar too thin: delta' = {delta_prime} < 2h = {2 * grid.h}")
    axis, low = _edge_of(center, grid)
    other = center[1 - axis]
    if min(other, 1.0 - other) < 2.0 * delta:
        raise ValueError("the disk D_{2 delta} reaches a second edge")
    ref = reference_point(S, center, delta, grid) if u0_point is None else tuple(u0_point)
    w = _interior_field(S, center, delta, grid, ref)
    u0 = S[ref]
    d = domain.distance_to(center, grid)
    r = _inward_distance(grid, axis, low)
    region = (d < 2.0 * delta) & (r < 2.0 * delta_prime)
    phi = 1.0 - smoothstep((d[region] - delta) / delta)
    xi = 1.0 - smoothstep((r[region] - delta_prime) / delta_prime)
    wb = _foot(w, axis, low)[region]
    V = boundary_velocity(wb, A, A0, axis, low, sel=_foot_index(grid, axis, low, region))
    q = wb @ expm(r[region][:, None, None] * (T(wb) @ V))
    s = (xi * phi)[:, None, None]
    v = w.copy()
    v[region] = u0 @ expm(s * logm(T(u0) @ q) + (1.0 - s) * logm(T(u0) @ w[region]))
    edge_pts = d[0 if low else -1] if axis == 0 else d[:, 0 if low else -1]
    res = boundary_condition_residual(v, A, A0, grid, axis, low, mask=edge_pts < 2.0 * delta)
    energy_delta, cost, removed = _costs(S, v, A, A0, center, delta, grid)
    return v, energy_delta, res, cost, removed, ref


def _foot_index(grid: Grid, axis: int, low: bool, region: np.ndarray):
    """Index of the edge point below every point of ``region``."""
    i, j = np.nonzero(region)
    e = 0 if low else grid.n - 1
    return (np.full_like(i, e), j) if axis == 0 else (i, np.full_like(j, e))


def _interior_room(center, grid: Grid) -> float:
    if not grid.is_square:
        return math.inf
    return min(center[0], 1.0 - center[0], center[1], 1.0 - center[1])


def localize_interior(S, A, A0, grid: Grid, center, budget: float, delta_max: float) -> Approximation:
    """Halve ``delta`` from ``delta_max`` until the replacement is cheap.

    A radius is accepted when the logarithms exist on the annulus, ``D_delta``
    stays two steps away from the boundary, and
    ``E(S~; D_{2 delta}) - E(S; D_{2 delta} minus D_delta) <= budget``.
    """
    delta = delta_max
    while delta >= 8.0 * grid.h * (1.0 - 1e-12):
        if _interior_room(center, grid) >= delta + 2.0 * grid.h:
            try:
                ref = reference_point(S, center, delta, grid)
                S_new = _interior_field(S, center, delta, grid, ref)
            except InjectivityError:
                S_new = None
            if S_new is not None:
                energy_delta, cost, removed = _costs(S, S_new, A, A0, center, delta, grid)
                if cost <= budget:
                    return Approximation(S_new, tuple(center), delta, energy_delta, cost, removed, ref)
        delta *= 0.5
    raise LocalizationError("cannot localize: resolution exhausted")


def localize_boundary(S, A, A0, grid: Grid, center, budget: float, delta_max: float) -> Approximation:
    """Boundary analogue of :func:`localize_interior`.

    For each ``delta`` (halving from ``delta_max``) the collar width starts at
    ``delta/4`` and is halved down to ``2h`` before ``delta`` is reduced.
    """
    axis, low = _edge_of(center, grid)
    snapped = list(center)
    snapped[axis] = 0.0 if low else 1.0
    delta = delta_max
    while delta >= 8.0 * grid.h * (1.0 - 1e-12):
        other = snapped[1 - axis]
        if min(other, 1.0 - other) >= 2.0 * delta:
            dp = 0.25 * delta
            while dp >= 2.0 * grid.h * (1.0 - 1e-12):
                try:
                    v, energy_delta, res, cost, removed, ref = _boundary(S, A, A0, snapped, delta, dp, grid)
                except InjectivityError:
                    break
                if cost <= budget:
                    return Approximation(v, tuple(snapped), delta, energy_delta, cost, removed, ref, dp, res)
                dp *= 0.5
        delta *= 0.5
    raise LocalizationError("cannot localize: resolution exhausted")


# ---------------------------------------------------------------------------
# the restart driver


@dataclass
class Restart:
    k: int
    t: float
    count: int
    energy_before: float
    energy_after: float
    removed: float
    approximations: list = field(default_factory=list, repr=False)

    @property
    def drop(self) -> float:
        return self.energy_before - self.energy_after


@dataclass
class GeneralizedResult:
    segments: list = field(repr=False)
    restarts: list
    status: flow.Status
    residual_linf: float
    coulomb_residual: float

    @property
    def state(self) -> flow.FlowState:
        return self.segments[-1]

    @property
    def S(self) -> np.ndarray:
        return self.segments[-1].S


def restart_field(S, A, A0, grid: Grid, report: ConcentrationReport, sigma: float, delta_max: float | None = None):
    """Apply the cut-off approximation at every flagged point of ``report``.

    Each point gets the budget ``2 sigma / (3N)``.  Points within ``2h`` of
    the boundary of the square use the boundary construction.
    """
    N = report.count
    budget = 2.0 * sigma / (3.0 * N)
    delta_max = 2.0 * report.radius if delta_max is None else delta_max
    out = []
    S_new = S
    for center, _, _ in report.flagged:
        near_edge = grid.is_square and _interior_room(center, grid) <= 2.0 * grid.h
        if near_edge:
            approx = localize_boundary(S_new, A, A0, grid, center, budget, delta_max)
        else:
            approx = localize_interior(S_new, A, A0, grid, center, budget, delta_max)
        S_new = approx.S
        out.append(approx)
    return S_new, out


def generalized_run(
    S0, A, A0, grid: Grid, config: flow.FlowConfig | None = None, scan_radius: float | None = None,
    inject=None, delta_max: float | None = None, max_restarts: int = 16, dump=None,
) -> GeneralizedResult:
    """Run the flow and restart it past every concentration.

    A restart happens when a segment ends with a step-size collapse, or right
    after ``inject = (t, fn)`` replaced the field ``S`` by ``fn(S)`` at time
    ``t``.  The concentration scan (radius ``scan_radius``, default ``8h``)
    picks the points, each is cut off, the boundary condition is checked, and
    the flow resumes from the new field.  Every restart must lower the energy
    by at least ``N (eps0 - sigma)`` up to ``h E_before``.

    ``dump(name, field)`` is called with the offending field before a
    :class:`RestartError` is raised.
    """
    cfg = config if config is not None else flow.FlowConfig()
    radius = 8.0 * grid.h if scan_radius is None else scan_radius
    stepper = flow.Stepper(A, A0, grid, cfg)
    segments, restarts = [], []
    S, t = np.array(S0, dtype=float, copy=True), 0.0
    pending = inject
    while True:
        end = cfg.t_max if pending is None else min(cfg.t_max, pending[0])
        stepper.config = dataclasses.replace(cfg, t_max=end)
        state = stepper.initial_state(S)
        state.t = t
        flow.continue_run(state, stepper)
        segments.append(state)
        S, t = state.S, state.t
        forced = False
        if pending is not None and (state.status is not flow.Status.CONCENTRATED) and (
            state.t >= pending[0] or state.status is flow.Status.CONVERGED
        ):
            S = np.array(pending[1](S), dtype=float)
            state.log_event("injected", f"t={t:.6g}")
            pending, forced = None, True
        elif state.status is not flow.Status.CONCENTRATED:
            break
        report = concentration_scan(S, A, A0, grid, radius, cfg.eps0)
        if not report.flagged:
            if forced:
                continue
            break
        if len(restarts) >= max_restarts:
            raise RuntimeError(f"more than {max_restarts} restarts")
        e_before = stepper.evaluate(S).energy
        S_new, approximations = restart_field(S, A, A0, grid, report, cfg.sigma, delta_max)
        if grid.is_square:
            violation = flow.check_compatibility(S_new, A, A0, grid)
            if violation > flow.COMPATIBILITY_CONSTANT * grid.h:
                if dump is not None:
                    dump("restart-incompatible", S_new)
                raise RestartError(
                    f"restart at t={t:.6g} breaks the boundary condition by {violation:.3g}", S_new
                )
        e_after = stepper.evaluate(S_new).energy
        rs = Restart(
            len(restarts) + 1, t, report.count, e_before, e_after,
            sum(a.removed for a in approximations), approximations,
        )
        restarts.append(rs)
        state.log_event("restart", f"k={rs.k} N={rs.count} drop={rs.drop:.6g}")
        need = rs.count * (cfg.eps0 - cfg.sigma) - DROP_SLACK * grid.h * e_before
        if rs.drop < need:
            raise EnergyDropViolation(f"restart {rs.k}: energy drop {rs.drop:.6g} < N(eps0 - sigma) = {need:.6g}")
        S = S_new
    stepper.config = cfg
    final = segments[-1]
    coulomb = domain.l2_norm(gauge.coulomb_residual(final.S, A, A0, grid), grid)
    return GeneralizedResult(segments, restarts, final.status, final.residual_linf, coulomb)


def write_restart_ledger(path, restarts) -> None:
    """CSV with columns ``k,T_k,N_k,E_before,E_after,drop``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "T_k", "N_k", "E_before", "E_after", "drop"])
        for rs in restarts:
            w.writerow([rs.k, "%.17g" % rs.t, rs.count, "%.17g" % rs.energy_before, "%.17g" % rs.energy_after,
                        "%.17g" % rs.drop])
