"""Flat two-dimensional grids and second-order finite differences.

Two topologies are supported.  ``Square`` is the closed unit square sampled at
the vertices ``x = (i h, j h)`` with ``h = 1/(n-1)``; ``Torus`` is the unit
flat torus sampled at ``x = (i h, j h)`` with ``h = 1/n``.  Fields are numpy
arrays whose two leading axes are the grid indices ``[i, j]``; any trailing
axes (for instance an ``r x r`` matrix) are carried along untouched.  One-forms
carry an extra leading axis of length two holding the ``dx^1`` and ``dx^2``
components.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class Topology(str, enum.Enum):
    SQUARE = "Square"
    TORUS = "Torus"


class PointKind(enum.IntEnum):
    INTERIOR = 0
    EDGE = 1
    CORNER = 2


@dataclass(frozen=True)
class Grid:
    """Uniform grid on the unit square or the unit torus.

    Attributes
    ----------
    topology : Topology
    n : int
        Points per side.
    h : float
        Grid spacing.
    boundary_mask : ndarray of int, shape (n, n)
        ``PointKind`` of every point.
    normal : ndarray, shape (n, n, 2)
        Outward unit normal at boundary points, zero elsewhere.  Corner
        normals are the normalised sum of the two adjacent edge normals.
    """

    topology: Topology
    n: int
    h: float
    boundary_mask: np.ndarray = field(repr=False)
    normal: np.ndarray = field(repr=False)

    @property
    def is_square(self) -> bool:
        return self.topology is Topology.SQUARE

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate arrays ``(x1, x2)``, each of shape ``(n, n)``."""
        s = np.arange(self.n) * self.h
        return np.meshgrid(s, s, indexing="ij")

    @property
    def boundary_points(self) -> np.ndarray:
        """Indices ``(k, 2)`` of boundary points in row-major order."""
        return np.argwhere(self.boundary_mask != PointKind.INTERIOR)

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights: ``h^2`` inside, halved per boundary axis.

        On the torus every weight is ``h^2``.  On the square the weights are
        those of the tensor trapezoid rule, so that the discrete Neumann
        Laplacian is symmetric in the induced inner product and a constant
        density integrates to exactly one.
        """
        c = np.ones(self.n)
        if self.is_square:
            c[0] = c[-1] = 0.5
        w = self.h**2 * np.outer(c, c)
        w.flags.writeable = False
        return w

    @property
    def side(self) -> float:
        return 1.0


def make_grid(topology: str | Topology, n: int) -> Grid:
    """Build a ``Square`` or ``Torus`` grid with ``n`` points per side."""
    topology = Topology(topology)
    if n < 8:
        raise ValueError(f"grid needs n >= 8 points per side, got {n}")
    mask = np.zeros((n, n), dtype=np.int8)
    normal = np.zeros((n, n, 2))
    if topology is Topology.SQUARE:
        h = 1.0 / (n - 1)
        normal[0, :, 0] = -1.0
        normal[-1, :, 0] = 1.0
        normal[:, 0, 1] = -1.0
        normal[:, -1, 1] = 1.0
        mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = PointKind.EDGE
        for i in (0, n - 1):
            for j in (0, n - 1):
                mask[i, j] = PointKind.CORNER
                normal[i, j] /= np.sqrt(2.0)
    else:
        h = 1.0 / n
    return Grid(topology, n, h, mask, normal)


def _check_field(f: np.ndarray, grid: Grid, lead: int = 0) -> None:
    if f.shape[lead : lead + 2] != grid.shape:
        raise ValueError(
            f"field shape {f.shape} does not match grid {grid.shape} at axis {lead}"
        )


def _diff(f: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    if grid.is_square:
        return np.gradient(f, grid.h, axis=axis, edge_order=2)
    return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2.0 * grid.h)


def grad(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Discrete differential of a scalar or matrix valued field.

    Central differences in the interior; on the square, second-order one-sided
    differences at the boundary; periodic central differences on the torus.

    Returns
    -------
    ndarray of shape ``(2,) + f.shape``
    """
    _check_field(f, grid)
    return np.stack([_diff(f, grid, 0), _diff(f, grid, 1)])


def d_star(omega: np.ndarray, grid: Grid) -> np.ndarray:
    """Codifferential ``-(d_1 w_1 + d_2 w_2)`` with the stencils of :func:`grad`."""
    _check_field(omega, grid, lead=1)
    return -(_diff(omega[0], grid, 0) + _diff(omega[1], grid, 1))


def perp_grad(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Rotated gradient ``(-d_2 f, d_1 f)``."""
    g = grad(f, grid)
    return np.stack([-g[1], g[0]])


def laplacian(f: np.ndarray, grid: Grid, padded: bool = False) -> np.ndarray:
    """Five-point Laplacian.

    Parameters
    ----------
    f : ndarray
        Field of shape ``(n, n, ...)``, or ``(n+2, n+2, ...)`` when ``padded``
        is true, in which case the outer layer holds ghost values.
    padded : bool
        Whether ``f`` already carries a ghost layer.

    Returns
    -------
    ndarray of shape ``(n, n, ...)``.  On the square without ghost data the
    boundary entries cannot be formed and are returned as NaN.
    """
    h2 = grid.h**2
    if padded:
        if f.shape[:2] != (grid.n + 2, grid.n + 2):
            raise ValueError("padded field must have shape (n+2, n+2, ...)")
        c = f[1:-1, 1:-1]
        return (f[2:, 1:-1] + f[:-2, 1:-1] + f[1:-1, 2:] + f[1:-1, :-2] - 4.0 * c) / h2
    _check_field(f, grid)
    if not grid.is_square:
        return (
            np.roll(f, 1, 0) + np.roll(f, -1, 0) + np.roll(f, 1, 1) + np.roll(f, -1, 1) - 4.0 * f
        ) / h2
    out = np.full(f.shape, np.nan)
    out[1:-1, 1:-1] = (
        f[2:, 1:-1] + f[:-2, 1:-1] + f[1:-1, 2:] + f[1:-1, :-2] - 4.0 * f[1:-1, 1:-1]
    ) / h2
    return out


def pad_periodic(f: np.ndarray) -> np.ndarray:
    """Add one periodic ghost layer on the two leading axes."""
    return np.pad(f, [(1, 1), (1, 1)] + [(0, 0)] * (f.ndim - 2), mode="wrap")


def pad_extrapolate(f: np.ndarray, order: int = 2) -> np.ndarray:
    """Add one ghost layer by polynomial extrapolation across each edge.

    ``order`` 1 is linear (``2 f_0 - f_1``), 2 is quadratic.  Corner ghosts
    are filled by extrapolating along the second axis after the first;
    stencils used in this package never read them.
    """
    if order == 1:
        c = (2.0, -1.0, 0.0)
    elif order == 2:
        c = (3.0, -3.0, 1.0)
    else:
        raise ValueError(f"extrapolation order must be 1 or 2, got {order}")
    width = [(1, 1), (1, 1)] + [(0, 0)] * (f.ndim - 2)
    g = np.pad(f, width)
    g[0, 1:-1] = c[0] * f[0] + c[1] * f[1] + c[2] * f[2]
    g[-1, 1:-1] = c[0] * f[-1] + c[1] * f[-2] + c[2] * f[-3]
    g[:, 0] = c[0] * g[:, 1] + c[1] * g[:, 2] + c[2] * g[:, 3]
    g[:, -1] = c[0] * g[:, -2] + c[1] * g[:, -3] + c[2] * g[:, -4]
    return g


def normal_contract(omega: np.ndarray, grid: Grid) -> np.ndarray:
    """Contract a one-form with the outward normal at every boundary point.

    Returns an array of shape ``(k,) + omega.shape[3:]`` ordered like
    :attr:`Grid.boundary_points`.
    """
    if not grid.is_square:
        raise ValueError("the torus has no boundary to contract with")
    _check_field(omega, grid, lead=1)
    idx = grid.boundary_points
    nu = grid.normal[idx[:, 0], idx[:, 1]]
    tail = (slice(None),) + (None,) * (omega.ndim - 3)
    w1 = omega[0][idx[:, 0], idx[:, 1]]
    w2 = omega[1][idx[:, 0], idx[:, 1]]
    return nu[tail + (0,)] * w1 + nu[tail + (1,)] * w2


def distance_to(center, grid: Grid) -> np.ndarray:
    """Euclidean distance from ``center`` to every grid point.

    On the torus the minimum-image distance is used.
    """
    x1, x2 = grid.coords
    d1 = x1 - center[0]
    d2 = x2 - center[1]
    if not grid.is_square:
        d1 = d1 - np.round(d1)
        d2 = d2 - np.round(d2)
    return np.hypot(d1, d2)


def disk_mask(center, radius: float, grid: Grid) -> np.ndarray:
    """Grid points with ``|x - center| <= radius``."""
    return distance_to(center, grid) <= radius * (1.0 + 1e-12)


def local_integral(density: np.ndarray, center, radius: float, grid: Grid) -> float:
    """Integrate ``density`` over the closed disk of ``radius`` around ``center``.

    The disk is intersected with the domain; points are included by
    Euclidean distance, without partial-cell weighting.
    """
    if radius < 2.0 * grid.h * (1.0 - 1e-12):
        raise ValueError(f"radius {radius} is below 2h = {2 * grid.h}; the disk resolves too few points")
    _check_field(density, grid)
    mask = disk_mask(center, radius, grid)
    return float(np.sum(np.where(mask, density * grid.weights, 0.0)))


def integral(density: np.ndarray, grid: Grid) -> float:
    """Integrate a scalar density over the whole domain."""
    _check_field(density, grid)
    return float(np.sum(density * grid.weights))


def inner(f: np.ndarray, g: np.ndarray, grid: Grid, lead: int = 0) -> float:
    """L2 inner product of two fields, summing over all trailing components.

    ``lead`` is the number of leading axes before the grid axes (1 for forms).
    """
    prod = f * g
    prod = prod.reshape(prod.shape[: lead + 2] + (-1,)).sum(axis=-1)
    prod = prod.reshape((-1,) + grid.shape).sum(axis=0)
    return integral(prod, grid)


def l2_norm(f: np.ndarray, grid: Grid, lead: int = 0) -> float:
    """L2 norm with Frobenius norm on the components."""
    return float(np.sqrt(max(inner(f, f, grid, lead=lead), 0.0)))


def pointwise_norm(f: np.ndarray, lead: int = 0) -> np.ndarray:
    """Frobenius norm at every grid point, summing over form components."""
    sq = f * f
    sq = sq.reshape(sq.shape[: lead + 2] + (-1,)).sum(axis=-1)
    if lead:
        sq = sq.sum(axis=tuple(range(lead)))
    return np.sqrt(sq)


# ---------------------------------------------------------------------------
# GFDUMP v1 text format


def write_gfdump(path, values: np.ndarray, grid: Grid, r: int | None = None) -> None:
    """Write a per-point field as a ``GFDUMP v1`` text file.

    ``values`` has shape ``(n, n, ...)``; the trailing axes are flattened in
    C order into the per-point components.
    """
    _check_field(values, grid)
    comps = values.reshape(grid.n * grid.n, -1)
    if r is None:
        r = values.shape[-1] if values.ndim >= 4 and values.shape[-1] == values.shape[-2] else 0
    lines = ["GFDUMP v1", f"{grid.topology.value} {grid.n} {r} {comps.shape[1]}"]
    for k, row in enumerate(comps):
        i, j = divmod(k, grid.n)
        lines.append(f"{i} {j} " + " ".join("%.17g" % v for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_gfdump(path) -> tuple[Grid, int, np.ndarray]:
    """Read a ``GFDUMP v1`` file.

    Returns
    -------
    grid, r, values
        ``values`` has shape ``(n, n, components)``.
    """
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "GFDUMP v1":
            raise ValueError(f"{path}: not a GFDUMP v1 file")
        topology, n, r, ncomp = fh.readline().split()
        n, r, ncomp = int(n), int(r), int(ncomp)
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (n * n, ncomp + 2):
        raise ValueError(f"{path}: expected {n * n} rows of {ncomp + 2} columns")
    order = np.lexsort((data[:, 1], data[:, 0]))
    data = data[order]
    grid = make_grid(topology, n)
    return grid, r, data[:, 2:].reshape(n, n, ncomp)
