"""Time integration of the gauge heat flow.

Each step moves every point along ``-S R`` (explicit Euler in the ambient
matrix space), maps the result back to the group with the polar factor and
accepts the step only if the energy did not go up.  Rejected steps are
retried with half the step size.

Two schemes are available:

``"explicit"``
    ``dt = dt_factor * h**2 / 4`` for every step (halved only for a step
    that was rejected).
``"semi-implicit"``
    The velocity is smoothed by ``(I - dt L)^{-1}`` with the five-point
    Neumann (square) or periodic (torus) Laplacian ``L`` before the Euler
    step.  Fixed points are the same as for the explicit scheme, but the
    step is not limited by ``h**2``.  ``dt`` adapts: halved on rejection,
    grown by 1.5 after each accepted step up to ``dt_max``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.fft

from . import domain, gauge
from ._kernels import kernels_for
from .domain import Grid
from .group import RETRACT_GUARD, RetractionError, T, retract, skew_basis

MONOTONE_SLACK = 1e-10
COMPATIBILITY_CONSTANT = 10.0


class StepSizeCollapse(RuntimeError):
    """Raised when a step is rejected ``max_halvings`` times in a row."""


class Status(str, enum.Enum):
    RUNNING = "Running"
    CONVERGED = "Converged"
    TIMED_OUT = "TimedOut"
    CONCENTRATED = "Concentrated"


@dataclass
class FlowConfig:
    """Parameters of a flow run.

    ``sigma`` defaults to ``eps0 / 2``.  ``dt_max`` only matters for the
    semi-implicit scheme, where it defaults to ``0.05``.  ``max_steps`` of
    ``None`` means no step limit beyond ``t_max``.
    """

    dt_factor: float = 0.5
    t_max: float = 10.0
    residual_tol: float = 1e-8
    drift_tol: float = 1e-6
    eps0: float = 4.0 * math.pi
    sigma: float | None = None
    record_every: int = 100
    snapshot_every: int = 0
    scheme: str = "explicit"
    dt_max: float | None = None
    max_steps: int | None = None
    max_halvings: int = 20

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = 0.5 * self.eps0
        if not 0.0 < self.dt_factor <= 1.0:
            raise ValueError(f"dt_factor must lie in (0, 1], got {self.dt_factor}")
        if self.residual_tol <= 0.0:
            raise ValueError("residual_tol must be positive")
        if self.eps0 <= 0.0 or self.sigma <= 0.0:
            raise ValueError("eps0 and sigma must be positive")
        if self.sigma >= self.eps0:
            raise ValueError("sigma must be < eps0")
        if self.scheme not in ("explicit", "semi-implicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.max_halvings < 1:
            raise ValueError("max_halvings must be >= 1")

    def time_step(self, grid: Grid) -> float:
        """The explicit step ``dt_factor * h**2 / 4``."""
        return self.dt_factor * grid.h**2 / 4.0

    def largest_step(self) -> float:
        return 0.05 if self.dt_max is None else float(self.dt_max)


class Record(NamedTuple):
    t: float
    energy: float
    residual_l2: float
    residual_linf: float
    drift: float


class Evaluation(NamedTuple):
    R: np.ndarray
    density: np.ndarray
    energy: float
    residual_l2: float
    residual_linf: float


class Event(NamedTuple):
    t: float
    kind: str
    data: str


@dataclass
class Snapshot:
    """Saved state with the energy density and the accumulated dissipation.

    ``dissipation`` is ``sum over accepted steps of |S_new - S|_F^2 / dt`` at
    every point, a discrete ``int_0^t |d_t S|^2``.
    """

    t: float
    step: int
    S: np.ndarray = field(repr=False)
    energy: float
    density: np.ndarray = field(repr=False)
    dissipation: np.ndarray = field(repr=False)


@dataclass
class FlowState:
    S: np.ndarray = field(repr=False)
    t: float = 0.0
    step: int = 0
    energy: float = math.nan
    energy0: float = math.nan
    residual_l2: float = math.nan
    residual_linf: float = math.nan
    dt: float = math.nan
    drift: float = 0.0
    post_drift: float = 0.0
    dissipated: float = 0.0
    status: Status = Status.RUNNING
    R: np.ndarray | None = field(default=None, repr=False)
    density: np.ndarray | None = field(default=None, repr=False)
    dissipation: np.ndarray | None = field(default=None, repr=False)
    energy_series: list = field(default_factory=list, repr=False)
    step_log: list = field(default_factory=list, repr=False)
    events: list = field(default_factory=list, repr=False)
    snapshots: list = field(default_factory=list, repr=False)

    def record(self) -> None:
        self.energy_series.append(Record(self.t, self.energy, self.residual_l2, self.residual_linf, self.drift))

    def log_event(self, kind: str, data: str = "") -> None:
        self.events.append(Event(self.t, kind, data))

    def snapshot(self) -> Snapshot:
        snap = Snapshot(self.t, self.step, self.S.copy(), self.energy, self.density.copy(), self.dissipation.copy())
        self.snapshots.append(snap)
        return snap

    def dissipation_defect(self) -> float:
        """``E(0) - E(t) - sum dt |d_t S|^2``, zero for the exact flow."""
        return self.energy0 - self.energy - self.dissipated


# ---------------------------------------------------------------------------
# boundary data


def check_compatibility(S0, A, A0, grid: Grid) -> float:
    """Largest Frobenius norm of the normal part of ``S0*(A) - A0`` on the boundary."""
    if not grid.is_square:
        raise ValueError("compatibility is a boundary condition; the torus has no boundary")
    omega = gauge.pullback(S0, A, grid, check=False) - A0
    nu = domain.normal_contract(omega, grid)
    return float(np.max(domain.pointwise_norm(nu[:, None])))


def apply_boundary_ghosts(S, A, A0, grid: Grid) -> np.ndarray:
    """``S`` padded by one ghost layer encoding the oblique boundary condition.

    The central normal difference at each boundary point equals
    ``-[A_nu, u] - u a_nu``.  On the torus the padding is periodic.
    """
    return gauge.extend_with_ghosts(S, A, A0, grid)[0]


# ---------------------------------------------------------------------------
# the smoother of the semi-implicit scheme


class HeatSmoother:
    """Applies ``(I - dt L)^{-1}`` to every matrix entry of a field.

    ``L`` is the five-point Laplacian with mirror ghosts (square) or periodic
    wrap (torus), diagonalised by the type-I cosine transform or the FFT.  On
    the square it is symmetric for the trapezoid inner product, so the
    smoothed velocity is still a descent direction.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        n, h = grid.n, grid.h
        k = np.arange(n)
        if grid.is_square:
            lam = (2.0 * np.cos(np.pi * k / (n - 1)) - 2.0) / h**2
        else:
            lam = (2.0 * np.cos(2.0 * np.pi * k / n) - 2.0) / h**2
        self.eigenvalues = lam[:, None] + lam[None, :]

    def apply(self, V: np.ndarray, dt: float) -> np.ndarray:
        factor = (1.0 / (1.0 - dt * self.eigenvalues))[:, :, None, None]
        if self.grid.is_square:
            return scipy.fft.idctn(scipy.fft.dctn(V, type=1, axes=(0, 1)) * factor, type=1, axes=(0, 1))
        return scipy.fft.ifftn(scipy.fft.fftn(V, axes=(0, 1)) * factor, axes=(0, 1)).real


# ---------------------------------------------------------------------------
# constant gauge symmetries


def symmetry_directions(A0: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Orthonormal constant skew matrices ``X`` with ``[X, A0] = 0`` everywhere.

    Right multiplication by ``exp(X)`` leaves the energy unchanged, so the
    exact gradient has zero weighted mean along these directions.  Returns an
    array of shape ``(m, r, r)``.
    """
    r = A0.shape[-1]
    basis = skew_basis(r)
    if len(basis) == 0:
        return basis
    flat = A0.reshape((-1, r, r))
    comm = np.stack([(e @ flat - flat @ e).reshape(-1) for e in basis])
    gram = comm @ comm.T
    vals, vecs = np.linalg.eigh(gram)
    scale = max(1.0, float(np.max(np.abs(vals))))
    keep = vecs[:, vals <= tol * scale]
    return np.einsum("am,aij->mij", keep, basis)


def remove_symmetric_part(R: np.ndarray, directions: np.ndarray, grid: Grid, r2: float):
    """Subtract from ``R`` its weighted mean along ``directions``.

    Returns the projected field and its squared weighted L2 norm, updated from
    ``r2`` (the squared norm before projection).
    """
    W = grid.weights
    area = float(np.sum(W))
    mean = np.einsum("ij,ijpq->pq", W, R) / area
    coeff = np.einsum("mpq,pq->m", directions, mean)
    shift = np.einsum("m,mpq->pq", coeff, directions)
    return R - shift, r2 - area * float(coeff @ coeff)


# ---------------------------------------------------------------------------
# stepping


class Stepper:
    """Evaluates residual and energy and performs steps for fixed ``A, A0``.

    With ``form=None`` the compiled kernels are used.  Passing one of the
    residual forms of :func:`gaugeflow.gauge.flow_residual` switches to the
    numpy reference code (much slower; used to cross-check the kernels and
    the formulations against each other).
    """

    def __init__(self, A, A0, grid: Grid, config: FlowConfig | None = None, form: str | None = None):
        self.A = np.ascontiguousarray(A, dtype=float)
        self.A0 = np.ascontiguousarray(A0, dtype=float)
        self.grid = grid
        self.config = config if config is not None else FlowConfig()
        self.form = form
        self.r = self.A.shape[-1]
        self.a = self.A - self.A0
        self.smoother = HeatSmoother(grid) if self.config.scheme == "semi-implicit" else None
        if form is None:
            self.kernels = kernels_for(self.r)
            identity = np.broadcast_to(np.eye(self.r), grid.shape + (self.r, self.r))
            _, self.A_ext, a_ext = gauge.extend_with_ghosts(identity, self.A, self.A0, grid)
            self.A_ext = np.ascontiguousarray(self.A_ext)
            inv2h = 1.0 / (2.0 * grid.h)
            div_a = (a_ext[0, 2:, 1:-1] - a_ext[0, :-2, 1:-1]) * inv2h + (
                a_ext[1, 1:-1, 2:] - a_ext[1, 1:-1, :-2]
            ) * inv2h
            self.C0 = np.ascontiguousarray(div_a + (self.A @ self.a - self.a @ self.A).sum(axis=0))
            m = grid.n + 2
            self._U = np.empty((m, m, self.r, self.r))
            self._P = np.empty((2, m, m, self.r, self.r))
        self.symmetries = symmetry_directions(self.A0)

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, S: np.ndarray) -> Evaluation:
        """Residual, energy density and their integrals for ``S``."""
        if self.form is not None:
            R = gauge.flow_residual(S, self.A, self.A0, self.grid, form=self.form)
            dens = gauge.energy(S, self.A, self.A0, self.grid).density
            return Evaluation(
                R, dens, domain.integral(dens, self.grid), domain.l2_norm(R, self.grid),
                float(np.max(domain.pointwise_norm(R))),
            )
        S = np.ascontiguousarray(S, dtype=float)
        k = self.kernels
        k.fill_ghosts(S, not self.grid.is_square, self._U)
        if self.grid.is_square:
            gauge.fill_square_ghosts(self._U, S, self.A, self.a, self.grid.h)
        k.bracket_field(self.A_ext, self._U, self._P)
        R = np.empty_like(S)
        dens = np.empty(self.grid.shape)
        energy, r2, rinf = k.residual_energy(
            self._U, self._P, self.A, self.A0, self.a, self.C0, self.grid.h, self.grid.is_square,
            self.grid.weights, R, dens,
        )
        if len(self.symmetries):
            R, r2 = remove_symmetric_part(R, self.symmetries, self.grid, r2)
            rinf = float(np.sqrt(np.max(np.sum(R * R, axis=(-2, -1)))))
        return Evaluation(R, dens, energy, math.sqrt(max(r2, 0.0)), rinf)

    def refresh(self, state: FlowState) -> None:
        """Recompute residual and energy after ``state.S`` was changed."""
        self._adopt(state, self.evaluate(state.S))

    @staticmethod
    def _adopt(state: FlowState, ev: Evaluation) -> None:
        state.R, state.density, state.energy = ev.R, ev.density, ev.energy
        state.residual_l2, state.residual_linf = ev.residual_l2, ev.residual_linf

    def initial_state(self, S0: np.ndarray) -> FlowState:
        state = FlowState(S=np.array(S0, dtype=float, copy=True))
        self.refresh(state)
        state.energy0 = state.energy
        state.dissipation = np.zeros(self.grid.shape)
        state.dt = self.initial_dt()
        return state

    def initial_dt(self) -> float:
        return self.config.time_step(self.grid) if self.smoother is None else self.config.largest_step()

    def _euler_retract(self, S, V, dt):
        if self.form is not None:
            M = S + dt * V
            gram = T(M) @ M - np.eye(self.r)
            drift = float(np.max(np.abs(gram)))
            out = retract(M)
            post = float(np.max(np.abs(T(out) @ out - np.eye(self.r))))
            diss = np.sum((out - S) ** 2, axis=(-2, -1)) / dt
            return out, diss, domain.integral(diss, self.grid), drift, post
        out = np.empty_like(S)
        diss = np.empty(self.grid.shape)
        drift, post, status, total = self.kernels.euler_retract(S, V, dt, RETRACT_GUARD, self.grid.weights, out, diss)
        if status == 1:
            raise RetractionError(f"retraction diverged: ||M^T M - I||_F >= {RETRACT_GUARD}")
        if status == 2:
            raise RetractionError("retraction diverged: det(M) <= 0")
        return out, diss, total, drift, post

    def velocity(self, S, R) -> np.ndarray:
        if self.form is not None:
            return -(S @ R)
        V = np.empty_like(S)
        self.kernels.left_multiply(S, R, V)
        return V

    def step(self, state: FlowState) -> FlowState:
        """Advance ``state`` in place by one accepted step.

        Raises
        ------
        StepSizeCollapse
            After ``max_halvings`` consecutive rejections.
        RetractionError
            If the explicit predictor leaves the retraction neighbourhood.
        """
        cfg = self.config
        semi = self.smoother is not None
        dt = state.dt if semi else cfg.time_step(self.grid)
        slack = MONOTONE_SLACK * state.energy0
        V = self.velocity(state.S, state.R)
        rejections = 0
        while True:
            W = self.smoother.apply(V, dt) if semi else V
            try:
                S_new, diss, diss_total, drift, post = self._euler_retract(state.S, W, dt)
            except RetractionError:
                if not semi:
                    raise
                S_new = None
            if S_new is not None:
                ev = self.evaluate(S_new)
                if ev.energy <= state.energy + slack:
                    break
            rejections += 1
            state.log_event("rejected", f"dt={dt:.6g}")
            if rejections >= cfg.max_halvings:
                raise StepSizeCollapse(
                    f"step-size collapse after {rejections} rejections at t={state.t:.6g} (likely concentration)"
                )
            dt *= 0.5
        if post > cfg.drift_tol:
            raise RetractionError(f"retraction left drift {post:.3g} > {cfg.drift_tol}")
        state.step_log.append((state.t, dt, state.energy, ev.energy, rejections))
        state.S = S_new
        self._adopt(state, ev)
        state.t += dt
        state.step += 1
        state.drift, state.post_drift = drift, post
        state.dissipation += diss
        state.dissipated += diss_total
        if semi:
            state.dt = min(cfg.largest_step(), 1.5 * dt)
        return state


def step(state: FlowState, A, A0, grid: Grid, config: FlowConfig | None = None, form: str | None = None) -> FlowState:
    """One accepted step of ``state`` (in place); see :meth:`Stepper.step`.

    A state without residual (for example freshly built from a field) is
    initialised first.
    """
    stepper = Stepper(A, A0, grid, config, form)
    if state.R is None:
        stepper.refresh(state)
    if math.isnan(state.energy0):
        state.energy0 = state.energy
    if state.dissipation is None:
        state.dissipation = np.zeros(grid.shape)
    if math.isnan(state.dt):
        state.dt = stepper.initial_dt()
    return stepper.step(state)


def run(
    S0,
    A,
    A0,
    grid: Grid,
    config: FlowConfig | None = None,
    form: str | None = None,
    callback: Callable[[FlowState, Stepper], None] | None = None,
    stepper: Stepper | None = None,
) -> FlowState:
    """Iterate until convergence, ``t_max``, the step limit or a collapse.

    ``callback(state, stepper)`` is called after every accepted step; it may
    modify ``state.S`` and must then call ``stepper.refresh(state)``.
    """
    cfg = config if config is not None else FlowConfig()
    stepper = stepper if stepper is not None else Stepper(A, A0, grid, cfg, form)
    state = stepper.initial_state(S0)
    if grid.is_square:
        violation = check_compatibility(S0, A, A0, grid)
        if violation > COMPATIBILITY_CONSTANT * grid.h:
            state.log_event("incompatible-initial-data", f"max_violation={violation:.6g}")
    return continue_run(state, stepper, callback)


def continue_run(state: FlowState, stepper: Stepper, callback=None) -> FlowState:
    """Keep stepping an existing state with the settings of ``stepper``."""
    cfg = stepper.config
    state.status = Status.RUNNING
    state.record()
    if cfg.snapshot_every:
        state.snapshot()
    while True:
        if state.residual_linf <= cfg.residual_tol:
            state.status = Status.CONVERGED
            break
        if state.t >= cfg.t_max or (cfg.max_steps is not None and state.step >= cfg.max_steps):
            state.status = Status.TIMED_OUT
            break
        try:
            stepper.step(state)
        except StepSizeCollapse as exc:
            state.status = Status.CONCENTRATED
            state.log_event("step-size-collapse", str(exc))
            break
        if callback is not None:
            callback(state, stepper)
        if state.step % cfg.record_every == 0:
            state.record()
        if cfg.snapshot_every and state.step % cfg.snapshot_every == 0:
            state.snapshot()
    if not state.energy_series or state.energy_series[-1].t != state.t:
        state.record()
    if cfg.snapshot_every and state.snapshots[-1].step != state.step:
        state.snapshot()
    state.log_event("finished", f"status={state.status.value} steps={state.step}")
    return state


# ---------------------------------------------------------------------------
# local energy inequalities


@dataclass
class LocalEnergyCheck:
    center: tuple
    R1: float
    R2: float
    T1: float
    T2: float
    forward_lhs: float
    forward_rhs: float
    reverse_lhs: float
    reverse_rhs: float

    @property
    def forward_ok(self) -> bool:
        return self.forward_lhs <= self.forward_rhs

    @property
    def reverse_ok(self) -> bool:
        return self.reverse_lhs <= self.reverse_rhs

    @property
    def slack(self) -> float:
        """Smallest ratio of right to left side over both inequalities."""
        ratios = [rhs / lhs for lhs, rhs in ((self.forward_lhs, self.forward_rhs), (self.reverse_lhs, self.reverse_rhs)) if lhs > 0]
        return min(ratios) if ratios else math.inf


@dataclass
class LocalEnergyReport:
    checks: list
    tol_disc: float

    @property
    def ok(self) -> bool:
        return all(c.forward_ok and c.reverse_ok for c in self.checks)

    @property
    def violations(self) -> list:
        return [c for c in self.checks if not (c.forward_ok and c.reverse_ok)]


def _snapshot_at(state: FlowState, t: float) -> Snapshot:
    if not state.snapshots:
        raise ValueError("trajectory has no snapshots; run with snapshot_every > 0")
    best = min(state.snapshots, key=lambda s: abs(s.t - t))
    if abs(best.t - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"no snapshot at t={t:.9g} (closest is t={best.t:.9g})")
    return best


def verify_local_energy_inequalities(
    state: FlowState, grid: Grid, tuples, c_disc: float = 1.0, dt: float | None = None
) -> LocalEnergyReport:
    """Check the forward and reverse local energy inequalities.

    For every ``(x0, R1, R2, T1, T2)`` with ``R2 < R1`` and ``T1 < T2``
    (times must be snapshot times)::

        E(T2; D_R2) <= E(T1; D_R1) + 8 (T2 - T1) / (R1 - R2)^2 E(0) + tol
        E(T1; D_R2) <= E(T2; D_R1) + 2 int_T1^T2 int_D_R1 |d_t S|^2
                       + 8 (T2 - T1) / (R1 - R2)^2 E(0) + tol

    with ``tol = c_disc (h + dt) E(0)`` and ``dt`` the largest step taken.
    """
    if dt is None:
        dt = max((row[1] for row in state.step_log), default=0.0)
    E0 = state.energy0
    tol = c_disc * (grid.h + dt) * E0
    checks = []
    for x0, R1, R2, T1, T2 in tuples:
        if not (R2 < R1 and T1 < T2):
            raise ValueError("need R2 < R1 and T1 < T2")
        s1, s2 = _snapshot_at(state, T1), _snapshot_at(state, T2)
        cutoff = 8.0 * (T2 - T1) / (R1 - R2) ** 2 * E0
        dissip = domain.local_integral(s2.dissipation - s1.dissipation, x0, R1, grid)
        checks.append(
            LocalEnergyCheck(
                tuple(x0), R1, R2, T1, T2,
                forward_lhs=domain.local_integral(s2.density, x0, R2, grid),
                forward_rhs=domain.local_integral(s1.density, x0, R1, grid) + cutoff + tol,
                reverse_lhs=domain.local_integral(s1.density, x0, R2, grid),
                reverse_rhs=domain.local_integral(s2.density, x0, R1, grid) + 2.0 * dissip + cutoff + tol,
            )
        )
    return LocalEnergyReport(checks, tol)


# ---------------------------------------------------------------------------
# output


def write_energy_series(path, state: FlowState) -> None:
    """CSV ``t,total,residual_l2,residual_linf,drift``."""
    gauge.write_energy_csv(path, state.energy_series, with_drift=True)


def write_events(path, events) -> None:
    """One ``t=<t> event=<kind> data=<data>`` line per event."""
    with open(path, "w") as fh:
        for ev in events:
            fh.write(f"t={ev.t:.17g} event={ev.kind} data={ev.data}\n")
