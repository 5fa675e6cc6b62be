"""The rotation group SO(r) and its Lie algebra of skew matrices.

Every function is batched: matrices live on the last two axes and any leading
axes are broadcast.
"""

from __future__ import annotations

import numpy as np

INJECTIVITY_GUARD = 1.9
RETRACT_GUARD = 0.5
_TAYLOR_ORDER = 16
_ATANH_TERMS = 16
_ROOTS = 3


class InjectivityError(ValueError):
    """Raised when a logarithm is requested too far from the base point."""


class RetractionError(ArithmeticError):
    """Raised when a matrix is too far from the group to be retracted."""


class TangencyError(ValueError):
    """Raised when a matrix is not tangent to the group at the base point."""


def J2() -> np.ndarray:
    """Generator of rotations in the plane, ``[[0, -1], [1, 0]]``."""
    return np.array([[0.0, -1.0], [1.0, 0.0]])


def so3_basis() -> np.ndarray:
    """The standard basis ``L1, L2, L3`` of so(3), ``[L1, L2] = L3``."""
    L = np.zeros((3, 3, 3))
    for k, (i, j) in enumerate([(2, 1), (0, 2), (1, 0)]):
        L[k, i, j] = 1.0
        L[k, j, i] = -1.0
    return L


def skew_basis(r: int) -> np.ndarray:
    """Orthonormal basis of so(r) in the Frobenius inner product."""
    out = []
    for i in range(r):
        for j in range(i + 1, r):
            e = np.zeros((r, r))
            e[j, i] = 1.0 / np.sqrt(2.0)
            e[i, j] = -1.0 / np.sqrt(2.0)
            out.append(e)
    return np.array(out)


def T(m: np.ndarray) -> np.ndarray:
    """Transpose of the matrix axes."""
    return np.swapaxes(m, -1, -2)


def skew(m: np.ndarray) -> np.ndarray:
    """Projection onto skew matrices, ``(M - M^T) / 2``."""
    return 0.5 * (m - T(m))


def sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + T(m))


def bracket(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Commutator ``ab - ba``."""
    return a @ b - b @ a


def _eye_like(m: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.eye(m.shape[-1]), m.shape)


def _max_abs(x: np.ndarray) -> float:
    return float(np.max(np.abs(x))) if x.size else 0.0


def det(m: np.ndarray) -> np.ndarray:
    """Batched determinant with closed forms for r <= 3."""
    r = m.shape[-1]
    if r == 2:
        return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    if r == 3:
        return (
            m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
            - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
            + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
        )
    return np.linalg.det(m)


def inv_transpose(m: np.ndarray) -> np.ndarray:
    """Batched ``M^{-T}``; cofactor formulas for r <= 3, LAPACK otherwise."""
    r = m.shape[-1]
    if r == 2:
        cof = np.empty_like(m)
        cof[..., 0, 0] = m[..., 1, 1]
        cof[..., 0, 1] = -m[..., 1, 0]
        cof[..., 1, 0] = -m[..., 0, 1]
        cof[..., 1, 1] = m[..., 0, 0]
        return cof / det(m)[..., None, None]
    if r == 3:
        a, b = m[..., [1, 2, 0], :], m[..., [2, 0, 1], :]
        cof = np.empty_like(m)
        # row i of the cofactor matrix is the cross product of the other two rows
        for i in range(3):
            u, v = a[..., i, :], b[..., i, :]
            cof[..., i, 0] = u[..., 1] * v[..., 2] - u[..., 2] * v[..., 1]
            cof[..., i, 1] = u[..., 2] * v[..., 0] - u[..., 0] * v[..., 2]
            cof[..., i, 2] = u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
        return cof / det(m)[..., None, None]
    return T(np.linalg.inv(m))


def _polar_newton(m: np.ndarray, tol: float = 1e-14, max_iter: int = 60) -> np.ndarray:
    x = np.array(m, dtype=float, copy=True)
    for _ in range(max_iter):
        nxt = 0.5 * (x + inv_transpose(x))
        change = _max_abs(nxt - x)
        x = nxt
        if change <= tol:
            break
    return x


def orthogonality_defect(m: np.ndarray) -> np.ndarray:
    """Pointwise ``max |M^T M - I|``."""
    d = T(m) @ m - _eye_like(m)
    return np.max(np.abs(d), axis=(-1, -2))


def retract(m: np.ndarray) -> np.ndarray:
    """Polar factor of ``M``, the nearest orthogonal matrix.

    Computed by the Newton iteration ``X <- (X + X^{-T}) / 2``.

    Raises
    ------
    RetractionError
        If ``det M <= 0`` or ``||M^T M - I||_2 >= 0.5`` anywhere.
    """
    m = np.asarray(m, dtype=float)
    gram = T(m) @ m - _eye_like(m)
    fro = np.sqrt(np.sum(gram * gram, axis=(-1, -2)))
    bad = fro >= RETRACT_GUARD
    if np.any(bad):
        # Frobenius bounds the spectral norm from above; confirm with the exact norm
        exact = np.linalg.norm(gram[bad], ord=2, axis=(-1, -2))
        if np.any(exact >= RETRACT_GUARD):
            raise RetractionError(
                f"retraction diverged: ||M^T M - I||_2 = {exact.max():.3g} >= {RETRACT_GUARD}"
            )
    if np.any(det(m) <= 0.0):
        raise RetractionError("retraction diverged: det(M) <= 0")
    return _polar_newton(m)


def _expm_series(x: np.ndarray) -> np.ndarray:
    """Scaling and squaring with a degree-16 Taylor polynomial."""
    norm1 = np.max(np.sum(np.abs(x), axis=-2)) if x.size else 0.0
    s = int(max(0, np.ceil(np.log2(norm1 / 0.5)))) if norm1 > 0.5 else 0
    x = x / 2.0**s
    eye = _eye_like(x)
    p = eye.copy()
    for k in range(_TAYLOR_ORDER, 0, -1):
        p = eye + (x @ p) / k
    for _ in range(s):
        p = p @ p
    return p


def _sinc_terms(angle: np.ndarray):
    """``sin(t)/t`` and ``(1 - cos t)/t^2`` with their series near zero."""
    small = angle < 1e-4
    safe = np.where(small, 1.0, angle)
    t2 = angle * angle
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(safe)) / safe**2)
    return a, b


def _expm_closed(x: np.ndarray) -> np.ndarray:
    r = x.shape[-1]
    if r == 2:
        c, s = np.cos(x[..., 1, 0]), np.sin(x[..., 1, 0])
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    # Rodrigues: exp(X) = I + sinc(t) X + (1 - cos t)/t^2 X^2 with t = |X|_F / sqrt(2)
    angle = np.sqrt(0.5 * np.sum(x * x, axis=(-2, -1)))
    a, b = _sinc_terms(angle)
    return _eye_like(x) + a[..., None, None] * x + b[..., None, None] * (x @ x)


def expm(a: np.ndarray) -> np.ndarray:
    """Exponential of skew matrices.

    For r = 2 and r = 3 the closed forms (a planar rotation, Rodrigues'
    formula) are used.  Larger matrices go through scaling and squaring with
    a degree-16 Taylor polynomial, followed by a retraction that removes the
    rounding drift off the group.
    """
    a = np.asarray(a, dtype=float)
    scale = max(1.0, _max_abs(a))
    if _max_abs(a + T(a)) > 1e-10 * scale:
        raise ValueError("expm expects skew matrices")
    if a.shape[-1] in (2, 3):
        return _expm_closed(skew(a))
    return _polar_newton(_expm_series(a))


def _logm_closed(g: np.ndarray) -> np.ndarray:
    r = g.shape[-1]
    if r == 2:
        angle = np.arctan2(g[..., 1, 0] - g[..., 0, 1], g[..., 0, 0] + g[..., 1, 1])
        return angle[..., None, None] * J2()
    cos = np.clip(0.5 * (np.trace(g, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    angle = np.arccos(cos)
    small = angle < 1e-4
    safe = np.where(small, 1.0, angle)
    t2 = angle * angle
    factor = np.where(small, 0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0, 0.5 * safe / np.sin(safe))
    return factor[..., None, None] * (g - T(g))


def expm_skew(a: np.ndarray) -> np.ndarray:
    """:func:`expm` for arguments already known to be skew; no input check."""
    if a.shape[-1] in (2, 3):
        return _expm_closed(a)
    return _polar_newton(_expm_series(a))


def logm_near(g: np.ndarray) -> np.ndarray:
    """:func:`logm` without the injectivity guard, for callers that checked it.

    Uses the closed forms for r = 2 and r = 3.
    """
    g = np.asarray(g, dtype=float)
    if g.shape[-1] in (2, 3):
        return _logm_closed(g)
    return logm(g)


def logm(g: np.ndarray) -> np.ndarray:
    """Principal logarithm of rotations with ``||g - I||_2 < 1.9``.

    For r = 2 and r = 3 the rotation angle is read off the trace.  Otherwise
    the angles are first halved three times by square roots (the principal
    root of a rotation is the polar factor of ``I + g``), then the Cayley
    transform ``Y = (g - I)(g + I)^{-1}`` is mapped back with the series
    ``log g = 2 artanh(Y)``.

    Raises
    ------
    InjectivityError
        ``outside injectivity neighborhood`` if any element violates the guard.
    """
    g = np.asarray(g, dtype=float)
    eye = _eye_like(g)
    dist = np.linalg.norm(g - eye, ord=2, axis=(-2, -1))
    if np.any(dist >= INJECTIVITY_GUARD):
        raise InjectivityError(
            f"outside injectivity neighborhood: ||g - I||_2 = {np.max(dist):.4g} >= {INJECTIVITY_GUARD}"
        )
    if g.shape[-1] in (2, 3):
        return _logm_closed(g)
    x = g
    for _ in range(_ROOTS):
        x = _polar_newton(eye + x)
    y = (x - eye) @ T(inv_transpose(x + eye))
    y = skew(y)
    y2 = y @ y
    term = y
    out = y.copy()
    for k in range(1, _ATANH_TERMS):
        term = term @ y2
        out = out + term / (2 * k + 1)
    return skew(out * 2.0 ** (_ROOTS + 1))


def exp_at(u0: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Group exponential at base point ``u0`` applied to tangent vector ``x``."""
    a = T(u0) @ x
    if _max_abs(a + T(a)) > 1e-10 * max(1.0, _max_abs(a)):
        raise TangencyError("u0^T X is not skew: X is not tangent at u0")
    return u0 @ expm(skew(a))


def log_at(u0: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_at`; requires ``||u0^T u - I||_2 < 1.9``."""
    return u0 @ logm(T(u0) @ u)


def random_skew(rng: np.random.Generator, r: int, shape=(), scale: float = 1.0) -> np.ndarray:
    """Skew matrices with independent Gaussian entries above the diagonal."""
    return skew(rng.standard_normal(tuple(shape) + (r, r))) * scale


def random_rotation(rng: np.random.Generator, r: int, shape=()) -> np.ndarray:
    """Random rotations from a sign-corrected QR factorisation."""
    q, rr = np.linalg.qr(rng.standard_normal(tuple(shape) + (r, r)))
    q = q * np.sign(np.diagonal(rr, axis1=-2, axis2=-1))[..., None, :]
    flip = np.where(det(q) < 0, -1.0, 1.0)
    q[..., :, 0] *= flip[..., None]
    return q
