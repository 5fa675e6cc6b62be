"""Compiled point loops for the time stepper.

The kernels mirror the numpy reference code in :mod:`gaugeflow.gauge`
(compact residual, energy density, ghost layer) and :mod:`gaugeflow.group`
(polar retraction) and are checked against it in the test suite.  They are
generated per matrix size ``r`` so that the small matrix loops have constant
trip counts and get unrolled.  All loops run in a fixed order, so results are
reproducible bit for bit.
"""

from __future__ import annotations

from functools import lru_cache
from types import SimpleNamespace

import numpy as np
from numba import njit


@lru_cache(maxsize=None)
def kernels_for(r: int) -> SimpleNamespace:
    """Kernels specialised to ``r x r`` matrices, compiled on first use."""

    @njit
    def mm(x, y, out):
        for p in range(r):
            for q in range(r):
                s = 0.0
                for c in range(r):
                    s += x[p, c] * y[c, q]
                out[p, q] = s

    @njit
    def mtm(x, y, out):
        for p in range(r):
            for q in range(r):
                s = 0.0
                for c in range(r):
                    s += x[c, p] * y[c, q]
                out[p, q] = s

    @njit
    def fill_ghosts(S, periodic, U):
        """Copy ``S`` into ``U[1:-1, 1:-1]``; on the torus also wrap the layer.

        The square's ghost layer is written afterwards by
        :func:`gaugeflow.gauge.fill_square_ghosts`.
        """
        n = S.shape[0]
        for i in range(n):
            for j in range(n):
                for p in range(r):
                    for q in range(r):
                        U[i + 1, j + 1, p, q] = S[i, j, p, q]
        if not periodic:
            return
        for t in range(n):
            for p in range(r):
                for q in range(r):
                    U[0, t + 1, p, q] = S[n - 1, t, p, q]
                    U[n + 1, t + 1, p, q] = S[0, t, p, q]
                    U[t + 1, 0, p, q] = S[t, n - 1, p, q]
                    U[t + 1, n + 1, p, q] = S[t, 0, p, q]
        for p in range(r):
            for q in range(r):
                U[0, 0, p, q] = S[n - 1, n - 1, p, q]
                U[0, n + 1, p, q] = S[n - 1, 0, p, q]
                U[n + 1, 0, p, q] = S[0, n - 1, p, q]
                U[n + 1, n + 1, p, q] = S[0, 0, p, q]

    @njit
    def bracket_field(A, U, out):
        """``out[k] = [A_k, U]`` on the padded grid."""
        m = U.shape[0]
        t1 = np.empty((r, r))
        t2 = np.empty((r, r))
        for k in range(2):
            for i in range(m):
                for j in range(m):
                    mm(A[k, i, j], U[i, j], t1)
                    mm(U[i, j], A[k, i, j], t2)
                    for p in range(r):
                        for q in range(r):
                            out[k, i, j, p, q] = t1[p, q] - t2[p, q]

    @njit
    def one_sided(U, I, J, axis, low, inv2h, out):
        # second-order difference pointing into the domain, padded indices
        di = 1 if axis == 0 else 0
        dj = 1 - di
        if not low:
            di = -di
            dj = -dj
        c = 1.0 if low else -1.0
        for p in range(r):
            for q in range(r):
                out[p, q] = c * (
                    -3.0 * U[I, J, p, q] + 4.0 * U[I + di, J + dj, p, q] - U[I + 2 * di, J + 2 * dj, p, q]
                ) * inv2h

    @njit
    def residual_energy(U, P, A, A0, a, C0, h, square, W, R, dens):
        """Compact residual and energy density at every real point.

        Returns the energy ``sum W dens``, the squared weighted L2 norm of
        ``R`` and the largest pointwise Frobenius norm of ``R``.

        ``R = -skew(u^T F)`` from the expanded equation with the five-point
        Laplacian; ``C0 = d_k a_k + [A_k, a_k]`` does not depend on the state.
        The density uses central differences, except across the boundary of
        the square where the one-sided stencil is used, exactly like
        :func:`gaugeflow.gauge.energy`.
        """
        n = U.shape[0] - 2
        inv2h = 1.0 / (2.0 * h)
        invh2 = 1.0 / (h * h)
        X = np.empty((r, r))
        Y = np.empty((r, r))
        ucov = np.empty((2, r, r))
        B = np.empty((r, r))
        D = np.empty((r, r))
        t1 = np.empty((r, r))
        t2 = np.empty((r, r))
        energy = 0.0
        r2 = 0.0
        rinf = 0.0
        for i in range(n):
            I = i + 1
            for j in range(n):
                J = j + 1
                for p in range(r):
                    for q in range(r):
                        c = U[I, J, p, q]
                        lap = (U[I + 1, J, p, q] + U[I - 1, J, p, q] + U[I, J + 1, p, q]
                               + U[I, J - 1, p, q] - 4.0 * c) * invh2
                        divp = (P[0, I + 1, J, p, q] - P[0, I - 1, J, p, q]
                                + P[1, I, J + 1, p, q] - P[1, I, J - 1, p, q]) * inv2h
                        X[p, q] = lap + divp
                        ucov[0, p, q] = (U[I + 1, J, p, q] - U[I - 1, J, p, q]) * inv2h + P[0, I, J, p, q]
                        ucov[1, p, q] = (U[I, J + 1, p, q] - U[I, J - 1, p, q]) * inv2h + P[1, I, J, p, q]
                for k in range(2):
                    mm(A[k, i, j], ucov[k], t1)
                    mm(ucov[k], A[k, i, j], t2)
                    for p in range(r):
                        for q in range(r):
                            X[p, q] += t1[p, q] - t2[p, q]
                mtm(U[I, J], X, Y)
                e = 0.0
                for k in range(2):
                    mtm(U[I, J], ucov[k], B)
                    mm(B, B, t1)
                    for p in range(r):
                        for q in range(r):
                            Y[p, q] -= t1[p, q]
                    mm(B, a[k, i, j], t1)
                    mm(a[k, i, j], B, t2)
                    for p in range(r):
                        for q in range(r):
                            Y[p, q] += t1[p, q] - t2[p, q]
                    idx = i if k == 0 else j
                    if square and (idx == 0 or idx == n - 1):
                        one_sided(U, I, J, k, idx == 0, inv2h, D)
                        mm(A[k, i, j], U[I, J], t1)
                        for p in range(r):
                            for q in range(r):
                                D[p, q] += t1[p, q]
                        mtm(U[I, J], D, t2)
                        for p in range(r):
                            for q in range(r):
                                w = 0.5 * (t2[p, q] - t2[q, p]) - A0[k, i, j, p, q]
                                e += w * w
                    else:
                        # central pullback minus A0 is skew(u^T u_|k) + a_k
                        for p in range(r):
                            for q in range(r):
                                w = 0.5 * (B[p, q] - B[q, p]) + a[k, i, j, p, q]
                                e += w * w
                dens[i, j] = 0.5 * e
                energy += W[i, j] * dens[i, j]
                sq = 0.0
                for p in range(r):
                    for q in range(r):
                        v = -0.5 * ((Y[p, q] + C0[i, j, p, q]) - (Y[q, p] + C0[i, j, q, p]))
                        R[i, j, p, q] = v
                        sq += v * v
                r2 += W[i, j] * sq
                if sq > rinf:
                    rinf = sq
        return energy, r2, np.sqrt(rinf)

    @njit
    def inv_t(x, out, work):
        # out = x^{-T} by Gauss-Jordan with partial pivoting; returns det x
        for p in range(r):
            for q in range(r):
                work[p, q] = x[q, p]
                work[p, r + q] = 1.0 if p == q else 0.0
        d = 1.0
        for c in range(r):
            piv = c
            best = abs(work[c, c])
            for p in range(c + 1, r):
                if abs(work[p, c]) > best:
                    best = abs(work[p, c])
                    piv = p
            if piv != c:
                for q in range(2 * r):
                    tmp = work[c, q]
                    work[c, q] = work[piv, q]
                    work[piv, q] = tmp
                d = -d
            pv = work[c, c]
            d *= pv
            if pv == 0.0:
                return 0.0
            for q in range(2 * r):
                work[c, q] /= pv
            for p in range(r):
                if p != c:
                    f = work[p, c]
                    for q in range(2 * r):
                        work[p, q] -= f * work[c, q]
        for p in range(r):
            for q in range(r):
                out[p, q] = work[p, r + q]
        return d

    @njit
    def euler_retract(S, V, dt, guard, W, out, diss):
        """``M = S + dt V`` followed by the polar factor at every point.

        ``diss`` receives ``|S_new - S|_F^2 / dt``.  Returns the largest
        entry of ``M^T M - I`` before retraction, the same after it, a
        status (0 on success, 1 if the Frobenius guard failed somewhere, 2 if
        ``det M <= 0`` somewhere) and the total ``sum W diss``.  For ``r = 2``
        the polar factor is the rotation by ``atan2(m10 - m01, m00 + m11)``;
        otherwise the Newton iteration ``X <- (X + X^{-T}) / 2`` is used.
        """
        n = S.shape[0]
        M = np.empty((r, r))
        G = np.empty((r, r))
        Xi = np.empty((r, r))
        work = np.empty((r, 2 * r))
        drift = 0.0
        post = 0.0
        status = 0
        total = 0.0
        for i in range(n):
            for j in range(n):
                for p in range(r):
                    for q in range(r):
                        M[p, q] = S[i, j, p, q] + dt * V[i, j, p, q]
                mtm(M, M, G)
                fro = 0.0
                for p in range(r):
                    G[p, p] -= 1.0
                for p in range(r):
                    for q in range(r):
                        fro += G[p, q] * G[p, q]
                        if abs(G[p, q]) > drift:
                            drift = abs(G[p, q])
                if fro >= guard * guard and status == 0:
                    status = 1
                if r == 2:
                    if M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0] <= 0.0:
                        status = 2
                    cs = M[0, 0] + M[1, 1]
                    sn = M[1, 0] - M[0, 1]
                    nrm = np.sqrt(cs * cs + sn * sn)
                    cs /= nrm
                    sn /= nrm
                    M[0, 0] = cs
                    M[0, 1] = -sn
                    M[1, 0] = sn
                    M[1, 1] = cs
                for it in range(30 if r > 2 else 0):
                    d = inv_t(M, Xi, work)
                    if it == 0 and d <= 0.0:
                        status = 2
                        break
                    change = 0.0
                    for p in range(r):
                        for q in range(r):
                            v = 0.5 * (M[p, q] + Xi[p, q])
                            c = abs(v - M[p, q])
                            if c > change:
                                change = c
                            M[p, q] = v
                    if change <= 1e-15:
                        break
                mtm(M, M, G)
                s = 0.0
                for p in range(r):
                    G[p, p] -= 1.0
                for p in range(r):
                    for q in range(r):
                        if abs(G[p, q]) > post:
                            post = abs(G[p, q])
                        out[i, j, p, q] = M[p, q]
                        dlt = M[p, q] - S[i, j, p, q]
                        s += dlt * dlt
                diss[i, j] = s / dt
                total += W[i, j] * diss[i, j]
        return drift, post, status, total

    @njit
    def left_multiply(S, R, out):
        """``out = -S R`` at every point, the Euler velocity."""
        n = S.shape[0]
        t = np.empty((r, r))
        for i in range(n):
            for j in range(n):
                mm(S[i, j], R[i, j], t)
                for p in range(r):
                    for q in range(r):
                        out[i, j, p, q] = -t[p, q]

    return SimpleNamespace(
        r=r,
        fill_ghosts=fill_ghosts,
        bracket_field=bracket_field,
        residual_energy=residual_energy,
        euler_retract=euler_retract,
        left_multiply=left_multiply,
    )
