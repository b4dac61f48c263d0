# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Joint-state EKF kernels (compiled).

Row-major dense loops; the matrices involved are at most a few dozen rows,
where call overhead matters far more than asymptotic cost.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, atan2, sqrt, ceil, M_PI

cnp.import_array()

cdef double TWO_PI = 2.0 * M_PI


cdef inline double _wrap(double a) noexcept nogil:
    cdef double r
    if a > -M_PI and a <= M_PI:
        return a
    r = a - TWO_PI * ceil((a - M_PI) / TWO_PI)
    if r <= -M_PI:
        r += TWO_PI
    elif r > M_PI:
        r -= TWO_PI
    return r


def predict_joint(mean, cov, inputs, qdiag, double Ts):
    """Propagate every 5-block with its own input; block-diagonal Jacobian."""
    cdef const double[::1] mu = np.ascontiguousarray(mean, dtype=np.float64)
    cdef const double[:, ::1] P = np.ascontiguousarray(cov, dtype=np.float64)
    cdef const double[:, ::1] U = np.ascontiguousarray(inputs, dtype=np.float64)
    cdef const double[::1] q = np.ascontiguousarray(qdiag, dtype=np.float64)
    cdef Py_ssize_t n = mu.shape[0]
    cdef Py_ssize_t nb = n // 5
    out_m = np.empty(n)
    out_P = np.empty((n, n))
    tmp_a = np.empty((n, n))
    cdef double[::1] m2 = out_m
    cdef double[:, ::1] P2 = out_P
    cdef double[:, ::1] T = tmp_a
    # per block: F rows 0 and 1 have entries at columns 2, 3, 4
    cdef double[:, ::1] G = np.empty((nb, 6))
    cdef Py_ssize_t b, o, r, c, k
    cdef double cs, sn, vx, vy
    with nogil:
        for b in range(nb):
            o = 5 * b
            cs = cos(mu[o + 4])
            sn = sin(mu[o + 4])
            vx = mu[o + 2]
            vy = mu[o + 3]
            G[b, 0] = Ts * cs
            G[b, 1] = -Ts * sn
            G[b, 2] = Ts * (-sn * vx - cs * vy)
            G[b, 3] = Ts * sn
            G[b, 4] = Ts * cs
            G[b, 5] = Ts * (cs * vx - sn * vy)
            m2[o] = mu[o] + Ts * (cs * vx - sn * vy)
            m2[o + 1] = mu[o + 1] + Ts * (sn * vx + cs * vy)
            m2[o + 2] = vx + Ts * U[b, 0]
            m2[o + 3] = vy + Ts * U[b, 1]
            m2[o + 4] = _wrap(mu[o + 4] + Ts * U[b, 2])
        # T = F P
        for r in range(n):
            for c in range(n):
                T[r, c] = P[r, c]
        for b in range(nb):
            o = 5 * b
            for c in range(n):
                T[o, c] = P[o, c] + G[b, 0] * P[o + 2, c] + G[b, 1] * P[o + 3, c] + G[b, 2] * P[o + 4, c]
                T[o + 1, c] = P[o + 1, c] + G[b, 3] * P[o + 2, c] + G[b, 4] * P[o + 3, c] + G[b, 5] * P[o + 4, c]
        # P2 = T F^T
        for r in range(n):
            for c in range(n):
                P2[r, c] = T[r, c]
        for b in range(nb):
            o = 5 * b
            for r in range(n):
                P2[r, o] = T[r, o] + G[b, 0] * T[r, o + 2] + G[b, 1] * T[r, o + 3] + G[b, 2] * T[r, o + 4]
                P2[r, o + 1] = T[r, o + 1] + G[b, 3] * T[r, o + 2] + G[b, 4] * T[r, o + 3] + G[b, 5] * T[r, o + 4]
        for r in range(n):
            P2[r, r] += q[r]
        for r in range(n):
            for c in range(r + 1, n):
                vx = 0.5 * (P2[r, c] + P2[c, r])
                P2[r, c] = vx
                P2[c, r] = vx
    return out_m, out_P


def measurement_model(mean, cov, offsets, targets, rdiag):
    """Predicted (r, aoa, aod), stacked Jacobian and innovation variances.

    ``offsets[k]`` is the block offset of source ``k`` in the joint state, or
    ``-1`` for an anchor whose pose is given in ``targets[k]``.
    """
    cdef const double[::1] mu = np.ascontiguousarray(mean, dtype=np.float64)
    cdef const double[:, ::1] P = np.ascontiguousarray(cov, dtype=np.float64)
    cdef const long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[:, ::1] tg = np.ascontiguousarray(targets, dtype=np.float64)
    cdef const double[::1] R = np.ascontiguousarray(rdiag, dtype=np.float64)
    cdef Py_ssize_t m = off.shape[0]
    cdef Py_ssize_t n = mu.shape[0]
    zhat_a = np.empty((m, 3))
    H_a = np.zeros((3 * m, n))
    S_a = np.empty((m, 3))
    cdef double[:, ::1] zh = zhat_a
    cdef double[:, ::1] H = H_a
    cdef double[:, ::1] S = S_a
    cdef Py_ssize_t k, o, row, a, b, row_b
    cdef double tx, ty, tth, dx, dy, r2, rr, bearing, acc
    cdef long idx[6]
    cdef double h[6]
    with nogil:
        for k in range(m):
            o = off[k]
            if o < 0:
                tx = tg[k, 0]
                ty = tg[k, 1]
                tth = tg[k, 2]
            else:
                tx = mu[o]
                ty = mu[o + 1]
                tth = mu[o + 4]
            dx = tx - mu[0]
            dy = ty - mu[1]
            r2 = dx * dx + dy * dy
            if r2 == 0.0:
                with gil:
                    raise ValueError("zero range, Jacobian singular")
            rr = sqrt(r2)
            bearing = atan2(dy, dx)
            zh[k, 0] = rr
            zh[k, 1] = _wrap(M_PI + bearing - mu[4])
            zh[k, 2] = _wrap(bearing - tth)
            row = 3 * k
            H[row, 0] = -dx / rr
            H[row, 1] = -dy / rr
            H[row + 1, 0] = dy / r2
            H[row + 1, 1] = -dx / r2
            H[row + 1, 4] = -1.0
            H[row + 2, 0] = dy / r2
            H[row + 2, 1] = -dx / r2
            if o >= 0:
                H[row, o] = dx / rr
                H[row, o + 1] = dy / rr
                H[row + 1, o] = -dy / r2
                H[row + 1, o + 1] = dx / r2
                H[row + 2, o] = -dy / r2
                H[row + 2, o + 1] = dx / r2
                H[row + 2, o + 4] = -1.0
            # diag(H P H^T) from the (at most six) nonzero entries per row
            for a in range(3):
                idx[0] = 0
                idx[1] = 1
                idx[2] = 4
                h[0] = H[row + a, 0]
                h[1] = H[row + a, 1]
                h[2] = H[row + a, 4]
                if o >= 0:
                    idx[3] = o
                    idx[4] = o + 1
                    idx[5] = o + 4
                    h[3] = H[row + a, o]
                    h[4] = H[row + a, o + 1]
                    h[5] = H[row + a, o + 4]
                else:
                    h[3] = 0.0
                    h[4] = 0.0
                    h[5] = 0.0
                    idx[3] = 0
                    idx[4] = 0
                    idx[5] = 0
                acc = 0.0
                for b in range(6):
                    if h[b] == 0.0:
                        continue
                    for row_b in range(6):
                        if h[row_b] != 0.0:
                            acc += h[b] * P[idx[b], idx[row_b]] * h[row_b]
                S[k, a] = acc + R[a]
    return zhat_a, H_a, S_a


cdef int _cholesky(double[:, ::1] A, Py_ssize_t n) noexcept nogil:
    """In-place lower Cholesky factor; returns 0 on success."""
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if not s > 0.0:
            return 1
        A[j, j] = sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= A[i, k] * A[j, k]
            A[i, j] = s / A[j, j]
    return 0


cdef void _chol_solve_rows(double[:, ::1] L, double[:, ::1] Lt, Py_ssize_t n,
                           double[:, ::1] B, Py_ssize_t nrows) noexcept nogil:
    """Solve (L L^T) x = b in place for each row b of B (shape (nrows, n)).

    ``Lt`` holds the transpose of ``L`` so both sweeps read contiguous rows.
    """
    cdef Py_ssize_t i, k, c
    cdef double s
    for c in range(nrows):
        for i in range(n):
            s = B[c, i]
            for k in range(i):
                s -= L[i, k] * B[c, k]
            B[c, i] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = B[c, i]
            for k in range(i + 1, n):
                s -= Lt[i, k] * B[c, k]
            B[c, i] = s / L[i, i]


cdef void _transpose_lower(double[:, ::1] L, double[:, ::1] Lt, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, k
    for i in range(n):
        for k in range(n):
            Lt[k, i] = L[i, k] if k <= i else 0.0


def joseph_update(mean, cov, H, nu, rdiag):
    """EKF update in Joseph form with a diagonal measurement covariance.

    Uses ``(I - K H) P = P - K (P H^T)^T`` so every product is O(n^2 m).
    """
    cdef const double[::1] mu = np.ascontiguousarray(mean, dtype=np.float64)
    cdef const double[:, ::1] P = np.ascontiguousarray(cov, dtype=np.float64)
    cdef const double[:, ::1] Hm = np.ascontiguousarray(H, dtype=np.float64)
    cdef const double[::1] v = np.ascontiguousarray(nu, dtype=np.float64)
    cdef const double[::1] R = np.ascontiguousarray(rdiag, dtype=np.float64)
    cdef Py_ssize_t n = mu.shape[0]
    cdef Py_ssize_t m = v.shape[0]
    cdef double[:, ::1] PHt = np.zeros((n, m))
    cdef double[:, ::1] K = np.empty((n, m))
    cdef double[:, ::1] S = np.empty((m, m))
    cdef double[:, ::1] St = np.empty((m, m))
    cdef double[:, ::1] T = np.empty((n, n))
    cdef double[:, ::1] TH = np.zeros((n, m))
    out_m = np.empty(n)
    out_P = np.empty((n, n))
    cdef double[::1] m2 = out_m
    cdef double[:, ::1] P2 = out_P
    cdef Py_ssize_t i, j, k
    cdef double s, h
    cdef int fail
    with nogil:
        # PHt = P H^T, skipping the zero entries of H
        for k in range(m):
            for j in range(n):
                h = Hm[k, j]
                if h != 0.0:
                    for i in range(n):
                        PHt[i, k] += P[i, j] * h
        for i in range(m):
            for k in range(m):
                s = 0.0
                for j in range(n):
                    s += Hm[i, j] * PHt[j, k]
                S[i, k] = s
            S[i, i] += R[i]
        fail = _cholesky(S, m)
        if not fail:
            _transpose_lower(S, St, m)
            for i in range(n):
                for k in range(m):
                    K[i, k] = PHt[i, k]
            _chol_solve_rows(S, St, m, K, n)
            for i in range(n):
                s = mu[i]
                for k in range(m):
                    s += K[i, k] * v[k]
                m2[i] = s
            # T = (I - K H) P = P - K PHt^T
            for i in range(n):
                for j in range(n):
                    s = P[i, j]
                    for k in range(m):
                        s -= K[i, k] * PHt[j, k]
                    T[i, j] = s
            # TH = T H^T
            for k in range(m):
                for j in range(n):
                    h = Hm[k, j]
                    if h != 0.0:
                        for i in range(n):
                            TH[i, k] += T[i, j] * h
            # P2 = T - TH K^T + K R K^T
            for i in range(n):
                for j in range(i, n):
                    s = T[i, j]
                    for k in range(m):
                        s += (R[k] * K[i, k] - TH[i, k]) * K[j, k]
                    P2[i, j] = s
            for i in range(n):
                for j in range(i + 1, n):
                    P2[j, i] = P2[i, j]
            for i in range(4, n, 5):
                m2[i] = _wrap(m2[i])
    if fail:
        raise np.linalg.LinAlgError("innovation covariance not positive definite")
    return out_m, out_P


def spd_inverse(A):
    """Inverse of a symmetric positive-definite matrix via Cholesky."""
    cdef double[:, ::1] L = np.array(A, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t n = L.shape[0]
    cdef double[:, ::1] Lt = np.empty((n, n))
    out = np.zeros((n, n))
    cdef double[:, ::1] X = out
    cdef Py_ssize_t i, j
    cdef int fail
    with nogil:
        fail = _cholesky(L, n)
        if not fail:
            _transpose_lower(L, Lt, n)
            for i in range(n):
                X[i, i] = 1.0
            _chol_solve_rows(L, Lt, n, X, n)
            for i in range(n):
                for j in range(i + 1, n):
                    X[j, i] = X[i, j]
    if fail:
        raise np.linalg.LinAlgError("matrix not positive definite")
    return out
