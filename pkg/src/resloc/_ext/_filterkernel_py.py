"""Joint-state EKF kernels, numpy implementation (fallback and reference)."""
import math

import numpy as np


def _wrap(a):
    """Wrap to (-pi, pi]; values already inside are returned unchanged."""
    a = np.asarray(a, dtype=float)
    r = a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))
    r = np.where(r <= -np.pi, r + 2.0 * np.pi, np.where(r > np.pi, r - 2.0 * np.pi, r))
    return np.where((a > -np.pi) & (a <= np.pi), a, r)


def _wrap_headings(mean):
    mean[4::5] = _wrap(mean[4::5])


def predict_joint(mean, cov, inputs, qdiag, Ts):
    """Propagate every 5-block with its own input; block-diagonal Jacobian."""
    mean = np.asarray(mean, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    n = mean.shape[0]
    x = mean.reshape(-1, 5)
    c = np.cos(x[:, 4])
    s = np.sin(x[:, 4])
    vx, vy = x[:, 2], x[:, 3]
    out = np.empty_like(x)
    out[:, 0] = x[:, 0] + Ts * (c * vx - s * vy)
    out[:, 1] = x[:, 1] + Ts * (s * vx + c * vy)
    out[:, 2] = vx + Ts * inputs[:, 0]
    out[:, 3] = vy + Ts * inputs[:, 1]
    out[:, 4] = x[:, 4] + Ts * inputs[:, 2]
    out = out.ravel()
    _wrap_headings(out)
    F = np.eye(n)
    o = np.arange(0, n, 5)
    F[o, o + 2] = Ts * c
    F[o, o + 3] = -Ts * s
    F[o, o + 4] = Ts * (-s * vx - c * vy)
    F[o + 1, o + 2] = Ts * s
    F[o + 1, o + 3] = Ts * c
    F[o + 1, o + 4] = Ts * (c * vx - s * vy)
    P = F @ cov @ F.T
    P[np.diag_indices(n)] += qdiag
    P = 0.5 * (P + P.T)
    return out, P


def measurement_model(mean, cov, offsets, targets, rdiag):
    """Predicted (r, aoa, aod), stacked Jacobian and innovation variances.

    ``offsets[k]`` is the block offset of source ``k`` in the joint state, or
    ``-1`` for an anchor whose pose is given in ``targets[k]``.
    """
    mean = np.asarray(mean, dtype=float)
    n = mean.shape[0]
    m = len(offsets)
    zhat = np.empty((m, 3))
    H = np.zeros((3 * m, n))
    for k, o in enumerate(offsets):
        if o < 0:
            tx, ty, tth = targets[k]
        else:
            tx, ty, tth = mean[o], mean[o + 1], mean[o + 4]
        dx = tx - mean[0]
        dy = ty - mean[1]
        r2 = dx * dx + dy * dy
        if r2 == 0.0:
            raise ValueError("zero range, Jacobian singular")
        r = math.sqrt(r2)
        b = math.atan2(dy, dx)
        zhat[k] = (r, _wrap(math.pi + b - mean[4]), _wrap(b - tth))
        row = 3 * k
        H[row, 0:2] = (-dx / r, -dy / r)
        H[row + 1, 0:2] = (dy / r2, -dx / r2)
        H[row + 1, 4] = -1.0
        H[row + 2, 0:2] = (dy / r2, -dx / r2)
        if o >= 0:
            H[row, o:o + 2] = (dx / r, dy / r)
            H[row + 1, o:o + 2] = (-dy / r2, dx / r2)
            H[row + 2, o:o + 2] = (-dy / r2, dx / r2)
            H[row + 2, o + 4] = -1.0
    S = np.einsum("ij,jk,ik->i", H, cov, H).reshape(m, 3) + np.asarray(rdiag)
    return zhat, H, S


def joseph_update(mean, cov, H, nu, rdiag):
    """EKF update in Joseph form with a diagonal measurement covariance."""
    n = mean.shape[0]
    m = nu.shape[0]
    PHt = cov @ H.T
    S = H @ PHt
    S[np.diag_indices(m)] += rdiag
    L = np.linalg.cholesky(S)
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    out = mean + K @ nu
    A = -K @ H
    A[np.diag_indices(n)] += 1.0
    P = A @ cov @ A.T + (K * rdiag) @ K.T
    P = np.triu(P) + np.triu(P, 1).T
    _wrap_headings(out)
    return out, P


def spd_inverse(A):
    """Inverse of a symmetric positive-definite matrix via Cholesky."""
    L = np.linalg.cholesky(A)
    Linv = np.linalg.solve(L, np.eye(A.shape[0]))
    return Linv.T @ Linv
