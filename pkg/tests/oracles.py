"""Independent reference implementations used as test oracles.

These are deliberately written in the most literal dense form (explicit
matrices, brute-force enumeration) and share no code with the package.
"""
import itertools
import math

import numpy as np


def wrap(a):
    return math.atan2(math.sin(a), math.cos(a)) if a != -math.pi else math.pi


# -- kinematics ---------------------------------------------------------------


def rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def drot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, -c], [c, -s]])


def f_block(x, u, Ts):
    p = x[0:2] + Ts * rot(x[4]) @ x[2:4]
    v = x[2:4] + Ts * np.asarray(u[0:2])
    th = wrap(x[4] + Ts * u[2])
    return np.r_[p, v, th]


def F_block(x, Ts):
    F = np.eye(5)
    F[0:2, 2:4] = Ts * rot(x[4])
    F[0:2, 4] = Ts * drot(x[4]) @ x[2:4]
    return F


def dense_predict(mean, cov, inputs, qdiag, Ts):
    """Flat EKF prediction: build the full Jacobian explicitly."""
    nb = len(mean) // 5
    F = np.zeros((5 * nb, 5 * nb))
    out = np.zeros(5 * nb)
    for b in range(nb):
        sl = slice(5 * b, 5 * b + 5)
        out[sl] = f_block(mean[sl], inputs[b], Ts)
        F[sl, sl] = F_block(mean[sl], Ts)
    return out, F @ cov @ F.T + np.diag(qdiag)


# -- measurements -------------------------------------------------------------


def h_pair(q_obs, q_tgt):
    d = np.asarray(q_tgt[:2]) - np.asarray(q_obs[:2])
    b = math.atan2(d[1], d[0])
    return np.array([np.linalg.norm(d), wrap(math.pi + b - q_obs[2]), wrap(b - q_tgt[2])])


def H_pair(q_obs, q_tgt):
    """3x6 Jacobian over (observer pose, target pose) from geometric identities."""
    d = np.asarray(q_tgt[:2], float) - np.asarray(q_obs[:2], float)
    r = np.linalg.norm(d)
    u = d / r                       # unit line of sight
    n = np.array([-d[1], d[0]]) / r ** 2  # gradient of the bearing w.r.t. target position
    J = np.zeros((3, 6))
    J[0, 0:2], J[0, 3:5] = -u, u
    J[1, 0:2], J[1, 3:5] = -n, n
    J[2, 0:2], J[2, 3:5] = -n, n
    J[1, 2] = -1.0
    J[2, 5] = -1.0
    return J


def dense_update(mean, cov, sources, z, rdiag):
    """Flat EKF update, textbook form. ``sources`` entries: ("anchor", pose) or ("block", b)."""
    n = len(mean)
    rows, Hs, zh = [], [], []
    own = mean[[0, 1, 4]]
    for (kind, ref), zk in zip(sources, z):
        H = np.zeros((3, n))
        if kind == "anchor":
            tgt = np.asarray(ref, float)
            J = H_pair(own, tgt)
            H[:, [0, 1, 4]] = J[:, :3]
        else:
            o = 5 * ref
            tgt = mean[[o, o + 1, o + 4]]
            J = H_pair(own, tgt)
            H[:, [0, 1, 4]] = J[:, :3]
            H[:, [o, o + 1, o + 4]] = J[:, 3:]
        Hs.append(H)
        zh.append(h_pair(own, tgt))
        rows.append(np.asarray(zk, float))
    H = np.vstack(Hs)
    nu = np.concatenate([z_ - h_ for z_, h_ in zip(rows, zh)])
    for k in range(len(rows)):
        nu[3 * k + 1] = wrap(nu[3 * k + 1])
        nu[3 * k + 2] = wrap(nu[3 * k + 2])
    R = np.diag(np.tile(rdiag, len(rows)))
    S = H @ cov @ H.T + R
    K = cov @ H.T @ np.linalg.inv(S)
    m = mean + K @ nu
    P = (np.eye(n) - K @ H) @ cov
    P = 0.5 * (P + P.T)
    for i in range(4, n, 5):
        m[i] = wrap(m[i])
    return m, P


def finite_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        d = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
        J[:, i] = d
    return J


# -- statistics ---------------------------------------------------------------


def pb_cdf_bruteforce(probs):
    """CDF of a Poisson-binomial count by enumerating all outcomes."""
    W = len(probs)
    pmf = np.zeros(W + 1)
    for bits in itertools.product((0, 1), repeat=W):
        pr = 1.0
        for b, p in zip(bits, probs):
            pr *= p if b else 1.0 - p
        pmf[sum(bits)] += pr
    return np.cumsum(pmf)


def binomial_cdf(W, p):
    pmf = [math.comb(W, o) * p ** o * (1 - p) ** (W - o) for o in range(W + 1)]
    return np.cumsum(pmf)


def quantile_from_cdf(cdf, beta):
    for o, c in enumerate(cdf):
        if c >= beta:
            return o
    return len(cdf) - 1


def chi2_ppf_bisect(alpha, dof):
    """Chi-square quantile from the regularized lower gamma, via bisection."""
    def cdf(x):
        # series expansion of the lower incomplete gamma
        a = dof / 2.0
        t = x / 2.0
        term = 1.0 / a
        s = term
        k = 1
        while term > 1e-17 * s:
            term *= t / (a + k)
            s += term
            k += 1
        return s * math.exp(-t + a * math.log(t) - math.lgamma(a))
    lo, hi = 1e-12, 200.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- assignment ---------------------------------------------------------------


def best_assignment(C):
    """Minimum total cost over all injective row->column maps (brute force)."""
    C = np.asarray(C, float)
    r, c = C.shape
    best, arg = math.inf, None
    if r <= c:
        for cols in itertools.permutations(range(c), r):
            v = sum(C[i, j] for i, j in enumerate(cols))
            if v < best:
                best, arg = v, list(zip(range(r), cols))
    else:
        for rows in itertools.permutations(range(r), c):
            v = sum(C[i, j] for j, i in enumerate(rows))
            if v < best:
                best, arg = v, sorted(zip(rows, range(c)))
    return best, arg


# -- covariance intersection --------------------------------------------------


def ci_information(local, received, c_self):
    """Dense information-form CI; ``received`` items: (mean, cov, dims, weight)."""
    m, P = local
    n = len(m)
    Y = c_self * np.linalg.inv(P)
    y = Y @ m
    for mu, S, dims, w in received:
        E = np.zeros((n, len(dims)))
        for col, d in enumerate(dims):
            E[d, col] = 1.0
        Si = np.linalg.inv(S)
        Y = Y + w * E @ Si @ E.T
        y = y + w * E @ Si @ mu
    Pf = np.linalg.inv(Y)
    return Pf @ y, Pf
