"""Dense linear algebra used by the diagnostics: one-sided Jacobi SVD and subspace angles.

The Jacobi sweep rotates disjoint column pairs simultaneously (round-robin
ordering), so each sweep is a handful of vectorized numpy operations. The
result is deterministic: it never calls into threaded LAPACK routines.
"""

from __future__ import annotations

import numpy as np

_EPS = np.finfo(np.float64).eps


def _circle_permutation(h: int) -> np.ndarray:
    """Column permutation advancing the circle-method schedule by one round.

    Columns [0, h) are paired with columns [h, 2h) position by position. Column
    0 stays put and the remaining 2h - 1 positions rotate, so after 2h - 1
    rounds every pair has met exactly once.
    """
    top = list(range(h))
    bottom = list(range(h, 2 * h))
    new_top = [top[0], bottom[0]] + top[1:-1]
    new_bottom = bottom[1:] + [top[-1]]
    if h == 1:
        new_top, new_bottom = top, bottom
    return np.array(new_top + new_bottom, dtype=np.intp)


def _complete_columns(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns flagged not-``good`` by an orthonormal completion."""
    u = u.copy()
    n = u.shape[0]
    for j in np.flatnonzero(~good):
        basis = u[:, good]
        for i in range(n):
            v = np.zeros(n)
            v[i] = 1.0
            for _ in range(2):
                v -= basis @ (basis.T @ v)
            norm = np.linalg.norm(v)
            if norm > 0.5:
                u[:, j] = v / norm
                good = good.copy()
                good[j] = True
                break
    return u


def householder_qr(a: np.ndarray):
    """Thin QR of a tall matrix by Householder reflections: ``a = q @ r``, q is n x m."""
    a = np.array(a, dtype=np.float64)
    n, m = a.shape
    reflectors = []
    for j in range(m):
        x = a[j:, j]
        norm = np.linalg.norm(x)
        v = x.copy()
        if norm == 0:
            reflectors.append(None)
            continue
        v[0] += norm if x[0] >= 0 else -norm
        v /= np.linalg.norm(v)
        a[j:, j:] -= 2.0 * np.outer(v, v @ a[j:, j:])
        reflectors.append(v)
    r = np.triu(a[:m, :m])
    q = np.eye(n, m)
    for j in reversed(range(m)):
        v = reflectors[j]
        if v is not None:
            q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    return q, r


def jacobi_svd(a, tol: float = None, max_sweeps: int = 80):
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` descending.

    Returns ``(u, s, vt)`` where ``u`` is n x r, ``s`` has r = min(n, m) entries.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("jacobi_svd expects a matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite values")
    n, m = a.shape
    if m > n:
        v, s, ut = jacobi_svd(a.T, tol, max_sweeps)
        return ut.T, s, v.T
    if n >= 2 * m:
        # tall-skinny: rotate the small triangular factor instead of the long columns
        q, r = householder_qr(a)
        u, s, vt = jacobi_svd(r, tol, max_sweeps)
        return q @ u, s, vt

    tol = n * _EPS if tol is None else tol
    h = (m + 1) // 2
    work = np.zeros((n, 2 * h))
    work[:, :m] = a
    v = np.eye(2 * h)
    # track where each original column currently sits; a padding column, if any, is index m
    order = np.arange(2 * h)
    perm = _circle_permutation(h)
    rounds = max(2 * h - 1, 1)
    for _ in range(max_sweeps):
        rotated = False
        for _ in range(rounds):
            x, y = work[:, :h], work[:, h:]
            alpha = np.einsum("ij,ij->j", x, x)
            beta = np.einsum("ij,ij->j", y, y)
            gamma = np.einsum("ij,ij->j", x, y)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if active.any():
                rotated = True
                safe = np.where(active, gamma, 1.0)
                # a huge zeta overflows to inf, giving t = 0, which is the right limit
                with np.errstate(over="ignore"):
                    zeta = (beta - alpha) / (2.0 * safe)
                    t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                x_new = c * x - s * y
                work[:, h:] = s * x + c * y
                work[:, :h] = x_new
                vx, vy = v[:, :h], v[:, h:]
                vx_new = c * vx - s * vy
                v[:, h:] = s * vx + c * vy
                v[:, :h] = vx_new
            work = work[:, perm]
            v = v[:, perm]
            order = order[perm]
        if not rotated:
            break

    keep = order < m
    work, v = work[:, keep], v[:m, keep]
    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    rank = np.argsort(-sigma, kind="stable")
    sigma = sigma[rank]
    work = work[:, rank]
    v = v[:, rank]
    scale = sigma[0] if sigma.size and sigma[0] > 0 else 1.0
    good = sigma > n * _EPS * scale
    u = np.zeros_like(work)
    u[:, good] = work[:, good] / sigma[good]
    if not good.all():
        u = _complete_columns(u, good)
    return u, sigma, v.T


def singular_values(a) -> np.ndarray:
    return jacobi_svd(a)[1]


def spectral_norm(a) -> float:
    s = singular_values(a)
    return float(s[0]) if s.size else 0.0


def check_orthonormal(u: np.ndarray, tol: float = 1e-10):
    gram = u.T @ u
    err = np.max(np.abs(gram - np.eye(u.shape[1]))) if u.shape[1] else 0.0
    if err > tol:
        raise ValueError(f"columns are not orthonormal (max deviation {err:.3g})")


def principal_angles(u_a, u_b, k: int = None) -> np.ndarray:
    """Principal angles in degrees between span(u_a[:, :k]) and span(u_b[:, :k]), descending.

    Cosines come from the singular values of u_a^T u_b; angles whose cosine
    exceeds 1/sqrt(2) are taken from the sines instead, which are the singular
    values of u_b projected off span(u_a). arccos alone loses about half the
    digits for small angles.
    """
    u_a = np.asarray(u_a, dtype=np.float64)
    u_b = np.asarray(u_b, dtype=np.float64)
    if u_a.shape[0] != u_b.shape[0]:
        raise ValueError("bases live in different ambient dimensions")
    if k is None:
        k = min(u_a.shape[1], u_b.shape[1])
    if not 1 <= k <= min(u_a.shape[1], u_b.shape[1]):
        raise ValueError(f"k={k} out of range for bases with {u_a.shape[1]} and "
                         f"{u_b.shape[1]} columns")
    u_a, u_b = u_a[:, :k], u_b[:, :k]
    check_orthonormal(u_a)
    check_orthonormal(u_b)

    cos = np.clip(singular_values(u_a.T @ u_b), 0.0, 1.0)  # descending -> angles ascending
    residual = u_b - u_a @ (u_a.T @ u_b)
    sin = np.clip(singular_values(residual)[::-1], 0.0, 1.0)  # ascending -> angles ascending
    if sin.size < k:
        sin = np.concatenate([np.zeros(k - sin.size), sin])
    angles = np.where(cos * cos < 0.5, np.arccos(cos), np.arcsin(sin))
    return np.sort(np.degrees(angles))[::-1]
