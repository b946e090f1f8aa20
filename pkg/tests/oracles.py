"""Independent reference implementations used as test oracles."""
import itertools

import numpy as np


def omp_reference(D, x, L, eps=0.0):
    """Textbook OMP, one signal at a time, lstsq refit on every step."""
    support = []
    r = x.copy()
    coef = np.zeros(0)
    while len(support) < L and np.linalg.norm(r) > eps:
        c = np.abs(D.T @ r)
        c[support] = -np.inf
        j = int(np.argmax(c))
        if not c[j] > 1e-14 * np.linalg.norm(r):
            break
        support.append(j)
        coef, *_ = np.linalg.lstsq(D[:, support], x, rcond=None)
        r = x - D[:, support] @ coef
    return support, coef, r


def best_l_sparse(D, x, L):
    best = (np.inf, None)
    for sup in itertools.combinations(range(D.shape[1]), L):
        coef, *_ = np.linalg.lstsq(D[:, list(sup)], x, rcond=None)
        e = float(np.sum((x - D[:, list(sup)] @ coef) ** 2))
        if e < best[0]:
            best = (e, sup)
    return best


def simplex_grid(M, step):
    n = int(round(1 / step))
    pts = []
    for c in itertools.product(range(n + 1), repeat=M - 1):
        if sum(c) <= n:
            pts.append(list(c) + [n - sum(c)])
    return np.array(pts, dtype=float) / n


def ssim_reference(a, b, window=8, k1=0.01, k2=0.03, peak=1.0):
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    vals = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            wa = a[i:i + window, j:j + window].ravel()
            wb = b[i:i + window, j:j + window].ravel()
            ma, mb = wa.mean(), wb.mean()
            va = np.mean((wa - ma) ** 2)
            vb = np.mean((wb - mb) ** 2)
            cov = np.mean((wa - ma) * (wb - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
