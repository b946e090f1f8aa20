"""Sparse coding (OMP), K-SVD dictionary training and patch-based denoising."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from .tensor import (PatchSet, anchor_grid, extract_patches, mode_unfold,
                     normalize_materials, patch_coverage, patches_at,
                     aggregate_patches)

log = logging.getLogger(__name__)

# A candidate atom whose Gram Schur complement falls below this is treated as
# linearly dependent on the current support.
_SINGULAR_TOL = 1e-10
_CHUNK = 4096


@dataclass
class TrainConfig:
    n_patches: int = 10_000
    patch_size: int = 8
    n_atoms: int = 512
    train_sparsity: int = 6
    train_iters: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_atoms <= self.patch_size**2:
            raise ValueError("n_atoms must exceed patch_size**2 (overcomplete dictionary)")
        if not 1 <= self.train_sparsity <= self.patch_size**2:
            raise ValueError("train_sparsity must be in [1, patch_size**2]")
        if self.n_patches < 1 or self.train_iters < 0:
            raise ValueError("n_patches must be positive and train_iters nonnegative")


@dataclass
class Dictionary:
    atoms: np.ndarray
    patch_size: int
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float)
        if self.atoms.shape[0] != self.patch_size**2:
            raise ValueError("atom length must equal patch_size**2")
        norms = np.linalg.norm(self.atoms, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-10, rtol=0):
            raise ValueError("dictionary atoms must have unit l2 norm")

    @property
    def n_atoms(self):
        return self.atoms.shape[1]


@dataclass
class SparseCode:
    indices: np.ndarray
    values: np.ndarray
    n_atoms: int

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.n_atoms)
        out[self.indices] = self.values
        return out

    def __len__(self):
        return len(self.indices)


def _atoms(D) -> np.ndarray:
    return D.atoms if isinstance(D, Dictionary) else np.asarray(D, dtype=float)


def _omp_chunk(D, G, X, L, eps):
    """Batched OMP on the rows of ``X`` (P x S).

    Returns ``(idx, coef, resid)``: ``(P, L)`` support indices padded with -1,
    matching coefficients, and the final ``(P, S)`` residuals.
    """
    P, S = X.shape
    T = D.shape[1]
    Dt = D.T
    idx = np.full((P, L), -1, dtype=np.int64)
    coef = np.zeros((P, L))
    resid = X.copy()
    size = np.zeros(P, dtype=np.int64)
    live = np.sqrt(np.einsum("ps,ps->p", resid, resid)) > eps
    if L == 0:
        live[:] = False
    banned = np.zeros((P, T), dtype=bool)
    for _ in range(L):
        act = np.flatnonzero(live)
        if act.size == 0:
            break
        k = int(size[act[0]])  # all live patches share the same support size
        corr = np.abs(resid[act] @ D)
        corr[banned[act]] = -np.inf
        sup = idx[act, :k]
        if k:
            np.put_along_axis(corr, sup, -np.inf, axis=1)
        rnorm = np.sqrt(np.einsum("ps,ps->p", resid[act], resid[act]))
        Gs = G[sup[:, :, None], sup[:, None, :]] if k else None
        cand = np.argmax(corr, axis=1)
        ok = np.zeros(act.size, dtype=bool)
        pending = np.arange(act.size)
        while pending.size:
            best = corr[pending, cand[pending]]
            # no usable correlation left: the residual cannot shrink further
            dead = ~(best > 1e-14 * np.maximum(rnorm[pending], 1e-300))
            pending = pending[~dead]
            if pending.size == 0:
                break
            j = cand[pending]
            if k:
                g = G[sup[pending], j[:, None]]  # (n, k)
                w = np.linalg.solve(Gs[pending], g[:, :, None])[:, :, 0]
                schur = G[j, j] - np.einsum("nk,nk->n", g, w)
            else:
                schur = G[j, j]
            good = schur > _SINGULAR_TOL
            ok[pending[good]] = True
            bad = pending[~good]
            corr[bad, cand[bad]] = -np.inf
            banned[act[bad], cand[bad]] = True
            cand[bad] = np.argmax(corr[bad], axis=1)
            pending = bad
        stop = act[~ok]
        live[stop] = False
        sel = act[ok]
        if sel.size == 0:
            break
        idx[sel, k] = cand[ok]
        size[sel] += 1
        sup = idx[sel, :k + 1]
        Gs = G[sup[:, :, None], sup[:, None, :]]
        rhs = np.einsum("pks,ps->pk", Dt[sup], X[sel])
        beta = np.linalg.solve(Gs, rhs[:, :, None])[:, :, 0]
        coef[sel, :k + 1] = beta
        resid[sel] = X[sel] - np.einsum("pk,pks->ps", beta, Dt[sup])
        rn = np.sqrt(np.einsum("ps,ps->p", resid[sel], resid[sel]))
        live[sel[rn <= eps]] = False
    return idx, coef, resid


def omp_batch(D, X: np.ndarray, max_sparsity: int, eps: float = 0.0):
    """OMP for every column of ``X`` (S x P).

    Atoms are picked by largest ``|<d, r>|`` (lowest index on ties) and the
    coefficients are re-fit by least squares on the whole support after each
    pick. Coding of a column stops once ``||r|| <= eps`` or the support holds
    ``max_sparsity`` atoms. Returns ``(idx, coef, resid)`` with one row per
    column of ``X``.
    """
    D = _atoms(D)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != D.shape[0]:
        raise ValueError("signal length must match atom length")
    if not np.all(np.isfinite(X)):
        raise ValueError("signals must be finite")
    if max_sparsity < 1 or eps < 0:
        raise ValueError("need max_sparsity >= 1 and eps >= 0")
    L = min(int(max_sparsity), D.shape[1])
    G = D.T @ D
    P = X.shape[1]
    idx = np.empty((P, L), dtype=np.int64)
    coef = np.empty((P, L))
    resid = np.empty((P, X.shape[0]))
    Xt = X.T
    for start in range(0, P, _CHUNK):
        stop = min(P, start + _CHUNK)
        i, c, r = _omp_chunk(D, G, np.ascontiguousarray(Xt[start:stop]), L, eps)
        idx[start:stop], coef[start:stop], resid[start:stop] = i, c, r
    return idx, coef, resid


def omp(D, x: np.ndarray, max_sparsity: int, eps: float = 0.0) -> SparseCode:
    D = _atoms(D)
    idx, coef, _ = omp_batch(D, np.asarray(x, dtype=float).reshape(-1, 1), max_sparsity, eps)
    keep = idx[0] >= 0
    return SparseCode(idx[0][keep], coef[0][keep], D.shape[1])


def codes_to_dense(idx, coef, n_atoms) -> np.ndarray:
    """``(T, P)`` coefficient matrix from padded OMP output."""
    P = idx.shape[0]
    A = np.zeros((n_atoms, P))
    rows, cols = np.nonzero(idx >= 0)
    A[idx[rows, cols], rows] = coef[rows, cols]
    return A


def training_anchors(shape, patch_size: int) -> np.ndarray:
    """All stride-1 anchors of the mode-1 plane that stay inside one material.

    Rows are ``(row, plane column, material)``.
    """
    j1, j2, m = shape
    rows = np.arange(j1 - patch_size + 1)
    cols = np.arange(j2 - patch_size + 1)
    rr, cc, mm = np.meshgrid(rows, cols, np.arange(m), indexing="ij")
    order = np.lexsort((cc.ravel(), rr.ravel(), mm.ravel()))
    out = np.stack([rr.ravel(), cc.ravel() + j2 * mm.ravel(), mm.ravel()], axis=1)
    return out[order]


def build_training_set(f: np.ndarray, cfg: TrainConfig) -> PatchSet:
    """Sample training patches from the mode-1 unfolding of normalized ``f``."""
    fn, _ = normalize_materials(f)
    plane = mode_unfold(fn, 1)
    anchors = training_anchors(fn.shape, cfg.patch_size)
    rng = np.random.default_rng(cfg.seed)
    replace = anchors.shape[0] < cfg.n_patches
    if replace:
        warnings.warn(
            f"only {anchors.shape[0]} valid anchors for {cfg.n_patches} patches; "
            "sampling with replacement", RuntimeWarning, stacklevel=2)
    pick = rng.choice(anchors.shape[0], size=cfg.n_patches, replace=replace)
    return patches_at(plane, anchors[pick], cfg.patch_size)


def _initial_atoms(X, T, rng):
    norms = np.linalg.norm(X, axis=0)
    nz = np.flatnonzero(norms > 0)
    perm = rng.permutation(nz)
    normed = X[:, perm] / norms[perm]
    _, first = np.unique(np.round(normed.T, 12), axis=0, return_index=True)
    chosen = perm[np.sort(first)][:T]
    atoms = X[:, chosen] / norms[chosen]
    if atoms.shape[1] < T:
        extra = rng.standard_normal((X.shape[0], T - atoms.shape[1]))
        atoms = np.concatenate([atoms, extra / np.linalg.norm(extra, axis=0)], axis=1)
    return atoms


def _rank1(Ek):
    """Best rank-1 fit ``a d^T`` of ``Ek`` (n x S) with unit ``d``.

    Top singular pair via the top eigenvector of the smaller Gram matrix.
    """
    n, S = Ek.shape
    if n >= S:
        _, v = eigh(Ek.T @ Ek, subset_by_index=[S - 1, S - 1])
        d = v[:, 0]
    else:
        _, v = eigh(Ek @ Ek.T, subset_by_index=[n - 1, n - 1])
        d = Ek.T @ v[:, 0]
        d /= np.linalg.norm(d)
    if d[np.argmax(np.abs(d))] < 0:
        d = -d
    return d, Ek @ d


def _propose_swap(D, A, Et, attempt):
    """Candidate dictionary with one cheap atom replaced, or None.

    Atoms to drop are ranked unused first, then near-duplicates, then by the
    exact error increase of removing them from their users; ``attempt``
    walks down that ranking. On even attempts the atom whose users fit worst
    is split in two, the second half taking the dropped slot; otherwise the
    dropped slot gets the residual of the worst-represented patch.
    """
    err = np.einsum("ps,ps->p", Et, Et)
    if not err.any():
        return None
    used = A != 0
    loss = np.einsum("tp,pt->t", A, 2.0 * (Et @ D)) + np.einsum("tp,tp->t", A, A)
    G = np.abs(D.T @ D)
    np.fill_diagonal(G, 0.0)
    tier = np.where(~used.any(axis=1), 0, np.where(G.max(axis=1) > 0.95, 1, 2))
    ranking = np.lexsort((loss, tier))
    drop = int(ranking[attempt % ranking.size])
    load = used.astype(float) @ err
    load[drop] = -1.0
    k = int(np.argmax(load))
    users = np.flatnonzero(used[k])
    D2 = D.copy()
    if users.size > 1 and attempt % 2 == 0:
        Ek = Et[users] + np.outer(A[k, users], D[:, k])
        D2[:, k], D2[:, drop] = _split_lines(Ek)
    else:
        p = int(np.argmax(err))
        D2[:, drop] = Et[p] / np.sqrt(err[p])
    return D2


def _split_lines(Ek, iters=20):
    """Two unit directions explaining the rows of ``Ek`` as points on two lines.

    Rows are projected on their top-2 right singular vectors and clustered by
    angle (2-means on doubled angles, weighted by energy), which separates two
    atoms that a single atom had been averaging.
    """
    _, _, Vt = np.linalg.svd(Ek, full_matrices=False)
    V = Vt[:2]
    c = Ek @ V.T
    w = np.einsum("ij,ij->i", c, c)
    th = 2.0 * np.arctan2(c[:, 1], c[:, 0])
    z = np.stack([np.cos(th), np.sin(th)], axis=1)
    centers = np.array([[1.0, 0.0], [-1.0, 0.0]])  # first sv vs the second
    for _ in range(iters):
        lab = np.argmax(z @ centers.T, axis=1)
        for j in range(2):
            m = (w[lab == j, None] * z[lab == j]).sum(axis=0)
            if np.linalg.norm(m) > 0:
                centers[j] = m / np.linalg.norm(m)
    phi = 0.5 * np.arctan2(centers[:, 1], centers[:, 0])
    out = np.cos(phi)[:, None] * V[0] + np.sin(phi)[:, None] * V[1]
    return out[0] / np.linalg.norm(out[0]), out[1] / np.linalg.norm(out[1])


def _code(D, X, A, L):
    """OMP codes, keeping the previous code of any patch it fits better."""
    idx, coef, resid = omp_batch(D, X, L, 0.0)
    A_new = codes_to_dense(idx, coef, D.shape[1])
    if A is not None:
        E_old = X - D @ A
        old_err = np.einsum("sp,sp->p", E_old, E_old)
        new_err = np.einsum("ps,ps->p", resid, resid)
        keep = old_err < new_err
        A_new[:, keep] = A[:, keep]
    return A_new


def _sweep(D, X, A, L):
    """One K-SVD iteration: coding, then sequential rank-1 atom updates."""
    D = D.copy()
    A = _code(D, X, A, L)
    Et = np.ascontiguousarray((X - D @ A).T)
    for k in range(D.shape[1]):
        users = np.flatnonzero(A[k])
        if users.size == 0:
            continue
        Ek = Et[users] + np.outer(A[k, users], D[:, k])
        d, a = _rank1(Ek)
        D[:, k] = d
        A[k, users] = a
        Et[users] = Ek - np.outer(a, d)
    return D, A, Et, float(np.einsum("ps,ps->", Et, Et))


def ksvd_train(patches, cfg: TrainConfig, callback=None) -> Dictionary:
    """Train a unit-norm dictionary by K-SVD.

    Sparse coding uses OMP with ``cfg.train_sparsity`` atoms; a patch keeps its
    previous code whenever that still fits better under the current atoms, so
    the objective ``sum ||x_i - D a_i||^2`` never increases. When progress stalls
    or atoms go unused, the cheapest atoms are swapped for new directions
    and the swap is kept only if it lowers the objective.
    """
    X = patches.patches if isinstance(patches, PatchSet) else np.asarray(patches, dtype=float)
    S, P = X.shape
    T, L = cfg.n_atoms, cfg.train_sparsity
    if S != cfg.patch_size**2:
        raise ValueError("patch length does not match cfg.patch_size")
    if P < T:
        raise ValueError(f"need at least n_atoms={T} patches, got {P}")
    if not np.any(X):
        raise ValueError("training set is all zeros")
    rng = np.random.default_rng(cfg.seed)
    D = _initial_atoms(X, T, rng)
    A = Et = None
    history = []
    attempt = 0
    for it in range(cfg.train_iters):
        D1, A1, Et1, J1 = _sweep(D, X, A, L)
        if A is not None:
            # a swap is kept only if a full iteration with it ends lower
            D2 = _propose_swap(D1, A1, Et1, attempt)
            if D2 is not None:
                cand = _sweep(D2, X, A1, L)
                if cand[3] < J1:
                    D1, A1, Et1, J1 = cand
                    attempt = 0
                else:
                    attempt += 1
        D, A, Et = D1, A1, Et1
        history.append(J1)
        if callback is not None:
            callback(it, history[-1])
        log.debug("ksvd iter %d objective %.6g", it, history[-1])
    D /= np.linalg.norm(D, axis=0)
    return Dictionary(D, cfg.patch_size, history)


def dictionary_denoise(image: np.ndarray, D, eps: float, max_sparsity: int,
                       prior_weight: float = 1.0, stride: int = 1,
                       patch_size: int | None = None, details: bool = False):
    """Closed-form minimizer of
    ``1/2 ||U - image||^2 + w/2 sum_i ||H_i U - D b_i||^2``
    with each ``b_i`` the error-constrained OMP code of patch ``H_i image``.

    With ``details=True`` returns ``(U, info)`` where ``info`` holds the patch
    misfit ``sum_i ||H_i U - D b_i||^2`` and the total code size ``nnz``.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    image = np.asarray(image, dtype=float)
    atoms = _atoms(D)
    s = D.patch_size if isinstance(D, Dictionary) else (
        patch_size or int(round(np.sqrt(atoms.shape[0]))))
    if s * s != atoms.shape[0]:
        raise ValueError("cannot infer patch size from the dictionary")
    if prior_weight == 0 and not details:
        return image.copy()
    ps = extract_patches(image, s, stride)
    idx, _, resid = omp_batch(atoms, ps.patches, max_sparsity, eps)
    approx = ps.patches - resid.T
    acc = aggregate_patches(PatchSet(approx, ps.positions, s), image.shape, normalize=False)
    cover = patch_coverage(image.shape, s, stride)
    U = (image + prior_weight * acc) / (1.0 + prior_weight * cover)
    if not details:
        return U
    diff = patches_at(U, ps.positions, s).patches - approx
    info = {"misfit": float(np.einsum("sp,sp->", diff, diff)), "nnz": int((idx >= 0).sum())}
    return U, info
