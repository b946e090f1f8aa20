"""Image-domain material decomposition: DIWET, DI, TVMD and DLIMD.

All constrained methods solve, per pixel,

    min_f 1/2 ||x - B f||^2 + eta/2 ||f - u||^2   s.t.  sum(f) = 1, 0 <= f <= 1

and then run an air pass that re-solves background pixels without
constraints. ``B`` is the ``N x M`` attenuation matrix.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .dictlearn import Dictionary, dictionary_denoise
from .tensor import as_tensor3

log = logging.getLogger(__name__)


class DecompositionError(ArithmeticError):
    """Raised when the attenuation matrix cannot be inverted."""


_MAX_COND = 1e12
AIR_RULES = ("attenuation", "dominant")


@dataclass
class BasisEstimate:
    matrix: np.ndarray
    std: np.ndarray
    condition: float


@dataclass
class DecompositionResult:
    materials: np.ndarray
    air: np.ndarray
    air_mask: np.ndarray
    log: list = field(default_factory=list)


@dataclass
class DlimdParams:
    # tuned on the default phantom; eps is an l2 patch tolerance per material
    eta: float = 0.3
    sparsity: int = 3
    eps: tuple = (0.7, 0.3, 0.7)
    outer_iters: int = 30
    air_threshold: float = 0.99
    prior_weight: float = 1.0
    stride: int = 1
    air_reference: int = 0
    air_level: float = 0.05
    air_rule: str = "attenuation"

    def __post_init__(self):
        self.eps = tuple(float(e) for e in self.eps)
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if any(e < 0 for e in self.eps):
            raise ValueError("eps entries must be nonnegative")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be >= 1")
        if not 0 < self.air_threshold <= 1:
            raise ValueError("air_threshold must lie in (0, 1]")
        if self.air_rule not in AIR_RULES:
            raise ValueError(f"air_rule must be one of {AIR_RULES}")
        if self.sparsity < 1 or self.stride < 1 or self.prior_weight < 0:
            raise ValueError("invalid sparsity, stride or prior_weight")


@dataclass
class TvmdParams:
    lam: float = 0.01
    inner_iters: int = 20
    eta: float = 0.3
    outer_iters: int = 30
    air_threshold: float = 0.99
    air_reference: int = 0
    air_level: float = 0.05
    air_rule: str = "attenuation"

    def __post_init__(self):
        if self.lam <= 0 or self.eta <= 0:
            raise ValueError("lam and eta must be positive")
        if self.inner_iters < 1 or self.outer_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.air_rule not in AIR_RULES:
            raise ValueError(f"air_rule must be one of {AIR_RULES}")


def _pixels(x: np.ndarray) -> np.ndarray:
    """``(J1, J2, C)`` tensor -> ``(J, C)`` matrix (transpose of the mode-3 unfolding)."""
    x = as_tensor3(x)
    return x.reshape(-1, x.shape[2], order="F")


def _unpixels(p: np.ndarray, shape) -> np.ndarray:
    return p.reshape(tuple(shape[:2]) + (p.shape[1],), order="F")


def condition_number(B) -> float:
    return float(np.linalg.cond(np.asarray(B, dtype=float)))


def _check_basis(x, B):
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or not np.all(np.isfinite(B)):
        raise ValueError("attenuation matrix must be a finite 2-D array")
    if x.shape[2] != B.shape[0]:
        raise ValueError(f"images have {x.shape[2]} bins, matrix has {B.shape[0]} rows")
    if B.shape[0] < B.shape[1]:
        raise DecompositionError(f"need N >= M, got {B.shape}")
    cond = condition_number(B)
    if not cond < _MAX_COND:
        raise DecompositionError(f"attenuation matrix is rank deficient (condition {cond:.3g})")
    return B


def roi_mask(shape, roi) -> np.ndarray:
    """Boolean mask from a mask array, a ``(K, 2)`` pixel list or a dict of
    ``rects`` (``[r0, c0, r1, c1]`` half-open) and ``pixels``."""
    if isinstance(roi, np.ndarray) and roi.dtype == bool:
        if roi.shape != tuple(shape):
            raise ValueError("ROI mask shape mismatch")
        return roi
    mask = np.zeros(shape, dtype=bool)
    if isinstance(roi, dict):
        for r0, c0, r1, c1 in roi.get("rects", []):
            mask[r0:r1, c0:c1] = True
        pix = roi.get("pixels", [])
    else:
        pix = roi
    pix = np.asarray(pix, dtype=np.int64).reshape(-1, 2)
    if pix.size:
        if (pix < 0).any() or (pix[:, 0] >= shape[0]).any() or (pix[:, 1] >= shape[1]).any():
            raise ValueError("ROI pixel outside the image")
        mask[pix[:, 0], pix[:, 1]] = True
    return mask


def estimate_attenuation_matrix(x: np.ndarray, rois) -> BasisEstimate:
    """Average each bin image over each pure-material ROI."""
    x = as_tensor3(x)
    masks = [roi_mask(x.shape[:2], r) for r in rois]
    mat = np.empty((x.shape[2], len(masks)))
    std = np.empty_like(mat)
    for m, mask in enumerate(masks):
        if not mask.any():
            raise ValueError(f"ROI for material {m} is empty")
        vals = x[mask]  # (K, N)
        mat[:, m] = vals.mean(axis=0)
        std[:, m] = vals.std(axis=0)
    return BasisEstimate(mat, std, condition_number(mat))


def diwet_pixels(xp: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.linalg.solve(B.T @ B, B.T @ xp.T).T


def diwet(x: np.ndarray, B) -> DecompositionResult:
    """Unconstrained pseudo-inverse ``(B^T B)^-1 B^T X(3)``."""
    x = as_tensor3(x)
    B = _check_basis(x, B)
    fp = diwet_pixels(_pixels(x), B)
    f = _unpixels(fp, x.shape)
    air = np.clip(1.0 - f.sum(axis=2), 0.0, 1.0)
    return DecompositionResult(f, air, np.zeros(x.shape[:2], dtype=bool))


class SimplexQP:
    """Exact minimizer of ``1/2 f^T H f - g^T f`` over the probability simplex.

    With ``sum(f) = 1`` and ``f >= 0`` the upper bound ``f <= 1`` is implied,
    so the feasible set has ``2^M - 1`` faces (one per nonempty free set).
    The minimizer restricted to each face's affine hull is an affine function
    of ``g`` because ``H`` is shared by every pixel; the best feasible
    candidate over all faces is the global optimum.
    """

    def __init__(self, H: np.ndarray):
        H = np.asarray(H, dtype=float)
        self.H = 0.5 * (H + H.T)
        M = H.shape[0]
        self.faces = []
        for size in range(1, M + 1):
            for free in itertools.combinations(range(M), size):
                free = list(free)
                k = len(free)
                kkt = np.zeros((k + 1, k + 1))
                kkt[:k, :k] = self.H[np.ix_(free, free)]
                kkt[:k, k] = 1.0
                kkt[k, :k] = 1.0
                inv = np.linalg.pinv(kkt)
                self.faces.append((free, inv[:k, :k], inv[:k, k]))

    def solve(self, g: np.ndarray) -> np.ndarray:
        g = np.atleast_2d(np.asarray(g, dtype=float))
        P, M = g.shape
        best = np.full(P, np.inf)
        out = np.zeros((P, M))
        for free, gain, shift in self.faces:
            fs = g[:, free] @ gain.T + shift
            feasible = np.all(fs >= -1e-12, axis=1)
            if not feasible.any():
                continue
            cand = np.zeros((P, M))
            cand[:, free] = np.clip(fs, 0.0, 1.0)
            val = 0.5 * np.einsum("pi,ij,pj->p", cand, self.H, cand) - np.einsum("pi,pi->p", g, cand)
            # strict: on ties the earlier (smaller) face wins
            better = feasible & (val < best)
            best[better] = val[better]
            out[better] = cand[better]
        return out


def _pixel_problem(B, xp, up, eta, objective):
    Q = B.T @ B + eta * np.eye(B.shape[1])
    c = xp @ B + eta * up
    if objective == "quadratic":
        return Q, c
    if objective == "squared-normal":
        return Q @ Q, c @ Q
    raise ValueError(f"unknown objective {objective!r}")


def constrained_pixel_ls(B, x_px, u_px, eta: float, objective: str = "quadratic") -> np.ndarray:
    """Volume-conserving, box-constrained per-pixel least squares.

    ``x_px`` is ``(N,)`` or ``(P, N)`` and ``u_px`` is ``(M,)`` or ``(P, M)``.
    ``objective="quadratic"`` minimizes
    ``1/2 ||x - B f||^2 + eta/2 ||f - u||^2``; ``"squared-normal"`` minimizes
    ``1/2 ||(B^T B + eta I) f - (B^T x + eta u)||^2``. Both share the
    unconstrained minimizer but differ once a bound is active.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    B = np.asarray(B, dtype=float)
    single = np.ndim(x_px) == 1
    xp = np.atleast_2d(np.asarray(x_px, dtype=float))
    up = np.broadcast_to(np.asarray(u_px, dtype=float), (xp.shape[0], B.shape[1]))
    H, g = _pixel_problem(B, xp, up, eta, objective)
    f = SimplexQP(H).solve(g)
    return f[0] if single else f


def fidelity_objective(B, xp, fp, up, eta) -> float:
    r = xp - fp @ B.T
    d = fp - up
    return 0.5 * float(np.einsum("pn,pn->", r, r)) + 0.5 * eta * float(np.einsum("pm,pm->", d, d))


def air_pass(f: np.ndarray, x: np.ndarray, B, threshold: float = 0.99,
             reference: int = 0, level: float = 0.05, rule: str = "attenuation"):
    """Detect air pixels and re-solve them without the volume constraint.

    A pixel is air when its total attenuation ``sum_n (B f_diwet)_n`` is below
    ``level`` times the column sum of the reference material. With
    ``rule="dominant"`` its largest fraction must also exceed ``threshold``;
    that extra test misses air whenever the sum-to-one optimum for ``x = 0``
    is a mixture rather than a vertex, which is the case for water/iodine.
    Air pixels get the unconstrained solution clipped to [0, 1] and
    ``AIR = clip(1 - sum f, 0, 1)``; every other pixel keeps its fractions and
    gets ``AIR = 0``.
    """
    if rule not in AIR_RULES:
        raise ValueError(f"rule must be one of {AIR_RULES}")
    f = as_tensor3(f)
    x = as_tensor3(x)
    B = np.asarray(B, dtype=float)
    fp = _pixels(f)
    xp = _pixels(x)
    dw = diwet_pixels(xp, B)
    total = (dw @ B.T).sum(axis=1)
    ref = B[:, reference].sum()
    mask = total < level * ref
    if rule == "dominant":
        mask &= fp.max(axis=1) > threshold
    out = fp.copy()
    out[mask] = np.clip(dw[mask], 0.0, 1.0)
    air = np.zeros(fp.shape[0])
    air[mask] = np.clip(1.0 - out[mask].sum(axis=1), 0.0, 1.0)
    shape = f.shape
    return _unpixels(out, shape), air.reshape(shape[:2], order="F"), mask.reshape(shape[:2], order="F")


def di(x: np.ndarray, B, threshold: float = 0.99, reference: int = 0,
       level: float = 0.05, strategy: int = 2, air_attenuation: float = 1e-4,
       rule: str = "attenuation") -> DecompositionResult:
    """Per-pixel constrained inversion.

    ``strategy=2`` (default) solves with sum-to-one and runs the air pass.
    ``strategy=1`` instead appends air as an extra basis material whose
    attenuation is ``air_attenuation`` in every bin.
    """
    x = as_tensor3(x)
    B = _check_basis(x, B)
    xp = _pixels(x)
    M = B.shape[1]
    if strategy == 1:
        Ba = np.concatenate([B, np.full((B.shape[0], 1), air_attenuation)], axis=1)
        fa = constrained_pixel_ls(Ba, xp, np.zeros(M + 1), 0.0)
        f = _unpixels(fa[:, :M], x.shape)
        air = fa[:, M].reshape(x.shape[:2], order="F")
        return DecompositionResult(f, air, np.zeros(x.shape[:2], dtype=bool))
    if strategy != 2:
        raise ValueError("strategy must be 1 or 2")
    fp = constrained_pixel_ls(B, xp, np.zeros(M), 0.0)
    f, air, mask = air_pass(_unpixels(fp, x.shape), x, B, threshold, reference, level, rule)
    return DecompositionResult(f, air, mask)


def _grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:-1] = u[1:] - u[:-1]
    gy[:, :-1] = u[:, 1:] - u[:, :-1]
    return gx, gy


def _grad_adjoint(px, py):
    out = np.zeros_like(px)
    out[:-1] -= px[:-1]
    out[1:] += px[:-1]
    out[:, :-1] -= py[:, :-1]
    out[:, 1:] += py[:, :-1]
    return out


def tv_aniso(u) -> float:
    gx, gy = _grad(u)
    return float(np.abs(gx).sum() + np.abs(gy).sum())


def prox_tv(f: np.ndarray, weight: float, iters: int = 20, dual=None):
    """``argmin_u 1/2 ||u - f||^2 + weight * TV_aniso(u)``.

    Fast projected gradient on the dual (Chambolle-type, Beck-Teboulle
    acceleration). Returns ``(u, dual)``; pass ``dual`` back to warm start.
    """
    f = np.asarray(f, dtype=float)
    if weight <= 0:
        return f.copy(), dual
    if dual is None:
        px = np.zeros_like(f)
        py = np.zeros_like(f)
    else:
        px, py = (d.copy() for d in dual)
    qx, qy = px.copy(), py.copy()
    t = 1.0
    step = 1.0 / (8.0 * weight)
    for _ in range(iters):
        u = f - weight * _grad_adjoint(qx, qy)
        gx, gy = _grad(u)
        nx = np.clip(qx + step * gx, -1.0, 1.0)
        ny = np.clip(qy + step * gy, -1.0, 1.0)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        w = (t - 1.0) / t_next
        qx = nx + w * (nx - px)
        qy = ny + w * (ny - py)
        px, py, t = nx, ny, t_next
    u = f - weight * _grad_adjoint(px, py)
    return u, (px, py)


def _split_loop(x, B, eta, outer_iters, prior_step, air_args, record):
    """Shared alternating scheme: constrained F step, air pass, prior step.

    ``prior_step(f)`` returns ``(U, extra_log)`` from the air-processed
    fractions. ``record`` collects one log entry per iteration.
    """
    x = as_tensor3(x)
    B = _check_basis(x, B)
    xp = _pixels(x)
    M = B.shape[1]
    P = xp.shape[0]
    up = np.zeros((P, M))
    # F^(0) = 0 is infeasible; the first descent check uses the simplex barycenter.
    prev = np.full((P, M), 1.0 / M)
    solver = SimplexQP(B.T @ B + eta * np.eye(M))
    f = air = mask = None
    for k in range(outer_iters):
        g = xp @ B + eta * up
        fp = solver.solve(g)
        before = fidelity_objective(B, xp, prev, up, eta)
        after = fidelity_objective(B, xp, fp, up, eta)
        prev = fp
        f, air, mask = air_pass(_unpixels(fp, x.shape), x, B, *air_args)
        U, extra = prior_step(f)
        up = _pixels(U)
        entry = {"iter": k + 1, "f_objective_before": before, "f_objective_after": after,
                 "n_air": int(mask.sum())}
        entry.update(extra)
        r = xp - _pixels(f) @ B.T
        d = _pixels(f) - up
        entry["objective"] = (0.5 * float(np.einsum("pn,pn->", r, r))
                              + 0.5 * eta * float(np.einsum("pm,pm->", d, d))
                              + entry.get("prior_objective", 0.0))
        record.append(entry)
        log.info("iter %d: F-objective %.6g -> %.6g, objective %.6g",
                 k + 1, before, after, entry["objective"])
    return DecompositionResult(f, air, mask, record)


def tvmd(x: np.ndarray, B, params: TvmdParams = TvmdParams()) -> DecompositionResult:
    """Channelwise anisotropic-TV regularized decomposition."""
    duals = {}

    def prior(f):
        U = np.empty_like(f)
        tv = 0.0
        for m in range(f.shape[2]):
            U[:, :, m], duals[m] = prox_tv(f[:, :, m], params.lam / params.eta,
                                           params.inner_iters, duals.get(m))
            tv += tv_aniso(U[:, :, m])
        return U, {"prior_objective": params.lam * tv}

    air_args = (params.air_threshold, params.air_reference, params.air_level, params.air_rule)
    return _split_loop(x, B, params.eta, params.outer_iters, prior, air_args, [])


def dlimd(x: np.ndarray, B, D: Dictionary, params: DlimdParams = DlimdParams()) -> DecompositionResult:
    """Dictionary-learning regularized decomposition.

    Each outer iteration: exact constrained per-pixel update toward ``U``,
    air pass, then per material ``U_m`` = dictionary denoising of the
    min-max normalized ``F_m`` (tolerance ``eps[m]``), mapped back to the
    fraction scale.
    """
    x = as_tensor3(x)
    M = np.asarray(B).shape[1]
    if len(params.eps) != M:
        raise ValueError(f"need {M} eps values, got {len(params.eps)}")
    s = D.patch_size
    if s > min(x.shape[:2]):
        raise ValueError("dictionary patch size exceeds the image")
    if not isinstance(D, Dictionary):
        raise TypeError("dlimd needs a Dictionary")

    def prior(f):
        U = np.empty_like(f)
        misfit = 0.0
        nnz = 0
        for m in range(M):
            ch = f[:, :, m]
            lo, hi = ch.min(), ch.max()
            scale = hi - lo if hi > lo else 1.0
            den, info = dictionary_denoise((ch - lo) / scale, D, params.eps[m], params.sparsity,
                                           params.prior_weight, params.stride, details=True)
            U[:, :, m] = den * scale + lo
            # back on the fraction scale
            misfit += info["misfit"] * scale**2
            nnz += info["nnz"]
        # diagnostic: code sizes enter with unit weight
        prior_obj = 0.5 * params.eta * params.prior_weight * (misfit + nnz)
        return U, {"prior_objective": prior_obj, "patch_misfit": misfit, "code_nnz": nnz}

    air_args = (params.air_threshold, params.air_reference, params.air_level, params.air_rule)
    return _split_loop(x, B, params.eta, params.outer_iters, prior, air_args, [])
