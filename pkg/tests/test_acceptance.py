"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Criteria 2, 5, 6 and 8 share five full pipeline runs of the default noisy
scenario (seeds 0-4). Set SCT_ACCEPTANCE_OUT to keep them between sessions.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
from oracles import best_l_sparse, omp_reference, simplex_grid, ssim_reference
from sct import io
from sct.config import load_config, parse_config
from sct.decomp import constrained_pixel_ls, diwet
from sct.dictlearn import TrainConfig, ksvd_train, omp_batch
from sct.metrics import PSNR_CAP, psnr, rmse, ssim
from sct.pipeline import METHODS, run_pipeline
from sct.recon import Geometry, forward_project, fbp
from sct.spectral import (build_attenuation_matrix_true, load_attenuation_table, make_phantom,
                          spectral_images)
from small_config import small

SEEDS = [0, 1, 2, 3, 4]


def verdict(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="session")
def default_runs(tmp_path_factory):
    out = os.environ.get("SCT_ACCEPTANCE_OUT") or tmp_path_factory.mktemp("acceptance")
    dirs = {}
    for s in SEEDS:
        dirs[s] = Path(run_pipeline(load_config(seed=s), out=out)["directory"])
    return dirs


def test_c01_noise_free_inversion():
    cfg = load_config()
    f, _ = make_phantom(cfg.phantom_spec())
    B = build_attenuation_matrix_true(load_attenuation_table(), cfg.bins(), cfg.materials,
                                      cfg.phantom.densities)
    x = spectral_images(f, B)
    t0 = time.perf_counter()
    res = diwet(x, B)
    sec = time.perf_counter() - t0
    err = float(np.max(np.abs(res.materials - f)))
    verdict(1, err < 1e-8 and sec < 2.0, f"DIWET max error {err:.2e}, {sec:.3f} s")


def test_c02_constraints(default_runs):
    worst_sum = worst_box = 0.0
    air_ok = True
    for d in default_runs.values():
        for m in ("di", "tvmd", "dlimd"):
            f = io.read_tensor(d / f"{m}.mdt")
            air = io.read_tensor(d / f"{m}_air.mdt")[:, :, 0]
            mask = io.read_tensor(d / f"{m}_airmask.mdt")[:, :, 0] > 0.5
            body = ~mask
            worst_sum = max(worst_sum, float(np.max(np.abs(f.sum(axis=2) + air - 1)[body])))
            air_ok &= bool(np.all(air[body] == 0))
            worst_box = max(worst_box, float(max(-f.min(), f.max() - 1, 0)))
    ok = worst_sum <= 1e-6 and worst_box <= 1e-9 and air_ok
    verdict(2, ok, f"max |sum f + AIR - 1| {worst_sum:.1e}, box violation {worst_box:.1e}, "
                   f"AIR = 0 off-air: {air_ok}")


def test_c03_pixel_qp_oracle():
    rng = np.random.default_rng(3)
    worst_gap = worst_kkt = 0.0
    grids = {2: simplex_grid(2, 1e-3), 3: simplex_grid(3, 1e-3)}
    for M in (2, 3):
        G = grids[M]
        for _ in range(100):
            N = 4
            B = rng.uniform(0.05, 1.0, (N, M))
            x = B @ rng.dirichlet(np.ones(M)) + rng.normal(0, 0.2, N)
            u = rng.uniform(-0.2, 1.2, M)
            eta = rng.uniform(0, 1)
            f = constrained_pixel_ls(B, x, u, eta)

            def obj(F):
                r = x - F @ B.T
                return 0.5 * np.sum(r**2, axis=-1) + 0.5 * eta * np.sum((F - u) ** 2, axis=-1)

            worst_gap = max(worst_gap, abs(float(obj(G).min() - obj(f))))
            grad = B.T @ (f @ B.T - x) + eta * (f - u)
            free = f > 0
            nu = grad[free].mean()
            kkt = np.concatenate([grad[free] - nu, np.minimum(grad[~free] - nu, 0)])
            worst_kkt = max(worst_kkt, float(np.linalg.norm(kkt)))
    verdict(3, worst_gap <= 2e-3 and worst_kkt < 1e-8,
            f"max |QP - grid| {worst_gap:.2e}, max KKT residual {worst_kkt:.1e} (200 instances)")


def test_c04_omp_oracle():
    rng = np.random.default_rng(4)
    exact = True
    for _ in range(50):
        Q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
        x = rng.standard_normal(16)
        L = int(rng.integers(1, 4))
        idx, _, resid = omp_batch(Q, x[:, None], L)
        e_best, sup = best_l_sparse(Q, x, L)
        exact &= set(idx[0].tolist()) == set(sup) and abs(float(resid[0] @ resid[0]) - e_best) < 1e-10
    worst = 0.0
    for _ in range(50):
        D = rng.standard_normal((16, 40))
        D /= np.linalg.norm(D, axis=0)
        X = rng.standard_normal((16, 8))
        L = int(rng.integers(1, 8))
        _, _, resid = omp_batch(D, X, L)
        for p in range(8):
            _, _, r = omp_reference(D, X[:, p], L)
            worst = max(worst, float(np.max(np.abs(resid[p] - r))))
    verdict(4, exact and worst < 1e-10,
            f"orthonormal = exhaustive: {exact}, general max residual diff {worst:.1e}")


def test_c05_ksvd(default_runs):
    d = default_runs[0]
    meta = json.loads((d / "dictionary.mdt.json").read_text())
    tc = meta["train_config"]
    defaults = (meta["patch_size"] == 8 and meta["n_atoms"] == 512 and tc["train_sparsity"] == 6
                and tc["train_iters"] == 200 and tc["n_patches"] == 10_000)
    h = np.array(meta["history"])
    rise = float(np.max(np.diff(h))) if h.size > 1 else 0.0
    mono = h.size == 200 and rise <= 1e-10
    # planted dictionary
    rng = np.random.default_rng(5)
    D0 = rng.standard_normal((64, 128))
    D0 /= np.linalg.norm(D0, axis=0)
    P = 3000
    A = np.zeros((128, P))
    for p in range(P):
        sup = rng.choice(128, 3, replace=False)
        A[sup, p] = rng.standard_normal(3) * 0.5 + np.sign(rng.standard_normal(3))
    X = D0 @ A
    D = ksvd_train(X, TrainConfig(n_patches=P, n_atoms=128, train_sparsity=3, train_iters=50))
    _, _, r = omp_batch(D, X, 3)
    res = float(np.mean(np.linalg.norm(r, axis=1)))
    verdict(5, defaults and mono and res < 1e-3,
            f"sidecar defaults {defaults}, 200-iter max rise {rise:.1e}, "
            f"planted mean residual {res:.1e} after 50 iters")


def test_c06_method_ordering(default_runs):
    per = {m: [] for m in METHODS}
    for d in default_runs.values():
        rep = json.loads((d / "report.json").read_text())
        table = rep["rois"]["all_rois"]
        mats = list(table["di"])
        for m in METHODS:
            per[m].append([table[m][k]["rmse"] for k in mats])
    mean = {m: np.mean(per[m], axis=0) for m in METHODS}
    ok = (np.all(mean["dlimd"] <= 1.05 * mean["tvmd"]) and np.all(mean["tvmd"] < mean["di"])
          and np.all(mean["di"] < mean["diwet"]))
    sec = max(json.loads((d / "stamps" / "decompose-dlimd.json").read_text())["seconds"]
              for d in default_runs.values())
    table = "; ".join(f"{m} " + "/".join(f"{v:.4f}" for v in mean[m]) for m in METHODS)
    verdict(6, bool(ok) and sec < 600, f"mean RMSE ({'/'.join(mats)}): {table}; "
                                       f"slowest DLIMD {sec:.0f} s")


def test_c07_fbp_sanity():
    g = Geometry(n_angles=360, n_detectors=512, detector_spacing=0.05, shape=(256, 256),
                 pixel_size=0.05)
    j = np.mgrid[:256, :256] - 127.5
    r = np.hypot(j[0], j[1])
    img = np.where(r <= 100, 0.2, 0.0)
    rec = fbp(forward_project(img, g), g)
    mean = float(rec[r <= 80].mean())
    verdict(7, abs(mean - 0.2) <= 0.02 * 0.2, f"interior mean {mean:.5f} (target 0.2)")


def test_c08_descent(default_runs):
    worst = -np.inf
    n = 0
    for d in default_runs.values():
        log = json.loads((d / "dlimd_log.json").read_text())["iterations"]
        n = len(log)
        worst = max(worst, max(e["f_objective_after"] - e["f_objective_before"] for e in log))
    verdict(8, worst <= 1e-9 and n == 30, f"{n} iterations, max F-objective increase {worst:.2e}")


def test_c09_reproducible(tmp_path):
    cfg = parse_config(small())
    a = Path(run_pipeline(cfg, out=tmp_path / "a")["directory"])
    b = Path(run_pipeline(cfg, out=tmp_path / "b")["directory"])
    names = sorted(str(p.relative_to(a)) for p in a.rglob("*")
                   if p.is_file() and p.suffix in (".mdt", ".csv", ".json", ".pgm")
                   and p.parent.name != "stamps")
    same = all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
    verdict(9, same and "report.json" in names, f"{len(names)} artifacts byte-identical: {same}")


def test_c10_metrics():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        a = rng.uniform(0, 1, (16, 16))
        b = rng.uniform(0, 1, (16, 16))
        ref_rmse = np.sqrt(sum((u - v) ** 2 for u, v in zip(a.ravel(), b.ravel())) / 256)
        worst = max(worst, abs(rmse(a, b) - ref_rmse),
                    abs(psnr(a, b) - 20 * np.log10(1 / ref_rmse)),
                    abs(ssim(a, b) - ssim_reference(a, b)))
    ident = rmse(a, a) == 0 and abs(ssim(a, a) - 1) < 1e-12 and psnr(a, a) == PSNR_CAP
    verdict(10, worst < 1e-10 and ident, f"max deviation from dense loops {worst:.1e}, "
                                         f"identity checks {ident}")
