"""End-to-end workflow: simulate -> fbp -> basis -> bootstrap -> train-dict ->
decompose -> evaluate -> render.

Each run owns ``<outputs>/<config digest>/``. A stage writes a stamp with the
hashes of its inputs and outputs; with identical inputs and intact outputs
it is skipped as up-to-date.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import io
from .config import PipelineConfig, config_to_json
from .decomp import diwet, di, dlimd, estimate_attenuation_matrix, roi_mask, tvmd
from .dictlearn import build_training_set, ksvd_train
from .metrics import roi_report
from .recon import fbp
from .spectral import (CountData, build_attenuation_matrix_true, load_attenuation_table,
                       log_normalize, make_phantom, synthesize_counts)
from .tensor import normalize_materials

log = logging.getLogger(__name__)

STAGES = ["simulate", "fbp", "basis", "bootstrap", "train-dict", "decompose", "evaluate", "render"]
METHODS = ["diwet", "di", "tvmd", "dlimd"]
DISPLAY_WINDOW = (0.0, 1.0)


class DependencyError(RuntimeError):
    pass


class LockError(RuntimeError):
    pass


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _is_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def _locked(directory: Path):
    lock = directory / ".lock"
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or "0")
            except (ValueError, OSError):
                pid = 0
            if pid and _is_alive(pid):
                raise LockError(f"{directory} is in use by process {pid} (lock file {lock})") from None
            log.warning("removing stale lock %s", lock)
            lock.unlink(missing_ok=True)
    else:
        raise LockError(f"could not acquire {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class Pipeline:
    def __init__(self, cfg: PipelineConfig, out=None):
        self.cfg = cfg
        root = Path(out if out is not None else cfg.outputs["directory"])
        self.dir = root / cfg.digest()
        self.stamps = self.dir / "stamps"
        self.geom = cfg.geometry
        self.bins = cfg.bins()
        self.materials = cfg.materials

    # artifact bookkeeping -------------------------------------------------
    def path(self, name) -> Path:
        return self.dir / name

    def outputs_of(self, stage, methods=METHODS):
        if stage == "simulate":
            return ["truth.mdt", "truth_air.mdt", "counts.mdt", "basis_true.csv"]
        if stage == "fbp":
            return ["images.mdt"]
        if stage == "basis":
            return ["basis.csv", "basis.json"]
        if stage == "bootstrap":
            return ["bootstrap_di.mdt", "bootstrap_normalized.mdt", "normalization.json"]
        if stage == "train-dict":
            return ["dictionary.mdt", "dictionary.mdt.json"]
        if stage == "decompose":
            suffixes = (".mdt", "_air.mdt", "_airmask.mdt", "_log.json")
            return [f"{m}{sfx}" for m in methods for sfx in suffixes]
        if stage == "evaluate":
            return ["report.json", "report.csv"]
        if stage == "render":
            return [f"figures/{m}_{mat}.pgm" for m in methods for mat in self.materials]
        raise ValueError(f"unknown stage {stage!r}")

    def inputs_of(self, stage, method=None):
        if stage == "fbp":
            return {"simulate": ["counts.mdt"]}
        if stage == "basis":
            return {"fbp": ["images.mdt"]}
        if stage == "bootstrap":
            return {"fbp": ["images.mdt"], "basis": ["basis.csv"]}
        if stage == "train-dict":
            return {"bootstrap": ["bootstrap_normalized.mdt"]}
        if stage == "decompose":
            deps = {"fbp": ["images.mdt"], "basis": ["basis.csv"]}
            if method == "dlimd":
                deps["train-dict"] = ["dictionary.mdt", "dictionary.mdt.json"]
            return deps
        if stage == "evaluate":
            return {"simulate": ["truth.mdt"],
                    "decompose": [f"{m}.mdt" for m in (method or METHODS)]}
        if stage == "render":
            return {"decompose": [f"{m}.mdt" for m in (method or METHODS)]}
        return {}

    def _stamp_path(self, key):
        return self.stamps / f"{key}.json"

    def _input_hashes(self, deps):
        hashes = {}
        for dep, files in deps.items():
            for name in files:
                p = self.path(name)
                if not p.exists():
                    cmd = "train-dict" if dep == "bootstrap" else dep
                    raise DependencyError(
                        f"missing {name}: run stage {dep!r} first (sct {cmd})")
                hashes[name] = _sha(p)
        return hashes

    def up_to_date(self, key, deps, outputs) -> bool:
        sp = self._stamp_path(key)
        if not sp.exists():
            return False
        stamp = json.loads(sp.read_text())
        if stamp.get("config") != self.cfg.digest():
            return False
        if stamp.get("inputs") != self._input_hashes(deps):
            return False
        for name in outputs:
            p = self.path(name)
            if not p.exists() or stamp["outputs"].get(name) != _sha(p):
                return False
        return True

    def _write_stamp(self, key, deps, outputs, seconds):
        stamp = {"stage": key, "config": self.cfg.digest(),
                 "inputs": self._input_hashes(deps),
                 "outputs": {n: _sha(self.path(n)) for n in outputs},
                 "seconds": round(seconds, 3)}
        _json_dump(stamp, self._stamp_path(key))

    def _run(self, key, stage, deps, outputs, fn, force, status):
        self._input_hashes(deps)  # dependency check before any work
        if not force and self.up_to_date(key, deps, outputs):
            log.info("%s: up-to-date", key)
            status[key] = "up-to-date"
            return
        t0 = time.perf_counter()
        fn()
        self._write_stamp(key, deps, outputs, time.perf_counter() - t0)
        log.info("%s: done in %.1f s", key, time.perf_counter() - t0)
        status[key] = "ran"

    # stages ----------------------------------------------------------------
    def _true_basis(self):
        table = load_attenuation_table(self.cfg.spectrum.attenuation_table)
        return build_attenuation_matrix_true(table, self.bins, self.materials,
                                             self.cfg.phantom.densities)

    def simulate(self):
        B = self._true_basis()
        f, air = make_phantom(self.cfg.phantom_spec())
        noise = self.cfg.noise
        counts = synthesize_counts(f, B, self.geom, self.bins, noise.enabled, noise.seed)
        io.write_tensor(f, self.path("truth.mdt"), units="fraction")
        io.write_tensor(air[:, :, None], self.path("truth_air.mdt"), units="fraction")
        io.write_tensor(counts.y, self.path("counts.mdt"), units="photons (view, detector, bin)")
        io.write_matrix_csv(B, self.path("basis_true.csv"), self.materials)

    def fbp(self):
        y = io.read_tensor(self.path("counts.mdt"))
        p = log_normalize(CountData(y, self.geom, self.cfg.noise.seed), self.bins)
        x = np.stack([fbp(p[:, :, n], self.geom) for n in range(p.shape[2])], axis=-1)
        io.write_tensor(x, self.path("images.mdt"), units="cm^-1")

    def basis(self):
        x = io.read_tensor(self.path("images.mdt"))
        est = estimate_attenuation_matrix(x, self.cfg.rois["basis"])
        io.write_matrix_csv(est.matrix, self.path("basis.csv"), self.materials)
        _json_dump({"condition": est.condition, "std": est.std.tolist()},
                   self.path("basis.json"))

    def _basis(self):
        return io.read_matrix_csv(self.path("basis.csv"))[0]

    def _air_args(self):
        p = self.cfg.dlimd
        return dict(threshold=p.air_threshold, reference=p.air_reference, level=p.air_level,
                    rule=p.air_rule)

    def bootstrap(self):
        x = io.read_tensor(self.path("images.mdt"))
        res = di(x, self._basis(), **self._air_args())
        fn, rec = normalize_materials(res.materials)
        io.write_tensor(res.materials, self.path("bootstrap_di.mdt"), units="fraction")
        io.write_tensor(fn, self.path("bootstrap_normalized.mdt"), units="normalized")
        _json_dump({"offset": rec.offset.tolist(), "scale": rec.scale.tolist()},
                   self.path("normalization.json"))

    def train_dict(self):
        fn = io.read_tensor(self.path("bootstrap_normalized.mdt"))
        tc = self.cfg.dictionary
        D = ksvd_train(build_training_set(fn, tc), tc)
        io.save_dictionary(D, self.path("dictionary.mdt"), tc)

    def decompose(self, method):
        x = io.read_tensor(self.path("images.mdt"))
        B = self._basis()
        if method == "diwet":
            res = diwet(x, B)
        elif method == "di":
            res = di(x, B, **self._air_args())
        elif method == "tvmd":
            res = tvmd(x, B, self.cfg.tvmd)
        elif method == "dlimd":
            D, _ = io.load_dictionary(self.path("dictionary.mdt"))
            res = dlimd(x, B, D, self.cfg.dlimd)
        else:
            raise ValueError(f"unknown method {method!r}")
        io.write_tensor(res.materials, self.path(f"{method}.mdt"), units="fraction")
        io.write_tensor(res.air[:, :, None], self.path(f"{method}_air.mdt"), units="fraction")
        io.write_tensor(res.air_mask[:, :, None].astype(float), self.path(f"{method}_airmask.mdt"),
                        units="1 = air pixel")
        _json_dump({"method": method, "n_air": int(res.air_mask.sum()), "iterations": res.log},
                   self.path(f"{method}_log.json"))

    def evaluation_masks(self):
        shape = self.geom.shape
        masks = {k: roi_mask(shape, r) for k, r in sorted(self.cfg.rois["evaluation"].items())}
        if masks:
            masks["all_rois"] = np.logical_or.reduce(list(masks.values()))
        return masks

    def evaluate(self, methods):
        truth = io.read_tensor(self.path("truth.mdt"))
        results = {m: io.read_tensor(self.path(f"{m}.mdt")) for m in methods}
        rep = roi_report(truth, results, self.evaluation_masks(), self.materials)
        rep["metadata"]["config_digest"] = self.cfg.digest()
        rep["metadata"]["methods"] = list(methods)
        rep["metadata"]["all_rois"] = "union of the named evaluation ROIs"
        _json_dump(rep, self.path("report.json"))
        with open(self.path("report.csv"), "w") as fh:
            fh.write("roi,method,material,rmse,psnr,ssim,mean\n")
            for roi, by_method in rep["rois"].items():
                for method, by_mat in by_method.items():
                    for mat, r in by_mat.items():
                        ss = "" if r["ssim"] is None else repr(r["ssim"])
                        fh.write(f"{roi},{method},{mat},{r['rmse']!r},{r['psnr']!r},{ss},{r['mean']!r}\n")

    def render(self, methods):
        (self.dir / "figures").mkdir(exist_ok=True)
        for m in methods:
            f = io.read_tensor(self.path(f"{m}.mdt"))
            for c, mat in enumerate(self.materials):
                io.render(f, c, DISPLAY_WINDOW, self.path(f"figures/{m}_{mat}.pgm"))

    # driver ------------------------------------------------------------------
    def run(self, stages=None, methods=None, force=False) -> dict:
        stages = list(STAGES if stages is None else stages)
        bad = [s for s in stages if s not in STAGES]
        if bad:
            raise ValueError(f"unknown stage(s) {bad}")
        methods = list(METHODS if methods is None else methods)
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.stamps.mkdir(exist_ok=True)
        status = {}
        with _locked(self.dir):
            cfg_path = self.path("config.json")
            text = config_to_json(self.cfg)
            if not cfg_path.exists() or cfg_path.read_text() != text:
                cfg_path.write_text(text)
            for stage in STAGES:
                if stage not in stages:
                    continue
                if stage == "decompose":
                    for m in methods:
                        self._run(f"decompose-{m}", stage, self.inputs_of(stage, m),
                                  self.outputs_of(stage, [m]),
                                  lambda m=m: self.decompose(m), force, status)
                    continue
                if stage in ("evaluate", "render"):
                    fn = (lambda: self.evaluate(methods)) if stage == "evaluate" else (
                        lambda: self.render(methods))
                    self._run(stage, stage, self.inputs_of(stage, methods),
                              self.outputs_of(stage, methods), fn, force, status)
                    continue
                fn = getattr(self, stage.replace("-", "_"))
                self._run(stage, stage, self.inputs_of(stage), self.outputs_of(stage),
                          fn, force, status)
        return status


def run_pipeline(cfg: PipelineConfig, stages=None, methods=None, force=False, out=None) -> dict:
    """Run (a subset of) the pipeline; returns ``{"directory", "status"}``."""
    p = Pipeline(cfg, out)
    status = p.run(stages, methods, force)
    return {"directory": p.dir, "status": status}
