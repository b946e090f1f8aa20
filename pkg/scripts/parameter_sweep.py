"""Sweep TVMD / DLIMD parameters on one simulated seed.

Reuses (or creates) the pipeline artifacts up to train-dict, then decomposes
with each parameter set and prints per-material RMSE over the evaluation
ROIs. Grid points are JSON objects; a "lambda" key selects TVMD.

    python scripts/parameter_sweep.py --seed 0 \
        '{"lambda": 0.01, "eta": 0.3}' '{"eta": 0.3, "eps": [0.7, 0.3, 0.7], "sparsity": 3}'
"""
import argparse
import json

import numpy as np

from sct import io
from sct.config import load_config
from sct.decomp import DlimdParams, TvmdParams, di, diwet, dlimd, tvmd
from sct.pipeline import Pipeline, STAGES


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("points", nargs="+", help="JSON parameter overrides")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="sct-runs")
    args = ap.parse_args()

    cfg = load_config(args.config, args.seed)
    pipe = Pipeline(cfg, args.out)
    pipe.run(STAGES[:STAGES.index("train-dict") + 1])
    x = io.read_tensor(pipe.path("images.mdt"))
    truth = io.read_tensor(pipe.path("truth.mdt"))
    B = io.read_matrix_csv(pipe.path("basis.csv"))[0]
    D, _ = io.load_dictionary(pipe.path("dictionary.mdt"))
    mask = pipe.evaluation_masks()["all_rois"]

    def score(f):
        return " ".join(f"{np.sqrt(np.mean((f[mask][:, m] - truth[mask][:, m]) ** 2)):.4f}"
                        for m in range(truth.shape[2]))

    print("materials", cfg.materials)
    print("diwet", score(diwet(x, B).materials))
    print("di   ", score(di(x, B).materials))
    for point in args.points:
        kw = json.loads(point)
        if "lambda" in kw:
            kw["lam"] = kw.pop("lambda")
            print("tvmd ", kw, score(tvmd(x, B, TvmdParams(**kw)).materials))
        else:
            if "eps" not in kw:
                kw["eps"] = cfg.dlimd.eps
            print("dlimd", kw, score(dlimd(x, B, D, DlimdParams(**kw)).materials))


if __name__ == "__main__":
    main()
