"""Sweep candidate desk-scale experiment settings and report the margins on
every training-quality acceptance quantity. Not part of the package; used to
pick the defaults recorded in config.py."""

import itertools
import math
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from efqat.config import default_config_dict, ExperimentConfig
from efqat.data import ingest_dataset
from efqat.model import Model
from efqat.training import TrainConfig, TrainLoop, calibrate, evaluate, make_plan


def run_protocol(cfg_dict, seeds=(0, 1, 2), ratios=(0.0, 0.05, 0.1, 0.25, 0.5, 1.0),
                 freqs=(128.0, 4096.0)):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    train_ds, eval_ds = ingest_dataset(cfg.dataset)
    results = {}
    for seed in seeds:
        t0 = time.time()
        model = Model(cfg.net, seed=seed)
        fp_cfg = TrainConfig.from_dict({**cfg.train.to_dict(), "mode": "fp",
                                        "epochs": cfg.train.fp_epochs, "seed": seed})
        TrainLoop(model, fp_cfg, quantized=False).run(train_ds)
        fp_acc = evaluate(model, eval_ds, quantized=False)["accuracy"]
        fp_state = {k: v.copy() for k, v in model.state_arrays().items()}

        calibrate(model, train_ds, cfg.train.calib_size, seed)
        ptq_state = {k: v.copy() for k, v in model.state_arrays().items()}
        ptq_acc = evaluate(model, eval_ds, quantized=True)["accuracy"]

        def efqat_run(mode, ratio, freq):
            m = Model(cfg.net, seed=seed)
            m.load_state_arrays(ptq_state)
            tc = TrainConfig.from_dict({**cfg.train.to_dict(), "mode": mode,
                                        "ratio": ratio, "freeze_freq": freq,
                                        "epochs": 1, "seed": seed})
            plan = make_plan(mode, m, ratio, freq)
            TrainLoop(m, tc, quantized=True, plan=plan).run(train_ds)
            return evaluate(m, eval_ds, quantized=True)["accuracy"]

        accs = {r: efqat_run("efqat-cwpn", r, 4096.0) for r in ratios}
        acc_f128 = efqat_run("efqat-cwpn", 0.25, 128.0)
        results[seed] = dict(fp=fp_acc, ptq=ptq_acc, ratio_accs=accs,
                             f128=acc_f128, seconds=time.time() - t0)
    return results


def summarize(results, ratios=(0.0, 0.05, 0.1, 0.25, 0.5, 1.0)):
    fp = np.mean([r["fp"] for r in results.values()])
    ptq = np.mean([r["ptq"] for r in results.values()])
    means = {r: np.mean([res["ratio_accs"][r] for res in results.values()])
             for r in ratios}
    f128 = np.mean([r["f128"] for r in results.values()])
    gap = fp - ptq
    rec25 = (means[0.25] - ptq) / gap if gap > 0 else float("nan")
    diffs = [means[b] - means[a] for a, b in zip(ratios, ratios[1:])]
    print(f"  FP {fp:.4f}  PTQ {ptq:.4f}  gap {gap*100:.2f}%")
    print(f"  ratio accs: " + "  ".join(f"{r}:{means[r]:.4f}" for r in ratios))
    print(f"  c6: gap>=1%: {gap >= 0.01}  r0>ptq: {means[0.0] > ptq}  "
          f"recovery>=50%: {rec25 >= 0.5} ({rec25*100:.0f}%)")
    print(f"  c7: |f128-f4096| = {abs(f128 - means[0.25])*100:.2f}% <= 1%: "
          f"{abs(f128 - means[0.25]) <= 0.01}")
    worst_dip = min(diffs)
    print(f"  c8: worst step {worst_dip*100:+.2f}% (needs >= -0.5%): {worst_dip >= -0.005}")
    print(f"  per-seed seconds: "
          + " ".join(f"{r['seconds']:.1f}" for r in results.values()))
    ok = (gap >= 0.01 and means[0.0] > ptq and rec25 >= 0.5
          and abs(f128 - means[0.25]) <= 0.01 and worst_dip >= -0.005)
    print(f"  ALL: {ok}")
    return ok


if __name__ == "__main__":
    base = default_config_dict()
    print("=== default config ===")
    summarize(run_protocol(base))
