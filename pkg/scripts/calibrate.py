"""Scratch calibration for the desk-scale task used in acceptance trends.

Not part of the test suite; prints trend margins for candidate datasets and
training budgets so the defaults can be pinned with comfortable slack.
"""

import sys
import time

import numpy as np

from ntfusion.data import BatchPlan, synth_blobs, train_test_split
from ntfusion.experiments import build_arch, ensemble_accuracy, train_members
from ntfusion.fusion import (
    EnsembleBundle,
    concat_fuse,
    fuse_iterative,
    nt_fuse,
    transplant_fraction,
    vanilla_average,
)
from ntfusion.pruning import prune_to_architecture
from ntfusion.training import TrainConfig, evaluate, train


def task(n, classes, dim, spread, data_seed, test_fraction=0.25):
    ds = synth_blobs(n, classes, dim, spread, seed=data_seed)
    return train_test_split(ds, test_fraction, seed=data_seed)


def main():
    n, classes, dim, spread = 1600, 6, 12, 1.1
    epochs, lr, width = 20, 0.05, 64
    if len(sys.argv) > 1:
        n, classes, dim = int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3])
        spread = float(sys.argv[4])
        epochs = int(sys.argv[5])
        lr = float(sys.argv[6])
    train_ds, test_ds = task(n, classes, dim, spread, data_seed=93)
    arch = {"type": "mlp", "in_features": dim, "hidden": [width] * 3, "classes": classes}
    specs = build_arch(arch)
    cfg = TrainConfig(epochs=epochs, lr=lr, momentum=0.9, batch=BatchPlan(64))
    ft3 = TrainConfig(epochs=3, lr=lr, momentum=0.9, batch=BatchPlan(64))
    ft30 = TrainConfig(epochs=30, lr=lr, momentum=0.9, batch=BatchPlan(64))

    t0 = time.perf_counter()
    rows = []
    for seed in (1, 2, 3, 4, 5):
        bundle, accs = train_members(specs, train_ds, test_ds, 8, seed, cfg)
        b2 = EnsembleBundle(bundle.members[:2], bundle.member_seeds[:2])
        nt = nt_fuse(b2)
        avg = vanilla_average(b2)
        nt_imm = evaluate(nt, test_ds)["accuracy"]
        avg_imm = evaluate(avg, test_ds)["accuracy"]
        _, h_nt3 = train(nt, train_ds, test_ds, ft3.reseeded(seed * 1000 + 97))
        _, h_avg3 = train(avg, train_ds, test_ds, ft3.reseeded(seed * 1000 + 97))
        _, h_nt30 = train(nt, train_ds, test_ds, ft30.reseeded(seed * 1000 + 97))
        # transplant endpoints
        rec_, don_ = bundle.members[0], bundle.members[1]
        tp = {}
        for p in (0.0, 0.5, 1.0):
            mixed = transplant_fraction(rec_, don_, p)
            _, h = train(mixed, train_ds, test_ds, ft3.reseeded(seed * 1000 + 97))
            tp[p] = max(r.test_accuracy for r in h.records)
        # self fusion
        m = bundle.members[0]
        sf = nt_fuse(EnsembleBundle([m, m.clone()]))
        sf_imm = evaluate(sf, test_ds)["accuracy"]
        _, h_sf = train(sf, train_ds, test_ds, ft3.reseeded(seed * 1000 + 97))
        # multimodel immediates
        imm = {}
        for k in (2, 4, 8):
            bk = EnsembleBundle(bundle.members[:k], bundle.member_seeds[:k])
            imm[("nt", k)] = evaluate(nt_fuse(bk), test_ds)["accuracy"]
            imm[("it", k)] = evaluate(fuse_iterative(bk), test_ds)["accuracy"]
        rows.append({
            "seed": seed,
            "member_mean": float(np.mean(accs[:2])),
            "best2": max(accs[:2]),
            "ens2": ensemble_accuracy(bundle.members[:2], test_ds),
            "nt_imm": nt_imm, "avg_imm": avg_imm,
            "nt3": max(r.test_accuracy for r in h_nt3.records),
            "avg3": max(r.test_accuracy for r in h_avg3.records),
            "nt30_best": max(r.test_accuracy for r in h_nt30.records),
            "tp0": tp[0.0], "tp05": tp[0.5], "tp1": tp[1.0],
            "m_acc": accs[0], "sf_imm": sf_imm,
            "sf3": max(r.test_accuracy for r in h_sf.records),
            **{f"{m}{k}": v for (m, k), v in imm.items()},
        })
    dt = time.perf_counter() - t0
    keys = list(rows[0])
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys if k != "seed"}
    print(f"== n={n} classes={classes} dim={dim} spread={spread} epochs={epochs} "
          f"lr={lr} ({dt:.1f}s)")
    for r in rows:
        print("  " + " ".join(f"{k}={r[k]:.3f}" if k != "seed" else f"s{r[k]}"
                              for k in keys))
    print("MEANS: " + " ".join(f"{k}={v:.4f}" for k, v in mean.items()))
    print("checks:")
    print(f"  c4a nt30_best {mean['nt30_best']:.4f} >= best2 {mean['best2']:.4f} : "
          f"{mean['nt30_best'] >= mean['best2']}")
    print(f"  c4b nt3 {mean['nt3']:.4f} >= avg3 {mean['avg3']:.4f} : "
          f"{mean['nt3'] >= mean['avg3']}")
    tp_wins = sum(1 for r in rows if r["tp05"] >= max(r["tp0"], r["tp1"]))
    print(f"  c6 tp05 wins {tp_wins}/5 (need >=4)")
    drops = [r["m_acc"] - r["sf_imm"] for r in rows]
    recov = [r["m_acc"] - r["sf3"] for r in rows]
    print(f"  c5 drops {['%.3f' % d for d in drops]} recover-gap "
          f"{['%.3f' % g for g in recov]} (drop>0, gap<=0.01)")
    print(f"  c7a nt imm k: {mean['nt2']:.3f} >= {mean['nt4']:.3f} >= {mean['nt8']:.3f}")
    print(f"  c7b it>=nt @4: {mean['it4']:.4f} >= {mean['nt4']:.4f} : "
          f"{mean['it4'] >= mean['nt4']}; @8: {mean['it8']:.4f} >= {mean['nt8']:.4f} : "
          f"{mean['it8'] >= mean['nt8']}")


if __name__ == "__main__":
    main()
