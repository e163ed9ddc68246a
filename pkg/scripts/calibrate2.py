"""Per-cell calibration of acceptance-trend experiments. Scratch tool."""

import sys
import time

import numpy as np

from ntfusion.data import BatchPlan, synth_blobs, train_test_split
from ntfusion.experiments import build_arch, ensemble_accuracy, train_members
from ntfusion.fusion import EnsembleBundle, fuse_iterative, nt_fuse, transplant_fraction, vanilla_average
from ntfusion.training import TrainConfig, evaluate, train

SEEDS = (1, 2, 3, 4, 5)


def task(n, classes, dim, spread, data_seed=93, test_fraction=0.25):
    ds = synth_blobs(n, classes, dim, spread, seed=data_seed)
    return train_test_split(ds, test_fraction, seed=data_seed)


def cfg(epochs, lr, batch=64):
    return TrainConfig(epochs=epochs, lr=lr, momentum=0.9, batch=BatchPlan(batch))


def acc_at(history, epoch):
    return history.records[epoch - 1].test_accuracy


def cell_c4(n=2400, classes=10, dim=16, spread=1.3, width=64, depth=3,
            epochs=25, lr=0.05, ft_lr=0.01):
    train_ds, test_ds = task(n, classes, dim, spread)
    specs = build_arch({"type": "mlp", "in_features": dim,
                        "hidden": [width] * depth, "classes": classes})
    rows = []
    for seed in SEEDS:
        bundle, accs = train_members(specs, train_ds, test_ds, 2, seed, cfg(epochs, lr))
        nt = nt_fuse(bundle)
        avg = vanilla_average(bundle)
        _, h_nt = train(nt, train_ds, test_ds, cfg(30, ft_lr).reseeded(seed * 1000 + 97))
        _, h_avg = train(avg, train_ds, test_ds, cfg(3, ft_lr).reseeded(seed * 1000 + 97))
        rows.append(dict(best=max(accs), ens=ensemble_accuracy(bundle.members, test_ds),
                         nt3=acc_at(h_nt, 3), avg3=acc_at(h_avg, 3),
                         nt_best=max(r.test_accuracy for r in h_nt.records),
                         nt_imm=evaluate(nt, test_ds)["accuracy"],
                         avg_imm=evaluate(avg, test_ds)["accuracy"]))
    m = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    print(f"C4 task(n={n},c={classes},d={dim},s={spread}) mlp{depth}x{width} "
          f"ep={epochs} lr={lr} ftlr={ft_lr}")
    print("   " + " ".join(f"{k}={v:.4f}" for k, v in m.items()))
    print(f"   c4a nt_best>=best: {m['nt_best'] >= m['best']}   "
          f"c4b nt3>=avg3: {m['nt3'] >= m['avg3']}  margins "
          f"{m['nt_best'] - m['best']:+.4f} / {m['nt3'] - m['avg3']:+.4f}")
    return m


def cell_c6(n=2400, classes=10, dim=16, spread=1.3, width=64, depth=1,
            epochs=25, lr=0.05, ft_lr=0.01):
    train_ds, test_ds = task(n, classes, dim, spread)
    specs = build_arch({"type": "mlp", "in_features": dim,
                        "hidden": [width] * depth, "classes": classes})
    wins = 0
    details = []
    for seed in SEEDS:
        bundle, accs = train_members(specs, train_ds, test_ds, 2, seed, cfg(epochs, lr))
        rec_, don_ = bundle.members
        out = {}
        for p in (0.0, 0.5, 1.0):
            mixed = transplant_fraction(rec_, don_, p)
            _, h = train(mixed, train_ds, test_ds, cfg(3, ft_lr).reseeded(seed * 1000 + 97))
            out[p] = acc_at(h, 3)
        wins += out[0.5] >= max(out[0.0], out[1.0])
        details.append(out)
    print(f"C6 mlp{depth}x{width} ftlr={ft_lr}: wins {wins}/5 " +
          " ".join(f"[{d[0.0]:.3f}/{d[0.5]:.3f}/{d[1.0]:.3f}]" for d in details))
    return wins


def cell_c7(n=2400, classes=10, dim=16, spread=1.3, width=256, depth=3,
            epochs=25, lr=0.05):
    train_ds, test_ds = task(n, classes, dim, spread)
    specs = build_arch({"type": "mlp", "in_features": dim,
                        "hidden": [width] * depth, "classes": classes})
    imms = {key: [] for key in ("nt2", "nt4", "nt8", "it4", "it8")}
    for seed in SEEDS:
        bundle, _ = train_members(specs, train_ds, test_ds, 8, seed, cfg(epochs, lr))
        for k in (2, 4, 8):
            bk = EnsembleBundle(bundle.members[:k], bundle.member_seeds[:k])
            imms[f"nt{k}"].append(evaluate(nt_fuse(bk), test_ds)["accuracy"])
            if k > 2:
                imms[f"it{k}"].append(evaluate(fuse_iterative(bk), test_ds)["accuracy"])
    m = {k: float(np.mean(v)) for k, v in imms.items()}
    print(f"C7 mlp{depth}x{width}: " + " ".join(f"{k}={v:.4f}" for k, v in m.items()))
    print(f"   mono: {m['nt2'] >= m['nt4'] >= m['nt8']}  it4>=nt4: {m['it4'] >= m['nt4']} "
          f"({m['it4'] - m['nt4']:+.4f})  it8>=nt8: {m['it8'] >= m['nt8']} "
          f"({m['it8'] - m['nt8']:+.4f})")
    return m


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    t0 = time.perf_counter()
    if which in ("all", "c4"):
        cell_c4()
    if which in ("all", "c6"):
        cell_c6()
    if which in ("all", "c7"):
        cell_c7()
    print(f"({time.perf_counter() - t0:.1f}s)")
