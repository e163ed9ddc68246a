"""Declarative fusion experiments: order-of-operations pipelines, multi-model
and sweep ablations, the self-fusion failure case, baseline comparisons, and
fusion cost measurement.

Every experiment is reproducible from (spec, seeds): datasets, inits, batch
orders, and fine-tuning are all driven by counter-based streams. Seeds may run
on worker threads (capped by the NT_THREADS env var, default 1); records are
assembled in seed order either way.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import network as nw
from .data import (
    BatchPlan,
    Dataset,
    load_csv,
    load_idx,
    synth_blobs,
    synth_shapes,
    train_test_split,
)
from .errors import InvalidArg
from .fusion import EnsembleBundle, FusionPlan, concat_fuse, fuse, nt_fuse, vanilla_average
from .network import LayerSpec, Network, init_network
from .pruning import KeepPolicy, magnitude_prune, prune_to_architecture
from .reporting import RunReport, SeedRecord
from .tensor import RngStream, row_l2_norms
from .training import KdConfig, TrainConfig, distill, evaluate, train
from .training import average_logits


def build_dataset(desc: dict) -> tuple[Dataset, Dataset]:
    """Materialize (train, test) from a JSON-able descriptor."""
    kind = desc.get("kind")
    if kind == "blobs":
        ds = synth_blobs(desc["n"], desc["classes"], desc["dim"], desc["spread"], desc["seed"])
        return train_test_split(ds, desc.get("test_fraction", 0.25), desc["seed"])
    if kind == "shapes":
        ds = synth_shapes(desc["n"], desc["classes"], desc.get("image", 12),
                          desc.get("noise", 0.1), desc["seed"])
        return train_test_split(ds, desc.get("test_fraction", 0.25), desc["seed"])
    if kind == "idx":
        train_ds = load_idx(desc["train_images"], desc["train_labels"],
                            desc.get("num_classes"), "train")
        test_ds = load_idx(desc["test_images"], desc["test_labels"],
                           desc.get("num_classes"), "test")
        if desc.get("limit_train"):
            train_ds = train_ds.subset(np.arange(int(desc["limit_train"])))
        if desc.get("limit_test"):
            test_ds = test_ds.subset(np.arange(int(desc["limit_test"])))
        return train_ds, test_ds
    if kind == "csv":
        ds = load_csv(desc["path"], desc.get("num_classes"))
        return train_test_split(ds, desc.get("test_fraction", 0.25), desc.get("seed", 0))
    raise InvalidArg(f"unknown dataset kind {kind!r}")


def build_arch(template: dict) -> list[LayerSpec]:
    """Expand an architecture template into a layer spec list."""
    t = template.get("type")
    if t == "mlp":
        dims = [template["in_features"], *template["hidden"]]
        specs: list[LayerSpec] = [nw.flatten()]  # accept image or flat features
        for a, b in zip(dims[:-1], dims[1:]):
            specs += [nw.linear(a, b), nw.relu()]
        specs.append(nw.linear(dims[-1], template["classes"]))
        return specs
    if t == "convnet":
        h, w = template["image_hw"]
        cin = template["in_channels"]
        kernel = template.get("kernel", 3)
        padding = template.get("padding", 1)
        use_bn = template.get("batchnorm", True)
        specs = []
        for cout in template["conv_channels"]:
            specs.append(nw.conv(cin, cout, kernel, stride=1, padding=padding))
            if use_bn:
                specs.append(nw.batchnorm(cout))
            specs.append(nw.relu())
            specs.append(nw.maxpool(2))
            h = ((h + 2 * padding - kernel) + 1) // 2
            w = ((w + 2 * padding - kernel) + 1) // 2
            cin = cout
        specs.append(nw.flatten())
        feat = cin * h * w
        for hidden in template.get("hidden", []):
            specs += [nw.linear(feat, hidden), nw.relu()]
            feat = hidden
        specs.append(nw.linear(feat, template["classes"]))
        return specs
    if t == "layers":
        return [LayerSpec.from_dict(d) for d in template["layers"]]
    raise InvalidArg(f"unknown arch template {t!r}")


@dataclass
class ExperimentSpec:
    """One experiment cell: data, architecture, ensemble size, and plan."""

    name: str
    dataset: dict
    arch: dict
    k: int = 2
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr=0.05))
    plan: FusionPlan = field(default_factory=FusionPlan)
    outputs: str | None = None

    def __post_init__(self) -> None:
        if not self.seeds:
            raise InvalidArg("need at least one seed")
        if self.plan.finetune is None:
            self.plan = replace(self.plan, finetune=replace(self.train, epochs=30))

    @staticmethod
    def from_json(doc) -> "ExperimentSpec":
        if isinstance(doc, (str, Path)):
            doc = json.loads(Path(doc).read_text(encoding="utf-8"))
        train_cfg = _train_config(doc.get("train", {}))
        plan_doc = dict(doc.get("plan", {}))
        ft_doc = plan_doc.pop("finetune", None)
        finetune = _train_config(ft_doc) if ft_doc else replace(train_cfg, epochs=30)
        if "finetune_epochs" in doc:
            finetune = replace(finetune, epochs=int(doc["finetune_epochs"]))
        plan = FusionPlan(
            method=plan_doc.get("method", "nt"),
            sparsity=plan_doc.get("sparsity"),
            pipeline=plan_doc.get("pipeline", "merge_prune_ft"),
            finetune=finetune,
        )
        return ExperimentSpec(
            name=doc["name"],
            dataset=doc["dataset"],
            arch=doc["arch"],
            k=int(doc.get("k", 2)),
            seeds=tuple(doc.get("seeds", (1, 2, 3, 4, 5))),
            train=train_cfg,
            plan=plan,
            outputs=doc.get("outputs"),
        )


def _train_config(doc: dict) -> TrainConfig:
    from .training import StepDecay

    batch_doc = doc.get("batch", {})
    plan = BatchPlan(
        batch_size=int(batch_doc.get("batch_size", 64)),
        shuffle_seed=int(batch_doc.get("shuffle_seed", 0)),
        drop_last=bool(batch_doc.get("drop_last", False)),
    )
    sched_doc = doc.get("schedule")
    schedule = StepDecay(int(sched_doc["period"]), float(sched_doc["factor"])) if sched_doc else None
    return TrainConfig(
        epochs=int(doc.get("epochs", 20)),
        lr=float(doc.get("lr", 0.05)),
        momentum=float(doc.get("momentum", 0.9)),
        schedule=schedule,
        batch=plan,
        seed=int(doc.get("seed", 0)),
    )


def _map_seeds(fn, seeds):
    workers = int(os.environ.get("NT_THREADS", "1"))
    if workers <= 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seeds))


def member_seed(seed: int, j: int) -> int:
    return seed * 1000 + j


def train_members(specs: list[LayerSpec], train_ds: Dataset, test_ds: Dataset,
                  k: int, seed: int, cfg: TrainConfig) -> tuple[EnsembleBundle, list[float]]:
    """Train k members from different inits; returns the bundle and test accs."""
    members, accs, seeds = [], [], []
    for j in range(k):
        ms = member_seed(seed, j)
        net = init_network(specs, RngStream(ms, "init"))
        net, history = train(net, train_ds, test_ds, cfg.reseeded(ms))
        members.append(net)
        accs.append(history.records[-1].test_accuracy if history.records
                    else evaluate(net, test_ds)["accuracy"])
        seeds.append(ms)
    return EnsembleBundle(members, seeds), accs


def ensemble_accuracy(members, ds: Dataset, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(ds), batch_size):
        x = ds.features[start : start + batch_size]
        y = ds.labels[start : start + batch_size]
        logits = average_logits(members, x)
        correct += int((np.argmax(logits, axis=1) == y).sum())
    return correct / len(ds)


def _norm_bytes(net: Network) -> int:
    from .network import hidden_couplings

    return sum(c.units * 4 for c in hidden_couplings(net))


def _even_member_quotas(width: int, k: int) -> tuple[int, ...]:
    base, extra = divmod(width, k)
    return tuple(base + (1 if j < extra else 0) for j in range(k))


def _pipeline_fuse(bundle: EnsembleBundle, plan: FusionPlan, train_ds: Dataset,
                   test_ds: Dataset, seed: int):
    """Run the plan's pipeline; returns (net, immediate-ready flag extras)."""
    reference = bundle.members[0]
    peak = sum(m.num_bytes() for m in bundle.members)
    merged_series: list[float] = []
    if plan.method in ("avg", "align", "nt_iterative", "nt_recursive"):
        fused = fuse(bundle, plan)
        peak += fused.num_bytes()
        return fused, merged_series, peak
    big = concat_fuse(bundle)
    peak += big.num_bytes() + _norm_bytes(big)
    if plan.pipeline == "prune_merge_ft":
        member_widths = {c.units // bundle.k for c in nw.hidden_couplings(big)}
        if len(member_widths) != 1:
            raise InvalidArg("prune_merge_ft needs uniform hidden widths")
        quotas = _even_member_quotas(member_widths.pop(), bundle.k)
        pruned = magnitude_prune(big, KeepPolicy.per_member(quotas))
    elif plan.pipeline == "merge_ft_prune_ft":
        mid_epochs = plan.finetune.epochs // 2
        mid_cfg = replace(plan.finetune, epochs=mid_epochs).reseeded(seed * 1000 + 811)
        big, mid_history = train(big, train_ds, test_ds, mid_cfg)
        merged_series = [r.test_accuracy for r in mid_history.records]
        pruned = (prune_to_architecture(big, reference) if plan.sparsity is None
                  else magnitude_prune(big, KeepPolicy.sparsity(plan.sparsity)))
    else:  # merge_prune_ft
        pruned = (prune_to_architecture(big, reference) if plan.sparsity is None
                  else magnitude_prune(big, KeepPolicy.sparsity(plan.sparsity)))
    peak += pruned.num_bytes()
    return pruned, merged_series, peak


def _ft_epochs(plan: FusionPlan) -> int:
    epochs = plan.finetune.epochs
    if plan.pipeline == "merge_ft_prune_ft" and plan.method == "nt":
        epochs = epochs - epochs // 2
    return epochs


def run_pipeline(spec: ExperimentSpec) -> RunReport:
    """Train k members per seed, fuse per the plan, fine-tune, and report."""
    specs = build_arch(spec.arch)
    train_ds, test_ds = build_dataset(spec.dataset)

    def one_seed(seed: int) -> SeedRecord:
        t0 = time.perf_counter()
        bundle, member_accs = train_members(specs, train_ds, test_ds, spec.k, seed, spec.train)
        fused, merged_series, peak = _pipeline_fuse(bundle, spec.plan, train_ds, test_ds, seed)
        rec = SeedRecord(seed=seed)
        rec.set_metric("ensemble_acc", ensemble_accuracy(bundle.members, test_ds))
        rec.set_metric("best_member_acc", max(member_accs))
        rec.set_metric("immediate_acc", evaluate(fused, test_ds)["accuracy"])
        ft_epochs = _ft_epochs(spec.plan)
        if ft_epochs > 0:
            ft_cfg = replace(spec.plan.finetune, epochs=ft_epochs).reseeded(seed * 1000 + 97)
            _, history = train(fused, train_ds, test_ds, ft_cfg)
            rec.set_series("finetuned_acc", [r.test_accuracy for r in history.records])
        if merged_series:
            rec.set_series("merged_ft_acc", merged_series)
        rec.wall_seconds = time.perf_counter() - t0
        rec.peak_bytes_estimate = peak
        return rec

    method = spec.plan.method if spec.plan.method != "nt" else f"nt/{spec.plan.pipeline}"
    return RunReport(spec.name, method, _map_seeds(one_seed, spec.seeds))


def ablation_multimodel(spec: ExperimentSpec, ks=(2, 4, 8),
                        methods=("nt", "nt_iterative", "nt_recursive")) -> list[RunReport]:
    """Joint vs iterative vs recursive fusion over growing ensemble sizes."""
    specs = build_arch(spec.arch)
    train_ds, test_ds = build_dataset(spec.dataset)
    k_max = max(ks)
    reports = {(k, m): RunReport(f"{spec.name}-k{k}", m, []) for k in ks for m in methods}

    def one_seed(seed: int):
        bundle_all, member_accs = train_members(specs, train_ds, test_ds, k_max, seed, spec.train)
        out = []
        for k in ks:
            members = bundle_all.members[:k]
            bundle = EnsembleBundle(members, bundle_all.member_seeds[:k])
            ens = ensemble_accuracy(members, test_ds)
            best = max(member_accs[:k])
            for m in methods:
                t0 = time.perf_counter()
                fused = fuse(bundle, FusionPlan(method=m, finetune=spec.plan.finetune))
                rec = SeedRecord(seed=seed)
                rec.set_metric("ensemble_acc", ens)
                rec.set_metric("best_member_acc", best)
                rec.set_metric("immediate_acc", evaluate(fused, test_ds)["accuracy"])
                if spec.plan.finetune.epochs > 0:
                    ft_cfg = spec.plan.finetune.reseeded(seed * 1000 + 97)
                    _, history = train(fused, train_ds, test_ds, ft_cfg)
                    rec.set_series("finetuned_acc", [r.test_accuracy for r in history.records])
                rec.wall_seconds = time.perf_counter() - t0
                out.append(((k, m), rec))
        return out

    for per_seed in _map_seeds(one_seed, spec.seeds):
        for key, rec in per_seed:
            reports[key].records.append(rec)
    return [reports[(k, m)] for k in ks for m in methods]


def _with_hidden(template: dict, hidden: list[int]) -> dict:
    out = dict(template)
    out["hidden"] = hidden
    return out


def ablation_sweep(axis: str, values, spec: ExperimentSpec) -> list[RunReport]:
    """One report per swept value; axis is width, depth, transplant_fraction,
    or sparsity."""
    axis = axis.lower()
    if axis == "width":
        hidden = spec.arch.get("hidden", [64])
        return [
            run_pipeline(replace_spec(spec, name=f"{spec.name}-width{v}",
                                      arch=_with_hidden(spec.arch, [int(v)] * len(hidden))))
            for v in values
        ]
    if axis == "depth":
        width = spec.arch.get("hidden", [64])[0]
        return [
            run_pipeline(replace_spec(spec, name=f"{spec.name}-depth{v}",
                                      arch=_with_hidden(spec.arch, [width] * int(v))))
            for v in values
        ]
    if axis == "transplant_fraction":
        return _transplant_sweep(values, spec)
    if axis == "sparsity":
        reports = []
        recovered = 1.0 - 1.0 / spec.k
        for v in values:
            rep = run_pipeline(replace_spec(
                spec, name=f"{spec.name}-s{v}",
                plan=replace(spec.plan, method="nt", sparsity=float(v))))
            marker = 1.0 if abs(float(v) - recovered) < 1e-9 else 0.0
            for rec in rep.records:
                rec.set_metric("member_size_recovered", marker)
            reports.append(rep)
        return reports
    raise InvalidArg(f"unknown sweep axis {axis!r}")


def replace_spec(spec: ExperimentSpec, **kw) -> ExperimentSpec:
    return ExperimentSpec(
        name=kw.get("name", spec.name),
        dataset=kw.get("dataset", spec.dataset),
        arch=kw.get("arch", spec.arch),
        k=kw.get("k", spec.k),
        seeds=kw.get("seeds", spec.seeds),
        train=kw.get("train", spec.train),
        plan=kw.get("plan", spec.plan),
        outputs=kw.get("outputs", spec.outputs),
    )


def _transplant_sweep(values, spec: ExperimentSpec) -> list[RunReport]:
    from .fusion import transplant_fraction

    specs = build_arch(spec.arch)
    train_ds, test_ds = build_dataset(spec.dataset)
    reports = {float(p): RunReport(spec.name, f"p={float(p):g}", []) for p in values}

    def one_seed(seed: int):
        bundle, member_accs = train_members(specs, train_ds, test_ds, 2, seed, spec.train)
        recipient, donor = bundle.members
        out = []
        for p in values:
            p = float(p)
            t0 = time.perf_counter()
            mixed = transplant_fraction(recipient, donor, p)
            rec = SeedRecord(seed=seed)
            rec.set_metric("recipient_acc", member_accs[0])
            rec.set_metric("donor_acc", member_accs[1])
            rec.set_metric("immediate_acc", evaluate(mixed, test_ds)["accuracy"])
            if spec.plan.finetune.epochs > 0:
                ft_cfg = spec.plan.finetune.reseeded(seed * 1000 + 97)
                _, history = train(mixed, train_ds, test_ds, ft_cfg)
                rec.set_series("finetuned_acc", [r.test_accuracy for r in history.records])
            rec.wall_seconds = time.perf_counter() - t0
            out.append((p, rec))
        return out

    for per_seed in _map_seeds(one_seed, spec.seeds):
        for p, rec in per_seed:
            reports[p].records.append(rec)
    return [reports[float(p)] for p in values]


def failure_case(spec: ExperimentSpec) -> RunReport:
    """Fuse a trained model with a copy of itself: accuracy must drop
    immediately and recover with a few epochs of fine-tuning."""
    specs = build_arch(spec.arch)
    train_ds, test_ds = build_dataset(spec.dataset)

    def one_seed(seed: int) -> SeedRecord:
        t0 = time.perf_counter()
        bundle, accs = train_members(specs, train_ds, test_ds, 1, seed, spec.train)
        model = bundle.members[0]
        self_bundle = EnsembleBundle([model, model.clone()], [seed, seed])
        fused = nt_fuse(self_bundle)
        rec = SeedRecord(seed=seed)
        rec.set_metric("member_acc", accs[0])
        rec.set_metric("immediate_acc", evaluate(fused, test_ds)["accuracy"])
        rec.set_metric("avg_self_acc",
                       evaluate(vanilla_average(self_bundle), test_ds)["accuracy"])
        if spec.plan.finetune.epochs > 0:
            ft_cfg = spec.plan.finetune.reseeded(seed * 1000 + 97)
            _, history = train(fused, train_ds, test_ds, ft_cfg)
            rec.set_series("finetuned_acc", [r.test_accuracy for r in history.records])
        rec.wall_seconds = time.perf_counter() - t0
        return rec

    return RunReport(spec.name, "nt_self_fusion", _map_seeds(one_seed, spec.seeds))


def compare_methods(spec: ExperimentSpec, methods=("nt", "avg", "align"),
                    kd: KdConfig | None = None) -> list[RunReport]:
    """NT against vanilla averaging and assignment-based align-and-average
    (k=2), with an optional distillation arm per method."""
    if spec.k != 2 and "align" in methods:
        raise InvalidArg("align baseline is limited to k=2")
    specs = build_arch(spec.arch)
    train_ds, test_ds = build_dataset(spec.dataset)
    labels = list(methods) + ([f"{m}+distill" for m in methods] if kd else [])
    reports = {m: RunReport(spec.name, m, []) for m in labels}

    def one_seed(seed: int):
        bundle, member_accs = train_members(specs, train_ds, test_ds, spec.k, seed, spec.train)
        ens = ensemble_accuracy(bundle.members, test_ds)
        out = []
        for m in methods:
            t0 = time.perf_counter()
            fused = fuse(bundle, FusionPlan(method=m, finetune=spec.plan.finetune))
            rec = SeedRecord(seed=seed)
            rec.set_metric("ensemble_acc", ens)
            rec.set_metric("best_member_acc", max(member_accs))
            rec.set_metric("immediate_acc", evaluate(fused, test_ds)["accuracy"])
            ft_cfg = spec.plan.finetune.reseeded(seed * 1000 + 97)
            if ft_cfg.epochs > 0:
                _, history = train(fused, train_ds, test_ds, ft_cfg)
                rec.set_series("finetuned_acc", [r.test_accuracy for r in history.records])
            rec.wall_seconds = time.perf_counter() - t0
            out.append((m, rec))
            if kd is not None:
                t0 = time.perf_counter()
                kd_cfg = spec.plan.finetune.reseeded(seed * 1000 + 131)
                student, history = distill(fused, bundle, train_ds, test_ds, kd_cfg, kd)
                krec = SeedRecord(seed=seed)
                krec.set_metric("ensemble_acc", ens)
                krec.set_metric("best_member_acc", max(member_accs))
                krec.set_metric("immediate_acc", evaluate(fused, test_ds)["accuracy"])
                krec.set_series("finetuned_acc", [r.test_accuracy for r in history.records])
                krec.wall_seconds = time.perf_counter() - t0
                out.append((f"{m}+distill", krec))
        return out

    for per_seed in _map_seeds(one_seed, spec.seeds):
        for m, rec in per_seed:
            reports[m].records.append(rec)
    return [reports[m] for m in labels]


def _one_hidden_net(width: int, in_dim: int, classes: int, seed: int) -> Network:
    specs = [nw.linear(in_dim, width), nw.relu(), nw.linear(width, classes)]
    return init_network(specs, RngStream(seed, "cost-net"))


def measure_fusion_cost(widths, k: int = 2, in_dim: int = 512, classes: int = 10,
                        repeats: int = 3, methods=("avg", "nt", "align"),
                        align_width_cap: int = 1024, seed: int = 7) -> list[dict]:
    """Median fusion wall time and a peak-live-tensor-bytes estimate per
    (method, width) on one-hidden-layer ensembles.

    The estimate counts input models plus every tensor a method materializes
    (concatenation, norms, cost matrices, outputs); model bytes are reported
    separately. Alignment is skipped above `align_width_cap` where the cost
    matrix dominates (mirroring how transport-based fusion runs out of
    memory at scale).
    """
    from .fusion import align_average

    rows = []
    for width in widths:
        members = [_one_hidden_net(width, in_dim, classes, seed + j) for j in range(k)]
        bundle = EnsembleBundle(members, list(range(k)))
        model_bytes = sum(m.num_bytes() for m in members)
        for method in methods:
            if method == "align" and (width > align_width_cap or k != 2):
                continue
            times = []
            peak = 0
            for _ in range(repeats):
                t0 = time.perf_counter()
                if method == "avg":
                    fused = vanilla_average(bundle)
                    peak = model_bytes + fused.num_bytes()
                elif method == "nt":
                    big = concat_fuse(bundle)
                    fused = prune_to_architecture(big, members[0])
                    peak = model_bytes + big.num_bytes() + _norm_bytes(big) + fused.num_bytes()
                else:
                    fused = align_average(members[0], members[1])
                    cost_bytes = max(c.units ** 2 * 8 for c in nw.hidden_couplings(members[0]))
                    aligned_copy = members[1].num_bytes()
                    peak = model_bytes + cost_bytes + aligned_copy + fused.num_bytes()
                times.append(time.perf_counter() - t0)
            rows.append({
                "method": method,
                "width": int(width),
                "k": k,
                "seconds": float(np.median(times)),
                "peak_bytes": int(peak),
                "model_bytes": int(model_bytes),
            })
    return rows
