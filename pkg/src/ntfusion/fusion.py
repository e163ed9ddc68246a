"""Ensemble fusion: layer-wise concatenation, averaging baselines, neuron
transplantation between two models, and pairwise reduction schemes.

The central construction is `concat_fuse`: stack every non-output layer of
the k members and average the classification heads, with all cross-member
("cross") weights of interior layers set to zero. In eval mode the fused
network computes exactly the uniform mean of the member outputs, which makes
it the starting point for prune-based fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ArchMismatch, InvalidArg, UnsupportedTopology
from .network import (
    LayerKind,
    LayerSpec,
    Network,
    UNIT_KINDS,
    check_specs,
    hidden_couplings,
    permute_units,
)
from .tensor import row_l2_norms


@dataclass
class EnsembleBundle:
    """k trained networks of identical architecture plus their seeds."""

    members: list[Network]
    member_seeds: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.members:
            raise InvalidArg("bundle needs at least one member")
        ids = {m.arch_id for m in self.members}
        if len(ids) != 1:
            raise ArchMismatch(f"members disagree on architecture: {sorted(ids)}")
        if not self.member_seeds:
            self.member_seeds = list(range(len(self.members)))

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def arch_id(self) -> str:
        return self.members[0].arch_id


@dataclass(frozen=True)
class FusionPlan:
    """Declarative description of a fusion run.

    sparsity None means the architecture-restoring default 1 - 1/k.
    """

    method: str = "nt"  # nt | nt_iterative | nt_recursive | avg | align
    sparsity: Optional[float] = None
    pipeline: str = "merge_prune_ft"  # prune_merge_ft | merge_prune_ft | merge_ft_prune_ft
    finetune: Optional[object] = None  # TrainConfig

    def __post_init__(self) -> None:
        if self.method not in ("nt", "nt_iterative", "nt_recursive", "avg", "align"):
            raise InvalidArg(f"unknown fusion method {self.method!r}")
        if self.pipeline not in ("prune_merge_ft", "merge_prune_ft", "merge_ft_prune_ft"):
            raise InvalidArg(f"unknown pipeline {self.pipeline!r}")
        if self.sparsity is not None and not 0.0 <= self.sparsity < 1.0:
            raise InvalidArg("sparsity must be in [0, 1)")


def _require_fusable(bundle: EnsembleBundle) -> None:
    if bundle.k < 2:
        raise InvalidArg("fusion needs k >= 2 members")
    check_specs(bundle.members[0].specs)


def concat_fuse(bundle: EnsembleBundle) -> Network:
    """Concatenate non-output layers of all members; average the heads.

    Shapes per member layer kind, with k members:
      input-connected Linear (m x n)  -> (k*m x n), rows stacked
      interior Linear       (m x n)   -> (k*m x k*n), member blocks on the
                                         diagonal, cross weights zero
      output Linear         (m x n)   -> (m x k*n) = (1/k) * [W1 | ... | Wk],
                                         bias = mean of member biases
      Conv2D analogously over channels; BatchNorm2D parameters and running
      statistics are plain concatenations. Pool/Flatten/ReLU pass through.

    The result carries `origins` labelling every hidden unit with its member.
    """
    _require_fusable(bundle)
    members = bundle.members
    k = bundle.k
    specs = members[0].specs
    param_idx = [i for i, s in enumerate(specs) if s.kind in UNIT_KINDS]
    head = param_idx[-1]
    first = param_idx[0]

    fused_specs: list[LayerSpec] = []
    fused_params: list[dict] = []
    origins: dict[int, np.ndarray] = {}
    for i, spec in enumerate(specs):
        mats = [m.params[i] for m in members]
        if spec.kind is LayerKind.LINEAR:
            fin, fout = spec.dims
            if i == head:
                if i == first:
                    # Degenerate head-only chain: output averaging over the
                    # shared input is a plain parameter average.
                    w = mats[0]["weight"].copy()
                    for p in mats[1:]:
                        w += p["weight"]
                    w /= np.float32(k)
                    new_spec = LayerSpec(LayerKind.LINEAR, (fin, fout))
                else:
                    w = np.concatenate([p["weight"] for p in mats], axis=1) / np.float32(k)
                    new_spec = LayerSpec(LayerKind.LINEAR, (k * fin, fout))
                b = mats[0]["bias"].copy()
                for p in mats[1:]:
                    b += p["bias"]
                b /= np.float32(k)
            elif i == first:
                w = np.concatenate([p["weight"] for p in mats], axis=0)
                b = np.concatenate([p["bias"] for p in mats])
                new_spec = LayerSpec(LayerKind.LINEAR, (fin, k * fout))
                origins[i] = np.repeat(np.arange(k), fout)
            else:
                w = np.zeros((k * fout, k * fin), dtype=np.float32)
                for j, p in enumerate(mats):
                    w[j * fout : (j + 1) * fout, j * fin : (j + 1) * fin] = p["weight"]
                b = np.concatenate([p["bias"] for p in mats])
                new_spec = LayerSpec(LayerKind.LINEAR, (k * fin, k * fout))
                origins[i] = np.repeat(np.arange(k), fout)
            fused_params.append({"weight": np.ascontiguousarray(w), "bias": np.ascontiguousarray(b)})
            fused_specs.append(new_spec)
        elif spec.kind is LayerKind.CONV2D:
            cin, cout, kh, kw, stride, padding = spec.dims
            if i == first:
                w = np.concatenate([p["weight"] for p in mats], axis=0)
                new_spec = LayerSpec(LayerKind.CONV2D, (cin, k * cout, kh, kw, stride, padding))
            else:
                w = np.zeros((k * cout, k * cin, kh, kw), dtype=np.float32)
                for j, p in enumerate(mats):
                    w[j * cout : (j + 1) * cout, j * cin : (j + 1) * cin] = p["weight"]
                new_spec = LayerSpec(LayerKind.CONV2D, (k * cin, k * cout, kh, kw, stride, padding))
            b = np.concatenate([p["bias"] for p in mats])
            origins[i] = np.repeat(np.arange(k), cout)
            fused_params.append({"weight": np.ascontiguousarray(w), "bias": np.ascontiguousarray(b)})
            fused_specs.append(new_spec)
        elif spec.kind is LayerKind.BATCHNORM2D:
            fused_params.append(
                {key: np.concatenate([p[key] for p in mats]) for key in mats[0]})
            fused_specs.append(LayerSpec(LayerKind.BATCHNORM2D, (k * spec.dims[0],)))
        else:
            fused_params.append({})
            fused_specs.append(spec)
    fused = Network(fused_specs, fused_params, origins or None)
    check_specs(fused.specs)
    return fused


def vanilla_average(bundle: EnsembleBundle) -> Network:
    """Uniform elementwise mean of every parameter tensor, running stats
    included. Accumulation runs in member order for reproducibility."""
    if bundle.k < 1:
        raise InvalidArg("empty bundle")
    out = bundle.members[0].clone()
    out.origins = None
    scale = np.float32(1.0 / bundle.k)
    for i, p in enumerate(out.params):
        for key in p:
            acc = p[key]
            for m in bundle.members[1:]:
                acc += m.params[i][key]
            acc *= scale
    return out


def _unit_rows(net: Network, coupling) -> np.ndarray:
    return net.params[coupling.layer]["weight"].reshape(coupling.units, -1)


def align_average(a: Network, b: Network) -> Network:
    """Permute b's units layer by layer to best match a, then average.

    Matching minimizes the total squared distance between incoming weight
    rows (with the previous layer's permutation already applied to b's input
    side) using an exact balanced assignment. A simplified stand-in for
    transport-based alignment baselines.
    """
    if a.arch_id != b.arch_id:
        raise ArchMismatch("align_average needs identical architectures")
    aligned = b
    for coupling in hidden_couplings(a):
        rows_a = _unit_rows(a, coupling).astype(np.float64)
        rows_b = _unit_rows(aligned, coupling).astype(np.float64)
        sq_a = (rows_a * rows_a).sum(axis=1)[:, None]
        sq_b = (rows_b * rows_b).sum(axis=1)[None, :]
        cost = sq_a + sq_b - 2.0 * rows_a @ rows_b.T
        _, order = linear_sum_assignment(cost)
        aligned = permute_units(aligned, coupling.layer, order)
    return vanilla_average(EnsembleBundle([a, aligned]))


def transplant_fraction(recipient: Network, donor: Network, p: float,
                        copy_head: bool = False) -> Network:
    """Replace the weakest round(p*N) units per non-output layer of the
    recipient with the donor's strongest round(p*N) units.

    A transplanted slot receives the donor unit's incoming row, bias, and BN
    channel, and the donor's outgoing column in the next layer. Slots and
    donor units are paired in ascending index order, so p=1 reproduces the
    donor exactly (head included when copy_head is set); p=0 is the identity.
    """
    if recipient.arch_id != donor.arch_id:
        raise ArchMismatch("transplant needs identical architectures")
    if not 0.0 <= p <= 1.0:
        raise InvalidArg("p must be in [0, 1]")
    out = recipient.clone()
    out.origins = None
    couplings = hidden_couplings(recipient)
    moves = []  # (coupling, slots, donor_units)
    for c in couplings:
        t = int(round(p * c.units))
        if t == 0:
            continue
        norms_r = row_l2_norms(recipient.params[c.layer]["weight"],
                               recipient.params[c.layer]["bias"])
        norms_d = row_l2_norms(donor.params[c.layer]["weight"],
                               donor.params[c.layer]["bias"])
        slots = np.sort(np.lexsort((np.arange(c.units), norms_r))[:t])
        donors = np.sort(np.lexsort((np.arange(c.units), -norms_d))[:t])
        moves.append((c, slots, donors))
    for c, slots, donors in moves:  # incoming rows, biases, BN channels
        dst, src = out.params[c.layer], donor.params[c.layer]
        dst["weight"][slots] = src["weight"][donors]
        dst["bias"][slots] = src["bias"][donors]
        for bi in c.bn_layers:
            for key in out.params[bi]:
                out.params[bi][key][slots] = donor.params[bi][key][donors]
    for c, slots, donors in moves:  # outgoing slices in the next layer
        dst, src = out.params[c.next_layer], donor.params[c.next_layer]
        if c.mode == "columns":
            dcols = np.concatenate([np.arange(u * c.block, (u + 1) * c.block) for u in slots])
            scols = np.concatenate([np.arange(u * c.block, (u + 1) * c.block) for u in donors])
            dst["weight"][:, dcols] = src["weight"][:, scols]
        else:
            dst["weight"][:, slots, :, :] = src["weight"][:, donors, :, :]
    if copy_head:
        head = len(recipient.specs) - 1
        out.params[head] = {k: v.copy() for k, v in donor.params[head].items()}
    return out


def nt_fuse(bundle: EnsembleBundle, sparsity: Optional[float] = None) -> Network:
    """Joint neuron transplantation: concatenate, then prune the lowest-norm
    units back down (default to one member's architecture)."""
    from .pruning import KeepPolicy, magnitude_prune, prune_to_architecture

    _require_fusable(bundle)
    big = concat_fuse(bundle)
    if sparsity is None:
        return prune_to_architecture(big, bundle.members[0])
    return magnitude_prune(big, KeepPolicy.sparsity(sparsity))


def _pairwise_reduce(a: Network, b: Network, reference: Network) -> Network:
    from .pruning import prune_to_architecture

    big = concat_fuse(EnsembleBundle([a, b]))
    return prune_to_architecture(big, reference)


def fuse_iterative(bundle: EnsembleBundle, plan: Optional[FusionPlan] = None) -> Network:
    """Fold members left to right with pairwise concat + prune-to-half.

    Later members end up weighted more heavily in the surviving head (the
    last one at 1/2), so the fold order matters and is the bundle order.
    Only two concatenated models are alive at any point.
    """
    _require_fusable(bundle)
    reference = bundle.members[0]
    result = bundle.members[0]
    for nxt in bundle.members[1:]:
        result = _pairwise_reduce(result, nxt, reference)
    return result


def fuse_recursive(bundle: EnsembleBundle, plan: Optional[FusionPlan] = None) -> Network:
    """Balanced binary reduction of pairwise concat + prune-to-half steps.

    Non-power-of-two k splits left-heavy (ceil(k/2) | floor(k/2)).
    """
    _require_fusable(bundle)
    reference = bundle.members[0]

    def reduce(ms: Sequence[Network]) -> Network:
        if len(ms) == 1:
            return ms[0]
        mid = math.ceil(len(ms) / 2)
        return _pairwise_reduce(reduce(ms[:mid]), reduce(ms[mid:]), reference)

    return reduce(bundle.members)


def fuse(bundle: EnsembleBundle, plan: FusionPlan) -> Network:
    """Dispatch on plan.method; `align` requires exactly two members."""
    if plan.method == "nt":
        return nt_fuse(bundle, plan.sparsity)
    if plan.method == "nt_iterative":
        return fuse_iterative(bundle, plan)
    if plan.method == "nt_recursive":
        return fuse_recursive(bundle, plan)
    if plan.method == "avg":
        return vanilla_average(bundle)
    if bundle.k != 2:
        raise InvalidArg("align fusion is defined for exactly two members")
    return align_average(bundle.members[0], bundle.members[1])
