"""Structured magnitude pruning: rank units by L2 norm and rebuild a
genuinely smaller network, removing each unit's row/filter, bias, BN channel,
and downstream input slice together."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ArchIncompatible, EmptyLayer, InvalidArg
from .network import (
    LayerCoupling,
    LayerKind,
    LayerSpec,
    Network,
    UNIT_KINDS,
    check_specs,
    hidden_couplings,
)
from .tensor import row_l2_norms


@dataclass(frozen=True)
class PruneGroup:
    """One hidden unit with its saliency and (if known) ensemble origin."""

    layer_index: int
    unit_index: int
    norm: float
    origin_member: Optional[int]
    origin_index: int


@dataclass(frozen=True)
class KeepPolicy:
    """How many units survive per layer.

    sparsity s keeps N - floor(s*N) (never below 1); keep_counts pins each
    hidden layer; per_member quotas keep the top-q_j units of each ensemble
    member and need origin labels on the network.
    """

    mode: str
    value: float = 0.0
    counts: tuple[int, ...] = ()
    quotas: tuple[int, ...] = ()

    @staticmethod
    def sparsity(s: float) -> "KeepPolicy":
        if not 0.0 <= s < 1.0:
            raise InvalidArg("sparsity must be in [0, 1)")
        return KeepPolicy("sparsity", value=s)

    @staticmethod
    def keep_counts(counts) -> "KeepPolicy":
        return KeepPolicy("keep_counts", counts=tuple(int(c) for c in counts))

    @staticmethod
    def per_member(quotas) -> "KeepPolicy":
        return KeepPolicy("per_member", quotas=tuple(int(q) for q in quotas))


def _origin_indices(origins: np.ndarray) -> np.ndarray:
    """Rank of each unit within its own member (order-preserving cumcount)."""
    out = np.zeros(len(origins), dtype=np.int64)
    seen: dict[int, int] = {}
    for u, m in enumerate(origins.tolist()):
        out[u] = seen.get(m, 0)
        seen[m] = out[u] + 1
    return out


def build_prune_groups(net: Network, include_bias: bool = True) -> dict[int, list[PruneGroup]]:
    """Wrap every hidden unit with its L2 norm; the output layer is excluded."""
    groups: dict[int, list[PruneGroup]] = {}
    for c in hidden_couplings(net):
        p = net.params[c.layer]
        norms = row_l2_norms(p["weight"], p["bias"], include_bias=include_bias)
        origins = net.origins.get(c.layer) if net.origins else None
        within = _origin_indices(origins) if origins is not None else np.arange(c.units)
        groups[c.layer] = [
            PruneGroup(
                layer_index=c.layer,
                unit_index=u,
                norm=float(norms[u]),
                origin_member=int(origins[u]) if origins is not None else None,
                origin_index=int(within[u]),
            )
            for u in range(c.units)
        ]
    return groups


def _ranked_order(norms: np.ndarray, origins: Optional[np.ndarray]) -> np.ndarray:
    """Unit indices by norm descending; ties by member then index ascending."""
    idx = np.arange(len(norms))
    member = origins if origins is not None else np.zeros(len(norms), dtype=np.int64)
    return np.lexsort((idx, member, -norms.astype(np.float64)))


def _resolve_keep(policy: KeepPolicy, couplings: list[LayerCoupling],
                  net: Network, include_bias: bool) -> list[np.ndarray]:
    """Kept (sorted ascending) unit indices per hidden layer."""
    kept: list[np.ndarray] = []
    if policy.mode == "keep_counts" and len(policy.counts) != len(couplings):
        raise InvalidArg(f"need {len(couplings)} keep counts, got {len(policy.counts)}")
    for pos, c in enumerate(couplings):
        p = net.params[c.layer]
        norms = row_l2_norms(p["weight"], p["bias"], include_bias=include_bias)
        origins = net.origins.get(c.layer) if net.origins else None
        if policy.mode == "per_member":
            if origins is None:
                raise InvalidArg("per-member quotas need origin labels (fuse first)")
            if len(policy.quotas) != int(origins.max()) + 1:
                raise InvalidArg("one quota per ensemble member required")
            chosen = []
            for j, quota in enumerate(policy.quotas):
                mine = np.flatnonzero(origins == j)
                if quota > len(mine):
                    raise InvalidArg(f"quota {quota} exceeds member {j} width {len(mine)}")
                order = mine[np.lexsort((mine, -norms[mine].astype(np.float64)))]
                chosen.append(order[:quota])
            keep_idx = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64)
        else:
            if policy.mode == "sparsity":
                keep = max(1, c.units - math.floor(policy.value * c.units))
            else:
                keep = policy.counts[pos]
                if keep > c.units:
                    raise InvalidArg(f"keep count {keep} exceeds layer width {c.units}")
            if keep < 1:
                raise EmptyLayer(f"layer {c.layer} would keep {keep} units")
            keep_idx = np.sort(_ranked_order(norms, origins)[:keep])
        if len(keep_idx) < 1:
            raise EmptyLayer(f"layer {c.layer} would be emptied")
        kept.append(keep_idx)
    return kept


def magnitude_prune(net: Network, policy: KeepPolicy, include_bias: bool = True) -> Network:
    """Keep the top units per hidden layer by incoming L2 norm (bias included
    by default; ties broken by origin member then index) and rebuild a
    smaller network.

    Surviving parameters are bit-identical and keep their relative order.
    """
    couplings = hidden_couplings(net)
    kept = _resolve_keep(policy, couplings, net, include_bias)
    out = net.clone()
    for c, keep_idx in zip(couplings, kept):
        p = out.params[c.layer]
        p["weight"] = np.ascontiguousarray(p["weight"][keep_idx])
        p["bias"] = np.ascontiguousarray(p["bias"][keep_idx])
        spec = out.specs[c.layer]
        if spec.kind is LayerKind.LINEAR:
            out.specs[c.layer] = LayerSpec(spec.kind, (spec.dims[0], len(keep_idx)))
        else:
            d = spec.dims
            out.specs[c.layer] = LayerSpec(spec.kind, (d[0], len(keep_idx), *d[2:]))
        for bi in c.bn_layers:
            out.params[bi] = {k: np.ascontiguousarray(v[keep_idx])
                              for k, v in out.params[bi].items()}
            out.specs[bi] = LayerSpec(LayerKind.BATCHNORM2D, (len(keep_idx),))
        nxt = out.params[c.next_layer]
        nspec = out.specs[c.next_layer]
        if c.mode == "columns":
            cols = np.concatenate(
                [np.arange(u * c.block, (u + 1) * c.block) for u in keep_idx])
            nxt["weight"] = np.ascontiguousarray(nxt["weight"][:, cols])
            out.specs[c.next_layer] = LayerSpec(
                nspec.kind, (len(cols), nspec.dims[1]))
        else:
            nxt["weight"] = np.ascontiguousarray(nxt["weight"][:, keep_idx, :, :])
            d = nspec.dims
            out.specs[c.next_layer] = LayerSpec(nspec.kind, (len(keep_idx), *d[1:]))
        if out.origins is not None and c.layer in out.origins:
            out.origins[c.layer] = out.origins[c.layer][keep_idx]
    check_specs(out.specs)
    return out


def prune_to_architecture(big: Network, reference: Network) -> Network:
    """Prune `big` down to the reference's hidden widths.

    Layer kinds, kernel geometry, and head width must already agree; only
    unit counts may differ (and never upward).
    """
    if len(big.specs) != len(reference.specs):
        raise ArchIncompatible("layer counts differ")
    for bs, rs in zip(big.specs, reference.specs):
        if bs.kind is not rs.kind:
            raise ArchIncompatible(f"layer kinds differ: {bs.kind} vs {rs.kind}")
        if bs.kind is LayerKind.CONV2D and bs.dims[2:] != rs.dims[2:]:
            raise ArchIncompatible("conv kernel/stride/padding differ")
        if bs.kind is LayerKind.MAXPOOL2D and bs.dims != rs.dims:
            raise ArchIncompatible("pool windows differ")
    big_couplings = hidden_couplings(big)
    ref_couplings = hidden_couplings(reference)
    counts = []
    for bc, rc in zip(big_couplings, ref_couplings):
        if bc.units < rc.units:
            raise ArchIncompatible(
                f"layer {bc.layer}: cannot grow {bc.units} units to {rc.units}")
        counts.append(rc.units)
    pruned = magnitude_prune(big, KeepPolicy.keep_counts(counts))
    if pruned.arch_id != reference.arch_id:
        raise ArchIncompatible("pruned architecture does not match the reference")
    return pruned
