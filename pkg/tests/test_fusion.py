"""Fusion tests: concatenation equivalence, baselines, transplantation, and
reduction schemes.

The central check is the ensemble-average oracle: eval-mode forward of the
concatenated model must equal the uniform mean of member outputs.
"""

import numpy as np
import pytest

from ntfusion import network as nw
from ntfusion.errors import ArchMismatch, InvalidArg
from ntfusion.fusion import (
    EnsembleBundle,
    FusionPlan,
    align_average,
    concat_fuse,
    fuse,
    fuse_iterative,
    fuse_recursive,
    nt_fuse,
    transplant_fraction,
    vanilla_average,
)
from ntfusion.network import LayerKind, forward, init_network, permute_units
from ntfusion.tensor import RngStream, row_l2_norms

from oracles import rel_error


def mlp_specs(dims):
    specs = []
    for a, b in zip(dims[:-2], dims[1:-1]):
        specs += [nw.linear(a, b), nw.relu()]
    specs.append(nw.linear(dims[-2], dims[-1]))
    return specs


def convnet_specs():
    return [
        nw.conv(1, 3, 3, stride=1, padding=1),
        nw.batchnorm(3),
        nw.relu(),
        nw.maxpool(2),
        nw.conv(3, 4, 3, stride=1, padding=0),
        nw.relu(),
        nw.flatten(),
        nw.linear(4 * 2 * 2, 5),
    ]


def make_members(specs, k, seed, randomize_bn=False):
    members = []
    for j in range(k):
        net = init_network(specs, RngStream(seed, f"member-{j}"))
        if randomize_bn:
            rng = RngStream(seed, f"member-bn-{j}")
            for i, spec in enumerate(net.specs):
                if spec.kind is LayerKind.BATCHNORM2D:
                    c = spec.dims[0]
                    net.params[i]["weight"] = rng.uniform((c,), 0.5, 1.5)
                    net.params[i]["bias"] = rng.normal((c,), 0.2)
                    net.params[i]["running_mean"] = rng.normal((c,), 0.3)
                    net.params[i]["running_var"] = rng.uniform((c,), 0.5, 2.0)
        members.append(net)
    return EnsembleBundle(members, list(range(k)))


def mean_member_outputs(members, x):
    outs = np.stack([forward(m, x, "eval").astype(np.float64) for m in members])
    return outs.mean(axis=0)


class TestConcatFuse:
    def test_two_mlp_shapes_and_equivalence(self):
        bundle = make_members(mlp_specs([4, 3, 2]), 2, seed=1)
        fused = concat_fuse(bundle)
        assert fused.params[0]["weight"].shape == (6, 4)
        assert fused.params[-1]["weight"].shape == (2, 6)
        x = RngStream(2).normal((50, 4))
        assert rel_error(forward(fused, x, "eval"),
                         mean_member_outputs(bundle.members, x)) <= 1e-5

    def test_identical_copies_average_to_same_function(self):
        net = init_network(mlp_specs([5, 6, 4, 3]), RngStream(3, "m"))
        bundle = EnsembleBundle([net.clone(), net.clone(), net.clone()])
        fused = concat_fuse(bundle)
        x = RngStream(4).normal((20, 5))
        # Mean of identical terms; only float32 summation order differs.
        assert rel_error(forward(fused, x, "eval"), forward(net, x, "eval")) <= 1e-6

    def test_conv_bn_pool_equivalence(self):
        bundle = make_members(convnet_specs(), 2, seed=5, randomize_bn=True)
        fused = concat_fuse(bundle)
        x = RngStream(6).normal((50, 1, 8, 8))
        assert rel_error(forward(fused, x, "eval"),
                         mean_member_outputs(bundle.members, x)) <= 1e-5

    @pytest.mark.parametrize("k", [2, 3, 4, 8])
    def test_equivalence_over_k_mlp(self, k):
        bundle = make_members(mlp_specs([6, 8, 8, 4]), k, seed=7 + k)
        fused = concat_fuse(bundle)
        x = RngStream(8).normal((100, 6))
        assert rel_error(forward(fused, x, "eval"),
                         mean_member_outputs(bundle.members, x)) <= 1e-5

    def test_cross_weights_exactly_zero(self):
        k, fin, fout = 3, 5, 7
        bundle = make_members(mlp_specs([4, fin, fout, 2]), k, seed=9)
        fused = concat_fuse(bundle)
        w = fused.params[2]["weight"]  # interior linear
        assert w.shape == (k * fout, k * fin)
        for i in range(k):
            for j in range(k):
                block = w[i * fout : (i + 1) * fout, j * fin : (j + 1) * fin]
                if i == j:
                    np.testing.assert_array_equal(block, bundle.members[i].params[2]["weight"])
                else:
                    assert np.all(block == 0.0)

    def test_interior_parameter_growth(self):
        k = 4
        bundle = make_members(mlp_specs([4, 6, 6, 2]), k, seed=10)
        fused = concat_fuse(bundle)
        member_interior = bundle.members[0].params[2]["weight"].size
        assert fused.params[2]["weight"].size == k * k * member_interior
        assert fused.params[2]["bias"].size == k * 6

    def test_head_is_scaled_concat_and_mean_bias(self):
        bundle = make_members(mlp_specs([4, 3, 2]), 2, seed=11)
        fused = concat_fuse(bundle)
        w0 = bundle.members[0].params[-1]["weight"]
        w1 = bundle.members[1].params[-1]["weight"]
        np.testing.assert_allclose(fused.params[-1]["weight"],
                                   np.concatenate([w0, w1], axis=1) / 2.0, rtol=1e-7)
        np.testing.assert_allclose(
            fused.params[-1]["bias"],
            (bundle.members[0].params[-1]["bias"] + bundle.members[1].params[-1]["bias"]) / 2.0,
            rtol=1e-7)

    def test_bn_params_concatenated_verbatim(self):
        bundle = make_members(convnet_specs(), 2, seed=12, randomize_bn=True)
        fused = concat_fuse(bundle)
        for key in ("weight", "bias", "running_mean", "running_var"):
            np.testing.assert_array_equal(
                fused.params[1][key],
                np.concatenate([m.params[1][key] for m in bundle.members]))

    def test_origins_label_members(self):
        bundle = make_members(mlp_specs([4, 3, 3, 2]), 2, seed=13)
        fused = concat_fuse(bundle)
        np.testing.assert_array_equal(fused.origins[0], [0, 0, 0, 1, 1, 1])
        np.testing.assert_array_equal(fused.origins[2], [0, 0, 0, 1, 1, 1])

    def test_arch_mismatch_rejected(self):
        a = init_network(mlp_specs([4, 3, 2]), RngStream(14, "a"))
        b = init_network(mlp_specs([4, 5, 2]), RngStream(14, "b"))
        with pytest.raises(ArchMismatch):
            EnsembleBundle([a, b])

    def test_k1_rejected(self):
        net = init_network(mlp_specs([4, 3, 2]), RngStream(15, "a"))
        with pytest.raises(InvalidArg):
            concat_fuse(EnsembleBundle([net]))


class TestVanillaAverage:
    def test_self_average_identity(self):
        net = init_network(mlp_specs([4, 3, 2]), RngStream(16, "a"))
        out = vanilla_average(EnsembleBundle([net.clone(), net.clone()]))
        for a, b in zip(out.params, net.params):
            for key in a:
                np.testing.assert_array_equal(a[key], b[key])

    def test_opposite_weights_cancel(self):
        net = init_network(mlp_specs([4, 3, 2]), RngStream(17, "a"))
        neg = net.clone()
        for p in neg.params:
            for key in p:
                p[key] = -p[key]
        out = vanilla_average(EnsembleBundle([net, neg]))
        for p in out.params:
            for key in p:
                np.testing.assert_array_equal(p[key], np.zeros_like(p[key]))

    def test_matches_elementwise_loop_oracle(self):
        bundle = make_members(convnet_specs(), 3, seed=18, randomize_bn=True)
        out = vanilla_average(bundle)
        for li in range(len(out.params)):
            for key in out.params[li]:
                acc = bundle.members[0].params[li][key].copy()
                acc += bundle.members[1].params[li][key]
                acc += bundle.members[2].params[li][key]
                np.testing.assert_array_equal(out.params[li][key],
                                              acc * np.float32(1.0 / 3.0))


class TestAlignAverage:
    def test_permuted_copy_recovered_exactly(self):
        net = init_network(mlp_specs([5, 8, 6, 3]), RngStream(19, "a"))
        permuted = permute_units(net, 0, RngStream(20).permutation(8))
        permuted = permute_units(permuted, 2, RngStream(21).permutation(6))
        out = align_average(net, permuted)
        for a, b in zip(out.params, net.params):
            for key in a:
                np.testing.assert_array_equal(a[key], b[key])

    def test_self_alignment_identity(self):
        net = init_network(mlp_specs([5, 8, 3]), RngStream(22, "a"))
        out = align_average(net, net.clone())
        for a, b in zip(out.params, net.params):
            for key in a:
                np.testing.assert_array_equal(a[key], b[key])

    def test_alignment_beats_identity_matching(self):
        a = init_network(mlp_specs([5, 10, 3]), RngStream(23, "a"))
        b = init_network(mlp_specs([5, 10, 3]), RngStream(24, "b"))
        out = align_average(a, b)
        # Recover the aligned rows: aligned = 2*avg - a.
        aligned_rows = 2.0 * out.params[0]["weight"].astype(np.float64) \
            - a.params[0]["weight"].astype(np.float64)
        rows_a = a.params[0]["weight"].astype(np.float64)
        rows_b = b.params[0]["weight"].astype(np.float64)
        matched = ((rows_a - aligned_rows) ** 2).sum()
        identity = ((rows_a - rows_b) ** 2).sum()
        assert matched <= identity + 1e-9

    def test_conv_alignment_recovers_permutation(self):
        net = make_members(convnet_specs(), 1, seed=25, randomize_bn=True).members[0]
        permuted = permute_units(net, 0, RngStream(26).permutation(3))
        permuted = permute_units(permuted, 4, RngStream(27).permutation(4))
        out = align_average(net, permuted)
        x = RngStream(28).normal((10, 1, 8, 8))
        assert rel_error(forward(out, x, "eval"), forward(net, x, "eval")) <= 1e-6


class TestTransplantFraction:
    def test_p_zero_is_identity(self):
        a = init_network(mlp_specs([4, 6, 6, 3]), RngStream(29, "a"))
        b = init_network(mlp_specs([4, 6, 6, 3]), RngStream(30, "b"))
        out = transplant_fraction(a, b, 0.0)
        for pa, pb in zip(out.params, a.params):
            for key in pa:
                np.testing.assert_array_equal(pa[key], pb[key])

    def test_p_one_with_head_copies_donor(self):
        a = init_network(mlp_specs([4, 6, 6, 3]), RngStream(31, "a"))
        b = init_network(mlp_specs([4, 6, 6, 3]), RngStream(32, "b"))
        out = transplant_fraction(a, b, 1.0, copy_head=True)
        for pa, pb in zip(out.params, b.params):
            for key in pa:
                np.testing.assert_array_equal(pa[key], pb[key])

    def test_p_one_without_head_keeps_recipient_head(self):
        a = init_network(mlp_specs([4, 6, 3]), RngStream(33, "a"))
        b = init_network(mlp_specs([4, 6, 3]), RngStream(34, "b"))
        out = transplant_fraction(a, b, 1.0)
        np.testing.assert_array_equal(out.params[0]["weight"], b.params[0]["weight"])
        np.testing.assert_array_equal(out.params[-1]["bias"], a.params[-1]["bias"])

    def test_half_transplant_takes_strongest_donor_units(self):
        a = init_network(mlp_specs([4, 6, 3]), RngStream(35, "a"))
        b = init_network(mlp_specs([4, 6, 3]), RngStream(36, "b"))
        out = transplant_fraction(a, b, 0.5)
        norms_a = row_l2_norms(a.params[0]["weight"], a.params[0]["bias"])
        norms_b = row_l2_norms(b.params[0]["weight"], b.params[0]["bias"])
        slots = np.sort(np.argsort(norms_a)[:3])
        donors = np.sort(np.argsort(-norms_b)[:3])
        np.testing.assert_array_equal(out.params[0]["weight"][slots],
                                      b.params[0]["weight"][donors])
        keep = np.setdiff1d(np.arange(6), slots)
        np.testing.assert_array_equal(out.params[0]["weight"][keep],
                                      a.params[0]["weight"][keep])

    def test_invalid_fraction(self):
        a = init_network(mlp_specs([4, 6, 3]), RngStream(37, "a"))
        with pytest.raises(InvalidArg):
            transplant_fraction(a, a.clone(), 1.5)


def pairwise_nt_oracle(a, b, n_keep):
    """Independent simulation of concat + prune-to-width for one-hidden-layer
    nets given as (w1, b1, head_w, head_b) tuples.

    On a duplicate pair the norms tie, so the keep rule (norm desc, member
    asc, index asc) keeps BOTH copies of the strongest half rather than one
    copy of every unit.
    """
    w1 = np.concatenate([a[0], b[0]], axis=0)
    b1 = np.concatenate([a[1], b[1]])
    head_w = np.concatenate([a[2], b[2]], axis=1) / np.float32(2.0)
    head_b = (a[3] + b[3]) / np.float32(2.0)
    norms = np.sqrt((w1.astype(np.float64) ** 2).sum(axis=1) + b1.astype(np.float64) ** 2)
    member = np.repeat([0, 1], [len(a[1]), len(b[1])])
    order = np.lexsort((np.arange(len(norms)), member, -norms))
    keep = np.sort(order[:n_keep])
    return (w1[keep], b1[keep], np.ascontiguousarray(head_w[:, keep]), head_b)


class TestReductionSchemes:
    def setup_method(self):
        self.specs = mlp_specs([5, 8, 3])

    def bundle_of(self, k, seed):
        return make_members(self.specs, k, seed)

    def test_iterative_k2_equals_joint(self):
        bundle = self.bundle_of(2, 38)
        it = fuse_iterative(bundle)
        joint = nt_fuse(bundle)
        for a, b in zip(it.params, joint.params):
            for key in a:
                np.testing.assert_array_equal(a[key], b[key])

    def test_recursive_k2_equals_joint(self):
        bundle = self.bundle_of(2, 39)
        rec = fuse_recursive(bundle)
        joint = nt_fuse(bundle)
        for a, b in zip(rec.params, joint.params):
            for key in a:
                np.testing.assert_array_equal(a[key], b[key])

    def test_iterative_duplicates_match_simulation_oracle(self):
        net = init_network(self.specs, RngStream(40, "m"))
        m = (net.params[0]["weight"], net.params[0]["bias"],
             net.params[2]["weight"], net.params[2]["bias"])
        r = m
        for _ in range(3):  # fold M in three more times: k=4 identical copies
            r = pairwise_nt_oracle(r, m, n_keep=len(m[1]))
        bundle = EnsembleBundle([net.clone() for _ in range(4)])
        got = fuse_iterative(bundle)
        np.testing.assert_array_equal(got.params[0]["weight"], r[0])
        np.testing.assert_array_equal(got.params[0]["bias"], r[1])
        np.testing.assert_allclose(got.params[2]["weight"], r[2], rtol=1e-6)
        # Pruning a self-fusion is NOT the identity: the weak half is gone.
        x = RngStream(41).normal((20, 5))
        assert rel_error(forward(got, x), forward(net, x)) > 1e-4

    def test_recursive_duplicates_match_simulation_oracle(self):
        net = init_network(self.specs, RngStream(42, "m"))
        m = (net.params[0]["weight"], net.params[0]["bias"],
             net.params[2]["weight"], net.params[2]["bias"])
        # Balanced tree over 4 copies: both halves reduce to the same D1.
        d1 = pairwise_nt_oracle(m, m, n_keep=len(m[1]))
        r = pairwise_nt_oracle(d1, d1, n_keep=len(m[1]))
        bundle = EnsembleBundle([net.clone() for _ in range(4)])
        got = fuse_recursive(bundle)
        np.testing.assert_array_equal(got.params[0]["weight"], r[0])
        np.testing.assert_allclose(got.params[2]["weight"], r[2], rtol=1e-6)

    def test_recursive_odd_k_left_heavy(self):
        bundle = self.bundle_of(3, 43)
        out = fuse_recursive(bundle)
        assert out.arch_id == bundle.arch_id

    def test_iterative_weights_last_member_most(self):
        bundle = self.bundle_of(3, 44)
        out = fuse_iterative(bundle)
        assert out.arch_id == bundle.arch_id

    def test_fuse_dispatch(self):
        bundle = self.bundle_of(2, 45)
        for method in ("nt", "nt_iterative", "nt_recursive", "avg", "align"):
            out = fuse(bundle, FusionPlan(method=method))
            assert out.arch_id == bundle.arch_id
