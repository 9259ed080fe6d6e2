from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from conftest import make_sequence
from gaitlab import autograd as ag
from gaitlab.autograd import Tensor, grad_check
from gaitlab.errors import EmptyClass, ShapeMismatch
from gaitlab.fusion import (
    BackboneConfig,
    HeadParams,
    StubBackbone,
    StubVisualEncoder,
    VisualStubConfig,
    class_weights,
    concat_final,
    embed_tokens,
    fuse_and_encode,
    weighted_ce,
    zero_descriptor,
)
from gaitlab.util import rng_for

D = 16
BACKBONE = StubBackbone(BackboneConfig(D=D, seed=0))


def _v(t=6, seed=0):
    return rng_for("fusion-v", seed).normal(size=(t, D))


class TestEmbedTokens:
    def test_empty_token_list(self):
        e = embed_tokens([], D, seed=0)
        assert e.data.shape == (0, D)

    def test_identical_tokens_share_rows(self):
        e = embed_tokens(["flex=41°", "tilt=9°", "flex=41°"], D, seed=0)
        assert np.array_equal(e.data[0], e.data[2])
        assert not np.array_equal(e.data[0], e.data[1])

    def test_seed_changes_embeddings(self):
        a = embed_tokens(["flex=41°"], D, seed=0)
        b = embed_tokens(["flex=41°"], D, seed=1)
        assert np.max(np.abs(a.data - b.data)) > 0.0

    def test_deterministic_across_calls(self):
        a = embed_tokens(["a", "b"], D, seed=3)
        b = embed_tokens(["a", "b"], D, seed=3)
        assert np.array_equal(a.data, b.data)


class TestFuseAndEncode:
    def test_pooling_covers_only_visual_rows(self):
        v = _v(6)
        f_with = fuse_and_encode(v, embed_tokens(["x", "y", "z"], D, 0), BACKBONE)
        # degenerate case: no tokens -> pool over the encoded visual rows alone
        f_alone = fuse_and_encode(v, np.zeros((0, D)), BACKBONE)
        expected = BACKBONE.encode(Tensor(v)).data.mean(axis=0)
        assert np.allclose(f_alone.data, expected, atol=1e-12)
        assert f_with.data.shape == (D,)

    def test_token_change_propagates_into_visual_pool(self):
        v = _v(6, seed=2)
        a = fuse_and_encode(v, embed_tokens(["tilt=9°", "flex=40°"], D, 0), BACKBONE)
        b = fuse_and_encode(v, embed_tokens(["tilt=9°", "flex=41°"], D, 0), BACKBONE)
        assert np.max(np.abs(a.data - b.data)) > 1e-9

    def test_row_count_contract(self):
        v = _v(4, seed=3)
        e = embed_tokens(list("abcde"), D, 0)
        z = ag.concat_rows([Tensor(v), e])
        assert z.data.shape == (4 + 5, D)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatch):
            fuse_and_encode(_v(4), np.ones((3, D + 1)), BACKBONE)


class TestConcatFinal:
    def test_order_and_length(self):
        a, b = np.arange(4.0), np.arange(4.0) + 10
        out = concat_final(a, b)
        assert np.array_equal(out.data, np.concatenate([a, b]))

    def test_ablated_branch_is_zero_half(self):
        f_vlm = np.arange(4.0)
        out = concat_final(f_vlm, zero_descriptor(4))
        assert np.array_equal(out.data[4:], np.zeros(4))
        assert np.array_equal(out.data[:4], f_vlm)

    def test_swapping_halves_changes_logits(self):
        head = HeadParams.init(K=5, D=4, seed=1)
        a, b = rng_for("cf", 1).normal(size=4), rng_for("cf", 2).normal(size=4)
        la = head.logits(concat_final(a, b)).data
        lb = head.logits(concat_final(b, a)).data
        assert np.max(np.abs(la - lb)) > 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            concat_final(np.ones(4), np.ones(5))


class TestClassWeights:
    def test_two_class_example(self):
        cw = class_weights([8, 2])
        assert cw.w == (10 / (2 * 8), 10 / (2 * 2))
        assert cw.w == (0.625, 2.5)

    def test_balanced_counts_give_unit_weights(self):
        cw = class_weights([5, 5, 5, 5])
        assert cw.w == (1.0, 1.0, 1.0, 1.0)

    def test_empty_class_rejected(self):
        with pytest.raises(EmptyClass):
            class_weights([3, 0, 2])
        with pytest.raises(EmptyClass):
            class_weights([])

    def test_mismatched_total_rejected(self):
        with pytest.raises(EmptyClass):
            class_weights([1, 2], N=5)

    def test_synthetic_manifest_counts_match_recomputation(self, synth_cohort):
        manifest, _, _ = synth_cohort
        counts = Counter(r.label for r in manifest.records)
        from gaitlab.core import Taxonomy

        taxonomy = Taxonomy()
        ordered = [counts[c] for c in taxonomy.classes]
        cw = class_weights(ordered)
        n_total = sum(counts.values())
        for k, c in enumerate(taxonomy.classes):
            assert cw.w[k] == n_total / (taxonomy.K * counts[c])


class TestWeightedCE:
    def test_confident_correct_logit_drives_loss_to_zero(self):
        logits = np.zeros(8)
        logits[2] = 50.0
        assert weighted_ce(Tensor(logits), 2, 1.0).item() < 1e-12

    def test_shift_invariance(self):
        x = rng_for("ce-shift", 1).normal(size=8)
        base = weighted_ce(Tensor(x), 4, 1.3).item()
        shifted = weighted_ce(Tensor(x + 123.456), 4, 1.3).item()
        assert abs(base - shifted) < 1e-9
        assert np.argmax(x) == np.argmax(x + 123.456)

    def test_weight_scaling_scales_loss(self):
        x = rng_for("ce-scale", 1).normal(size=8)
        assert weighted_ce(Tensor(x), 1, 3.0).item() == pytest.approx(
            3.0 * weighted_ce(Tensor(x), 1, 1.0).item(), rel=1e-12
        )


class TestFrozenStubs:
    def test_backbone_parameters_flagged_frozen(self):
        for p in BACKBONE.parameters():
            assert not p.trainable
            assert not p.tensor.requires_grad

    def test_backbone_output_has_no_tape(self):
        out = BACKBONE.encode(Tensor(_v(5, seed=9)))
        assert not out.requires_grad
        assert out._prev == ()

    def test_snapshot_hash_stable_and_seed_sensitive(self):
        a = StubBackbone(BackboneConfig(D=D, seed=0))
        b = StubBackbone(BackboneConfig(D=D, seed=0))
        c = StubBackbone(BackboneConfig(D=D, seed=1))
        assert a.snapshot_hash() == b.snapshot_hash() == BACKBONE.snapshot_hash()
        assert a.snapshot_hash() != c.snapshot_hash()

    def test_visual_encoder_deterministic_per_clip(self):
        rows = rng_for("vis", 1).uniform(-40, 40, size=(12, 46))
        seq = make_sequence(rows, clip_id="clip-a")
        enc = StubVisualEncoder(VisualStubConfig(D=D))
        a = enc.encode_sequence(seq)
        b = enc.encode_sequence(seq)
        assert np.array_equal(a.values, b.values)
        assert a.T == 12 and a.D == D

    def test_context_vector_is_clip_keyed(self):
        rows = rng_for("vis", 2).uniform(-40, 40, size=(6, 46))
        enc = StubVisualEncoder(VisualStubConfig(D=D, context_scale=0.5))
        va = enc.encode_sequence(make_sequence(rows, clip_id="clip-a")).values
        vb = enc.encode_sequence(make_sequence(rows, clip_id="clip-b")).values
        diff = va - vb  # constant per-clip offset, identical across frames
        assert np.max(np.abs(diff)) > 0.0
        assert np.max(np.abs(diff - diff[0])) < 1e-12


class TestHeadGradients:
    def test_head_plus_fusion_gradcheck(self):
        head = HeadParams.init(K=8, D=D, seed=2)
        v = _v(5, seed=11)
        e = embed_tokens(["flex=30°", "tilt=8°"], D, 0)

        def fn():
            f_vlm = fuse_and_encode(v, e, BACKBONE)
            f_temp = Tensor(rng_for("ft", 1).normal(size=D))
            return weighted_ce(head.logits(concat_final(f_vlm, f_temp)), 3, 1.25)

        assert grad_check(fn, head.parameters()) < 1e-6
