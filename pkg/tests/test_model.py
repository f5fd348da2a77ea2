"""Reference autoencoder and the gated decoder: identity initialization,
structure resolution, and the frozen-reference contract."""

import numpy as np
import pytest

from keygate.errors import ConfigurationError, TrainingError
from keygate.keys import RemovalHypothesis, enumerate_removals, generate_key
from keygate.model import (
    ArchConfig,
    StructureConfig,
    build_gated,
    build_reference,
    decode,
)


@pytest.fixture(scope="module")
def reference():
    model = build_reference(seed=0)
    model.freeze_()
    return model


@pytest.fixture(scope="module")
def latents():
    return np.random.default_rng(3).standard_normal((2, 4, 8, 8)).astype(np.float32)


class TestReference:
    def test_shapes(self, reference, latents):
        images = reference.decode_np(latents)
        assert images.shape == (2, 32, 32, 3)
        z = reference.encode_np(images)
        assert z.shape == (2, 4, 8, 8)

    def test_output_range_is_sigmoid(self, reference, latents):
        images = reference.decode_np(latents)
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_same_seed_same_model(self, latents):
        a = build_reference(seed=9).decode_np(latents)
        b = build_reference(seed=9).decode_np(latents)
        np.testing.assert_array_equal(a, b)

    def test_decode_batching_invariant(self, reference):
        z = np.random.default_rng(0).standard_normal((5, 4, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(
            reference.decode_np(z, batch_size=2), reference.decode_np(z, batch_size=64)
        )

    def test_bad_latent_shape_rejected(self, reference):
        with pytest.raises(ConfigurationError):
            reference.decode_np(np.zeros((1, 3, 8, 8), dtype=np.float32))


class TestStructureConfig:
    def test_label_round_trip(self):
        cfg = StructureConfig.from_label("4-2")
        assert (cfg.m, cfg.n) == (2, 1)
        assert cfg.structure_label() == "4-2"

    @pytest.mark.parametrize("bad", ["1-1", "4-0", "a-b", "4", "4_2", "-4-2"])
    def test_bad_labels_rejected(self, bad):
        with pytest.raises(ConfigurationError):
            StructureConfig.from_label(bad)

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            StructureConfig(m=-1).validate()
        with pytest.raises(ConfigurationError):
            StructureConfig(fuser_positions=("input", "input")).validate()
        with pytest.raises(ConfigurationError):
            StructureConfig(fuser_positions=("sideways",)).validate()

    def test_metadata_round_trip(self):
        cfg = StructureConfig(m=3, n=2, fuser_positions=("input", "post_mid"))
        assert StructureConfig.from_metadata(cfg.to_metadata()) == cfg


class TestGatedIdentityInit:
    """Zero-initialized fusers and identity fine-tuning layers: the untrained
    gated decoder must reproduce the reference bit for bit."""

    @pytest.mark.parametrize("m,n", [(0, 0), (1, 0), (0, 1), (2, 1), (3, 2)])
    def test_untrained_equals_reference(self, reference, latents, m, n):
        gated = build_gated(reference, StructureConfig(m=m, n=n), seed=1)
        base = reference.decode_np(latents)
        key = generate_key(0)
        np.testing.assert_array_equal(gated.decode_np(latents, key=key).images, base)
        np.testing.assert_array_equal(gated.decode_np(latents, key=None, use_fusers=False).images, base)

    def test_all_fuser_positions_pass_through(self, reference, latents):
        cfg = StructureConfig(m=0, n=0, fuser_positions=("input", "post_mid", "pre_output"))
        gated = build_gated(reference, cfg, seed=2)
        base = reference.decode_np(latents)
        np.testing.assert_array_equal(gated.decode_np(latents, key=generate_key(1)).images, base)

    def test_unfrozen_reference_rejected(self):
        loose = build_reference(seed=0)
        with pytest.raises(TrainingError):
            build_gated(loose, StructureConfig(m=0, n=0), seed=0)

    def test_added_and_reference_parameters_disjoint(self, reference):
        gated = build_gated(reference, StructureConfig(m=2, n=1), seed=0)
        added = {id(p) for p in gated.added_parameters()}
        ref = {id(p) for p in gated.reference_parameters()}
        assert not added & ref
        assert len(added) + len(ref) == len(list(gated.named_parameters()))
        assert all(not p.frozen for p in gated.added_parameters())
        assert all(p.frozen for p in gated.reference_parameters())

    def test_mid_chain_interleaves_added_blocks(self, reference):
        gated = build_gated(reference, StructureConfig(m=2, n=0), seed=0)
        kinds = [kind for kind, _ in gated.mid_chain_blocks()]
        assert sorted(kinds) == ["added", "added", "orig", "orig"]
        assert len(kinds) == 4


class TestKeyRegistration:
    def test_verify_only_correct_key(self, reference):
        gated = build_gated(reference, StructureConfig(m=0, n=0), seed=0)
        key = generate_key(11)
        gated.register_key(key, salt_seed=0)
        assert gated.verify_key(key)
        assert not gated.verify_key(generate_key(12))

    def test_authorized_flag_semantics(self, reference, latents):
        gated = build_gated(reference, StructureConfig(m=0, n=0), seed=0)
        key = generate_key(11)
        gated.register_key(key, salt_seed=0)
        assert gated.decode_np(latents, key=key).authorized
        assert not gated.decode_np(latents, key=generate_key(12)).authorized
        assert not gated.decode_np(latents, key=None, use_fusers=False).authorized

    def test_conditions_labelled(self, reference, latents):
        gated = build_gated(reference, StructureConfig(m=1, n=0), seed=0)
        key = generate_key(1)
        assert gated.decode_np(latents, key=key).condition == "keyed"
        assert gated.decode_np(latents, key=None, use_fusers=False).condition == "no_fuser"
        keep = RemovalHypothesis(kind="up", up_survivors=(0, 0, 0))
        assert gated.decode_np(latents, key=key, removal=keep).condition == "removal"

    def test_decode_dispatch(self, reference, latents):
        out = decode(reference, latents)
        assert out.condition == "reference"
        np.testing.assert_array_equal(out.images, reference.decode_np(latents))


class TestRemovalResolution:
    def test_keep_all_equals_unmodified(self, reference, latents):
        gated = build_gated(reference, StructureConfig(m=0, n=0), seed=0)
        key = generate_key(2)
        keep_mid = RemovalHypothesis(kind="mid", mid_survivors=(0, 1))
        keep_up = RemovalHypothesis(kind="up", up_survivors=(0, 0, 0))
        base = gated.decode_np(latents, key=key).images
        np.testing.assert_array_equal(gated.decode_np(latents, key=key, removal=keep_mid).images, base)
        np.testing.assert_array_equal(gated.decode_np(latents, key=key, removal=keep_up).images, base)

    def test_out_of_range_hypothesis_rejected(self, reference, latents):
        gated = build_gated(reference, StructureConfig(m=1, n=0), seed=0)
        too_high = RemovalHypothesis(kind="mid", mid_survivors=(0, 5))
        with pytest.raises(ConfigurationError):
            gated.decode_np(latents, removal=too_high)

    def test_scale_breaking_hypothesis_rejected(self, reference, latents):
        # at n=1 each x2 stage pools [original x2, net-1x pair]; keeping the
        # pair alone at a x2 stage cannot reproduce the upsampling
        gated = build_gated(reference, StructureConfig(m=0, n=1), seed=0)
        bad = RemovalHypothesis(kind="up", up_survivors=(1, 0, 0))
        with pytest.raises(ConfigurationError):
            gated.decode_np(latents, removal=bad)

    def test_valid_up_hypothesis_on_refine_stage(self, reference, latents):
        # with three added pairs each stage holds one; stage 2 is a
        # refinement (scale 1) so its added pair may survive alone
        gated = build_gated(reference, StructureConfig(m=0, n=3), seed=0)
        ok = RemovalHypothesis(kind="up", up_survivors=(0, 0, 1))
        out = gated.decode_np(latents, key=generate_key(3), removal=ok)
        assert out.images.shape == (2, 32, 32, 3)

    def test_pairs_distributed_round_robin(self, reference):
        gated = build_gated(reference, StructureConfig(m=0, n=4), seed=0)
        pool_sizes = [len(gated.stage_candidates(s)) for s in range(3)]
        assert pool_sizes == [3, 2, 2]  # 4 pairs: stages 0,1,2,0

    def test_exhaustive_validity_pattern_m1_n0(self, reference):
        gated = build_gated(reference, StructureConfig(m=1, n=0), seed=0)
        valid = []
        for hyp in enumerate_removals(1, 0):
            try:
                gated.resolve_hypothesis(hyp)
                valid.append(hyp.label())
            except ConfigurationError:
                pass
        assert valid == ["mid0-1", "mid0-2", "mid1-2", "up000"]

    def test_removing_both_original_mids_is_representable(self, reference, latents):
        gated = build_gated(reference, StructureConfig(m=2, n=0), seed=0)
        # added blocks occupy chain slots 0 and 2 (before each original)
        chain = [kind for kind, _ in gated.mid_chain_blocks()]
        added_slots = tuple(i for i, kind in enumerate(chain) if kind == "added")
        hyp = RemovalHypothesis(kind="mid", mid_survivors=added_slots)
        out = gated.decode_np(latents, key=generate_key(4), removal=hyp)
        assert out.images.shape == (2, 32, 32, 3)


class TestArchConfig:
    def test_dict_round_trip(self):
        arch = ArchConfig(image_size=32, latent_channels=4)
        assert ArchConfig.from_dict(arch.to_dict()) == arch

    def test_latent_shape(self):
        assert ArchConfig().latent_shape == (4, 8, 8)

    def test_bad_image_size(self):
        with pytest.raises(ConfigurationError):
            ArchConfig(image_size=30).validate()
