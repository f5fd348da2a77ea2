"""Latent sign watermark: embed/extract round trips and carrier statistics."""

import numpy as np
import pytest

from keygate.errors import CapacityError, ConfigurationError
from keygate.metrics import bit_accuracy
from keygate.watermark import (
    DEFAULT_BITS,
    DEFAULT_REPLICATION,
    RobustnessTable,
    WatermarkPayload,
    embed,
    extract,
    extract_from_latent,
)

LATENT_SHAPE = (4, 8, 8)
LATENT_ELEMENTS = 256


class TestPayload:
    def test_random_is_deterministic(self):
        a = WatermarkPayload.random(7)
        b = WatermarkPayload.random(7)
        assert a == b
        assert len(a.bits) == DEFAULT_BITS and a.replication == DEFAULT_REPLICATION

    def test_capacity_enforced(self):
        payload = WatermarkPayload(bits=(0, 1) * 20, replication=8)  # 40*8 > 256
        with pytest.raises(CapacityError):
            payload.validate(LATENT_ELEMENTS)

    def test_bit_values_checked(self):
        with pytest.raises(ConfigurationError):
            WatermarkPayload(bits=(0, 2, 1)).validate(LATENT_ELEMENTS)
        with pytest.raises(ConfigurationError):
            WatermarkPayload(bits=()).validate(LATENT_ELEMENTS)


class TestEmbed:
    def test_all_zero_payload_sets_controlled_signs_negative(self):
        payload = WatermarkPayload(bits=(0,) * 32, replication=8, seed=11)
        z = embed(payload, LATENT_SHAPE).reshape(-1)
        perm = np.random.default_rng(np.random.SeedSequence((11, 5))).permutation(LATENT_ELEMENTS)
        controlled = z[perm[: 32 * 8]]
        assert np.all(controlled < 0)

    def test_all_one_payload_sets_controlled_signs_positive(self):
        payload = WatermarkPayload(bits=(1,) * 32, replication=8, seed=12)
        z = embed(payload, LATENT_SHAPE).reshape(-1)
        perm = np.random.default_rng(np.random.SeedSequence((12, 5))).permutation(LATENT_ELEMENTS)
        assert np.all(z[perm[: 32 * 8]] > 0)

    def test_direct_latent_round_trip_is_exact(self):
        for seed in range(25):
            payload = WatermarkPayload.random(seed)
            z = embed(payload, LATENT_SHAPE)
            got = extract_from_latent(z, payload.seed, len(payload.bits), payload.replication)
            assert bit_accuracy(np.array(payload.bits), got) == 1.0

    def test_capacity_error_from_embed(self):
        with pytest.raises(CapacityError):
            embed(WatermarkPayload(bits=(1,) * 64, replication=8), LATENT_SHAPE)

    def test_carrier_marginals_standard_normal(self):
        # 10^4 carriers of random payloads: elementwise mean ~0, variance ~1.
        total = np.zeros(LATENT_ELEMENTS)
        total_sq = np.zeros(LATENT_ELEMENTS)
        n = 10_000
        for seed in range(n):
            z = embed(WatermarkPayload.random(seed), LATENT_SHAPE).reshape(-1).astype(np.float64)
            total += z
            total_sq += z * z
        mean = total / n
        var = total_sq / n - mean**2
        assert np.all(np.abs(mean) < 0.05)
        assert np.all(np.abs(var - 1.0) < 0.1)

    def test_magnitude_seed_varies_carrier_not_bits(self):
        payload = WatermarkPayload.random(3)
        z1 = embed(payload, LATENT_SHAPE, magnitude_seed=1)
        z2 = embed(payload, LATENT_SHAPE, magnitude_seed=2)
        assert not np.array_equal(z1, z2)
        for z in (z1, z2):
            got = extract_from_latent(z, payload.seed, len(payload.bits), payload.replication)
            assert bit_accuracy(np.array(payload.bits), got) == 1.0


class TestExtract:
    def test_extract_needs_single_image(self):
        with pytest.raises(ConfigurationError):
            extract(np.zeros((2, 32, 32, 3), dtype=np.float32), lambda x: x, seed=0)

    def test_extract_capacity_checked(self):
        with pytest.raises(CapacityError):
            extract_from_latent(np.zeros(64), seed=0, k=32, r=8)

    def test_majority_vote_tie_breaks_on_sum(self):
        # r=2 with one positive and one negative at a bit's positions is a
        # sign tie; the summed value decides.
        perm = np.random.default_rng(np.random.SeedSequence((9, 5))).permutation(16)
        z = np.zeros(16)
        z[perm[0]], z[perm[1]] = 3.0, -1.0
        assert extract_from_latent(z, seed=9, k=1, r=2)[0] == 1
        z[perm[0]], z[perm[1]] = 0.5, -2.0
        assert extract_from_latent(z, seed=9, k=1, r=2)[0] == 0

    def test_null_baseline_near_half(self):
        # Unwatermarked Gaussian latents must decode to chance-level bits.
        rng = np.random.default_rng(21)
        accs = []
        for seed in range(200):
            payload = WatermarkPayload.random(seed)
            z = rng.standard_normal(LATENT_ELEMENTS)
            got = extract_from_latent(z, payload.seed, len(payload.bits), payload.replication)
            accs.append(bit_accuracy(np.array(payload.bits), got))
        assert 0.35 <= float(np.mean(accs)) <= 0.65


class TestRobustnessTable:
    def test_row_follows_column_order(self):
        table = RobustnessTable(path="reference", accuracies={"none": 1.0, "crop": 0.51})
        assert table.to_row(["none", "crop"]) == ["reference", 1.0, 0.51]
        assert table.to_row(["crop", "none"]) == ["reference", 0.51, 1.0]
