"""Estimator wrappers: sklearn get/set/clone contracts and decode surface."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from keygate.data import DatasetSpec, generate_dataset
from keygate.errors import ConfigurationError
from keygate.estimators import KeyGatedEstimator, LatentCoder
from keygate.keys import FuserKey

SIZE = 12
FLAT = SIZE * SIZE * 3


@pytest.fixture(scope="module")
def images():
    return generate_dataset(DatasetSpec(count=16, seed=5, height=SIZE, width=SIZE))


@pytest.fixture(scope="module")
def fitted_coder(images):
    return LatentCoder(image_size=SIZE, steps=6, batch_size=8, seed=0).fit(images)


@pytest.fixture(scope="module")
def fitted_gated(fitted_coder, images):
    est = KeyGatedEstimator(coder=fitted_coder, m=1, n=0, steps=5, batch_size=4, seed=0)
    return est.fit(images)


class TestLatentCoder:
    def test_get_set_params_round_trip(self):
        coder = LatentCoder(steps=50, seed=7)
        params = coder.get_params()
        assert params["steps"] == 50 and params["seed"] == 7
        coder.set_params(steps=10)
        assert coder.steps == 10

    def test_clone_keeps_params_drops_state(self, fitted_coder):
        fresh = clone(fitted_coder)
        assert fresh.get_params() == fitted_coder.get_params()
        assert not hasattr(fresh, "model_")

    def test_unfitted_transform_raises(self):
        with pytest.raises(NotFittedError):
            LatentCoder(image_size=SIZE).transform(np.zeros((1, FLAT)))

    def test_fit_sets_state(self, fitted_coder):
        assert fitted_coder.n_features_in_ == FLAT
        assert fitted_coder.report_.stage == "reference"

    def test_rows_and_stacks_agree(self, fitted_coder, images):
        stack = fitted_coder.transform(images)
        rows = fitted_coder.transform(images.reshape(len(images), -1))
        np.testing.assert_array_equal(stack, rows)
        assert stack.shape == (len(images), 4 * (SIZE // 4) ** 2)

    def test_inverse_transform_round_trip_shape(self, fitted_coder, images):
        z = fitted_coder.transform(images[:3])
        back = fitted_coder.inverse_transform(z)
        assert back.shape == (3, FLAT)
        assert back.min() >= 0.0 and back.max() <= 1.0

    def test_score_is_mean_psnr(self, fitted_coder, images):
        val = fitted_coder.score(images)
        assert np.isfinite(val) and val > 0.0

    def test_bad_row_width_rejected(self, fitted_coder):
        with pytest.raises(ConfigurationError):
            fitted_coder.transform(np.zeros((2, FLAT + 1)))

    def test_out_of_range_values_rejected(self, fitted_coder):
        with pytest.raises(ConfigurationError):
            fitted_coder.transform(np.full((1, FLAT), 2.0))


class TestKeyGatedEstimator:
    def test_requires_fitted_coder(self, images):
        with pytest.raises(ConfigurationError):
            KeyGatedEstimator(coder=LatentCoder(image_size=SIZE)).fit(images)
        with pytest.raises(ConfigurationError):
            KeyGatedEstimator(coder=None).fit(images)

    def test_fit_generates_key_when_absent(self, fitted_gated):
        assert len(fitted_gated.key_hex_) == 32
        FuserKey.from_hex(fitted_gated.key_hex_)  # parses

    def test_explicit_key_honored(self, fitted_coder, images):
        key_hex = "0123456789abcdef" * 2
        est = KeyGatedEstimator(
            coder=fitted_coder, key_hex=key_hex, m=0, n=0, steps=3, batch_size=4, seed=1
        ).fit(images)
        assert est.key_hex_ == key_hex

    def test_decode_and_predict_agree(self, fitted_gated, fitted_coder, images):
        z = fitted_coder.transform(images[:2])
        np.testing.assert_array_equal(fitted_gated.decode(z), fitted_gated.predict(z))

    def test_wrong_key_changes_output(self, fitted_gated, fitted_coder, images):
        z = fitted_coder.transform(images[:2])
        keyed = fitted_gated.decode(z)
        other = fitted_gated.decode(z, key="ff" * 16)
        assert not np.array_equal(keyed, other)

    def test_score_near_reference_for_short_fit(self, fitted_gated, fitted_coder, images):
        z = fitted_coder.transform(images[:4])
        assert fitted_gated.score(z) > 20.0

    def test_unfitted_decode_raises(self):
        with pytest.raises(NotFittedError):
            KeyGatedEstimator().decode(np.zeros((1, 36)))

    def test_clone_contract(self, fitted_gated):
        fresh = clone(fitted_gated)
        assert fresh.get_params()["m"] == fitted_gated.m
        assert not hasattr(fresh, "model_")
