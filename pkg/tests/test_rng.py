"""rng 测试."""

import pytest
from numpy.testing import assert_array_equal

from errors import InvalidArgumentError
from rng import derive_seed, rng_stream


class TestDeriveSeed:
    def test_stable(self):
        assert derive_seed(0, "noise", 1, 2) == derive_seed(0, "noise", 1, 2)

    def test_keys_matter(self):
        seeds = {
            derive_seed(0, "noise", 1, 2),
            derive_seed(0, "noise", 2, 1),
            derive_seed(0, "batches", 1, 2),
            derive_seed(1, "noise", 1, 2),
        }
        assert len(seeds) == 4

    def test_empty_purpose(self):
        with pytest.raises(InvalidArgumentError):
            derive_seed(0, "")

    def test_streams_repeat(self):
        assert_array_equal(rng_stream(3, "eval", 0).random(5), rng_stream(3, "eval", 0).random(5))
