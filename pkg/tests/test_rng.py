import numpy as np
import pytest

from jumpdiff import rng


class TestSeedLabels:
    def test_label_layout(self):
        lab = rng.seed_label(7, rng.ESTIMATION, 3, rng.NO_LEVEL, 11, stream=rng.NOISE)
        assert lab[0] == 7
        # the missing level is shifted to a non-negative slot
        assert lab[3] == 0

    def test_same_label_same_stream(self):
        lab = rng.seed_label(1, rng.REFERENCE, 0, 2, 5, stream=rng.PARTITION)
        a = rng.stream(lab).random(16)
        b = rng.stream(lab).random(16)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("field", range(6))
    def test_each_component_changes_stream(self, field):
        base = [1, rng.ESTIMATION, 0, 2, 5]
        other = list(base)
        if field < 5:
            other[field] += 1
            s1 = rng.seed_label(*base, stream=rng.NOISE)
            s2 = rng.seed_label(*other, stream=rng.NOISE)
        else:
            s1 = rng.seed_label(*base, stream=rng.NOISE)
            s2 = rng.seed_label(*base, stream=rng.HEIGHTS)
        assert not np.array_equal(rng.stream(s1).random(8), rng.stream(s2).random(8))

    def test_partition_and_heights_streams_distinct(self):
        a = rng.seed_label(0, rng.ESTIMATION, 0, 0, 0, stream=rng.PARTITION)
        b = rng.seed_label(0, rng.ESTIMATION, 0, 0, 0, stream=rng.HEIGHTS)
        assert a != b

    def test_negative_component_rejected(self):
        with pytest.raises(ValueError):
            rng.stream((1, -3, 0))

    def test_normal_prefix_consistency(self):
        lab = rng.seed_label(3, rng.ESTIMATION, 0, 1, 2, stream=rng.NOISE)
        short = rng.stream(lab).standard_normal(10)
        long = rng.stream(lab).standard_normal(1000)
        assert np.array_equal(short, long[:10])
