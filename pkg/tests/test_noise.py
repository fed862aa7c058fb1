"""Tests for esforge.noise."""

from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from esforge.errors import ConfigurationError
from esforge.noise import (
    NoiseStream,
    as_seed,
    mix_seed,
    read_golden,
    stream_create,
    write_golden,
)

FIXTURES = Path(__file__).parent / "fixtures"


class TestStreamDeterminism:
    """Streams are pure functions of their seed."""

    def test_same_seed_identical_prefix(self):
        """Two streams from seed 42 agree on the first 1000 elements bitwise."""
        a = stream_create(42).gaussians(1000)
        b = stream_create(42).gaussians(1000)
        assert a.tobytes() == b.tobytes()

    def test_adjacent_seeds_differ(self):
        """Seeds 42 and 43 produce different prefixes."""
        a = stream_create(42).gaussians(1000)
        b = stream_create(43).gaussians(1000)
        assert np.any(a != b)

    def test_seed_zero_is_valid(self):
        """Seed 0 gives finite values with unit-ish variance."""
        values = stream_create(0).gaussians(100_000)
        assert np.all(np.isfinite(values))
        assert 0.8 < values.var() < 1.2

    def test_scalar_and_block_draws_agree(self):
        """k next_gaussian calls equal one gaussians(k) call."""
        scalar_stream = stream_create(9)
        scalars = np.array([scalar_stream.next_gaussian() for _ in range(17)])
        block = stream_create(9).gaussians(17)
        assert np.array_equal(scalars, block)
        assert scalar_stream.cursor == 17

    def test_block_draws_at_odd_cursor(self):
        """A block starting mid Box-Muller pair continues the same sequence."""
        full = stream_create(5).gaussians(10)
        stream = stream_create(5)
        head = stream.gaussians(3)
        tail = stream.gaussians(7)
        assert np.array_equal(np.concatenate([head, tail]), full)

    def test_advance_skips_elements(self):
        """advance(k) lands on the same element as drawing k values."""
        full = stream_create(8).gaussians(6)
        stream = stream_create(8)
        stream.advance(4)
        assert np.array_equal(stream.gaussians(2), full[4:])

    def test_uniforms_in_open_interval(self):
        """Uniforms never hit 0 or 1."""
        u = stream_create(1).uniforms(50_000)
        assert u.min() > 0.0
        assert u.max() < 1.0
        assert stream_create(1).next_uniform() == u[0]

    def test_zero_count_draw(self):
        """Drawing zero values returns an empty array and keeps the cursor."""
        stream = stream_create(3)
        assert stream.gaussians(0).size == 0
        assert stream.cursor == 0


class TestStreamStatistics:
    """Distributional checks."""

    def test_mean_and_std(self):
        """10^6 draws from seed 7 have mean ~0 and std ~1."""
        values = stream_create(7).gaussians(1_000_000)
        assert -0.01 <= values.mean() <= 0.01
        assert 0.99 <= values.std() <= 1.01

    def test_kolmogorov_smirnov_against_normal(self):
        """The empirical CDF stays close to the standard normal CDF."""
        values = stream_create(2024).gaussians(100_000)
        result = stats.kstest(values, "norm")
        assert result.statistic < 0.01

    @pytest.mark.parametrize("seed", [0, 41, 2**63])
    def test_adjacent_seeds_uncorrelated(self, seed):
        """Streams from seeds s and s+1 have |corr| below 0.02."""
        a = stream_create(seed).gaussians(100_000)
        b = stream_create(seed + 1).gaussians(100_000)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.02


class TestGoldenVector:
    """Frozen reference values."""

    def test_fixture_matches_stream(self):
        """The seed=123 fixture reproduces."""
        seed, expected = read_golden(FIXTURES / "golden_seed123.txt")
        assert seed == 123
        assert len(expected) == 8
        actual = stream_create(seed).gaussians(len(expected))
        np.testing.assert_allclose(actual, expected, rtol=1e-13, atol=0)

    def test_write_then_read(self, tmp_path):
        """write_golden output parses back to the stream prefix."""
        path = write_golden(tmp_path / "g.txt", 77, count=5)
        seed, values = read_golden(path)
        assert seed == 77
        assert path.read_text().startswith("# seed=77\n")
        np.testing.assert_array_equal(values, stream_create(77).gaussians(5))

    def test_missing_header_rejected(self, tmp_path):
        """A fixture without the seed header is an error."""
        path = tmp_path / "bad.txt"
        path.write_text("0.5\n")
        with pytest.raises(ConfigurationError):
            read_golden(path)


class TestSeeds:
    """Seed validation and mixing."""

    @pytest.mark.parametrize("bad", [-1, 2**64, 1.5, True, "3"])
    def test_invalid_seeds_rejected(self, bad):
        """Seeds must be unsigned 64-bit integers."""
        with pytest.raises(ConfigurationError):
            as_seed(bad)

    def test_max_seed_accepted(self):
        """2^64 - 1 is a valid seed."""
        assert NoiseStream(2**64 - 1).gaussians(4).shape == (4,)

    def test_mix_seed_depends_on_order(self):
        """Word order matters."""
        assert mix_seed(1, 2) != mix_seed(2, 1)

    def test_mix_seed_depends_on_length(self):
        """A trailing zero word changes the seed."""
        assert mix_seed(5) != mix_seed(5, 0)

    def test_mix_seed_in_range(self):
        """Mixed seeds are valid stream seeds."""
        for words in [(0,), (2**64 - 1, 3), (1, 2, 3, 4)]:
            assert 0 <= mix_seed(*words) < 2**64
