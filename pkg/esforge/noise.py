"""
Deterministic, replayable Gaussian noise streams.

A stream is a pure function of its 64-bit seed: element k is computed from a
counter, never from hidden generator state, so a perturbation can be
regenerated exactly at perturb, restore and update time.

Generator:
    key      = fmix64(seed)
    raw(c)   = fmix64(key + (c + 1) * GOLDEN)          # SplitMix64 output c
    u(c)     = ((raw(c) >> 11) + 0.5) * 2**-53         # uniform in (0, 1)
    gaussian elements 2j and 2j+1 are the Box-Muller pair built from
    u(2j) and u(2j+1): r*cos(2*pi*u(2j+1)) and r*sin(2*pi*u(2j+1)),
    r = sqrt(-2 ln u(2j)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, NewType, Tuple

import numpy as np

from esforge.errors import ConfigurationError

NoiseSeed = NewType("NoiseSeed", int)

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U_GOLDEN = np.uint64(GOLDEN)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_U_ONE = np.uint64(1)
_SHIFT_30 = np.uint64(30)
_SHIFT_27 = np.uint64(27)
_SHIFT_31 = np.uint64(31)
_SHIFT_11 = np.uint64(11)
_INV_2_53 = 1.0 / float(1 << 53)
_TWO_PI = 2.0 * math.pi


def as_seed(value: int) -> NoiseSeed:
    """Validate and wrap an unsigned 64-bit seed."""
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigurationError(f"seed must be an integer, got {type(value).__name__}")
    value = int(value)
    if value < 0 or value > MASK64:
        raise ConfigurationError(f"seed out of unsigned 64-bit range: {value}")
    return NoiseSeed(value)


def fmix64(value: int) -> int:
    """SplitMix64 finalizer on a Python integer."""
    z = value & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def mix_seed(*words: int) -> NoiseSeed:
    """
    Derive a seed from a sequence of integers.

    Each word is folded in with a SplitMix64 round, so the result depends on
    every word and on their order.

    Args:
        *words: Non-negative integers (run seed, iteration, member index, tags)

    Returns:
        64-bit seed
    """
    h = fmix64(GOLDEN ^ len(words))
    for word in words:
        h = fmix64((h + GOLDEN) ^ (int(word) & MASK64))
    return NoiseSeed(h)


def _fmix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _SHIFT_30)) * _U_MIX1
    z = (z ^ (z >> _SHIFT_27)) * _U_MIX2
    return z ^ (z >> _SHIFT_31)


def _raw_block(key: int, start: int, count: int) -> np.ndarray:
    counters = np.arange(start, start + count, dtype=np.uint64) + _U_ONE
    return _fmix64_array(np.uint64(key) + counters * _U_GOLDEN)


def _uniform_block(key: int, start: int, count: int) -> np.ndarray:
    raw = _raw_block(key, start, count)
    return ((raw >> _SHIFT_11).astype(np.float64) + 0.5) * _INV_2_53


def _gaussian_block(key: int, start: int, count: int) -> np.ndarray:
    if count == 0:
        return np.empty(0, dtype=np.float64)
    first_pair = start // 2
    last_pair = (start + count - 1) // 2
    n_pairs = last_pair - first_pair + 1
    u = _uniform_block(key, 2 * first_pair, 2 * n_pairs)
    radius = np.sqrt(-2.0 * np.log(u[0::2]))
    angle = _TWO_PI * u[1::2]
    out = np.empty(2 * n_pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    offset = start - 2 * first_pair
    return out[offset:offset + count]


@dataclass
class NoiseStream:
    """
    Counter-based standard-normal stream.

    The seed never changes after creation; only the cursor advances. A stream
    is meant to be consumed by one worker at a time.
    """

    seed: NoiseSeed
    cursor: int = 0

    def __post_init__(self) -> None:
        self.seed = as_seed(self.seed)
        self._key = fmix64(self.seed)

    def next_gaussian(self) -> float:
        """Return the next standard-normal variate and advance the cursor."""
        return float(self.gaussians(1)[0])

    def next_uniform(self) -> float:
        """Return the uniform in (0, 1) at the cursor and advance the cursor."""
        return float(self.uniforms(1)[0])

    def gaussians(self, count: int) -> np.ndarray:
        """Draw `count` standard normals; identical to `count` next_gaussian calls."""
        values = _gaussian_block(self._key, self.cursor, count)
        self.cursor += count
        return values

    def uniforms(self, count: int) -> np.ndarray:
        """Draw `count` uniforms in (0, 1); identical to `count` next_uniform calls."""
        values = _uniform_block(self._key, self.cursor, count)
        self.cursor += count
        return values

    def advance(self, count: int) -> None:
        """Skip `count` elements without generating them."""
        self.cursor += count


def stream_create(seed: int) -> NoiseStream:
    """Create a stream at cursor 0 for `seed`."""
    return NoiseStream(seed=as_seed(seed))


# Golden-vector fixture files

def write_golden(path: Path, seed: int, count: int = 8) -> Path:
    """
    Write the first `count` gaussians of `seed` as a fixture file.

    Format: header line `# seed=<u64>`, then one value per line with 17
    significant digits.
    """
    from esforge.file_utils import AtomicFileWriter

    values = stream_create(seed).gaussians(count)
    lines = [f"# seed={as_seed(seed)}"] + [f"{v:.17g}" for v in values]
    AtomicFileWriter.write_text(Path(path), "\n".join(lines) + "\n")
    return Path(path)


def read_golden(path: Path) -> Tuple[NoiseSeed, List[float]]:
    """Read a golden-vector fixture file."""
    lines = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [line for line in lines if line]
    if not lines or not lines[0].startswith("# seed="):
        raise ConfigurationError(f"golden fixture {path} has no '# seed=' header")
    seed = as_seed(int(lines[0][len("# seed="):]))
    return seed, [float(line) for line in lines[1:]]
