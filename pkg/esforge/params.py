"""
Parameter store with grouped named tensors.

A ParamSet is the full parameter vector of a policy. Tensors are kept in
ascending name order, which is also the order noise streams are consumed in
(row-major within a tensor). Storage is float32; every accumulation (norms,
update deltas, gradients) is done in float64.
"""

from __future__ import annotations

import logging
import threading
import weakref
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from esforge.constants import DEFAULT_TAU
from esforge.errors import ComparabilityError, ConfigurationError, NoiseOverflowError
from esforge.noise import NoiseStream

logger = logging.getLogger(__name__)


class ParamKind(IntEnum):
    """Architectural component a tensor belongs to; the value is its checkpoint code."""

    EMBEDDING = 0
    HIDDEN_WEIGHT = 1
    HIDDEN_BIAS = 2
    OUTPUT_WEIGHT = 3
    OUTPUT_BIAS = 4
    NORM = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "ParamKind":
        try:
            return cls[label.strip().upper()]
        except KeyError:
            raise ConfigurationError(f"unknown parameter kind: {label!r}") from None


@dataclass(frozen=True, order=True)
class ParamGroup:
    """(kind, layer_index) pair identifying a tensor's component."""

    kind: ParamKind
    layer_index: int = 0

    def __post_init__(self) -> None:
        if self.layer_index < 0:
            raise ConfigurationError(f"layer_index must be >= 0, got {self.layer_index}")

    @property
    def sort_key(self) -> Tuple[int, int]:
        """Layer-major order used by sparsity profiles."""
        return (self.layer_index, int(self.kind))

    def __str__(self) -> str:
        return f"{self.kind.label}[{self.layer_index}]"


@dataclass
class ParamTensor:
    """A named tensor; `data` is a row-major numpy array of shape `shape`."""

    name: str
    group: ParamGroup
    shape: Tuple[int, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.shape = tuple(int(d) for d in self.shape)
        if not self.name:
            raise ConfigurationError("tensor name must be non-empty")
        if not self.shape or any(d <= 0 for d in self.shape):
            raise ConfigurationError(
                f"tensor {self.name}: shape must be positive, got {self.shape}"
            )
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if data.size != int(np.prod(self.shape)):
            raise ConfigurationError(
                f"tensor {self.name}: data length {data.size} does not match shape {self.shape}"
            )
        self.data = np.ascontiguousarray(data.reshape(self.shape))

    @property
    def size(self) -> int:
        return int(self.data.size)

    def structure(self) -> Tuple[str, ParamGroup, Tuple[int, ...]]:
        return (self.name, self.group, self.shape)


class _CopyStats:
    """Allocation accounting for ParamSet copies (total, live, peak live)."""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.total = 0
        self.live = 0
        self.peak = 0

    def track(self, params: "ParamSet") -> None:
        with self.lock:
            self.total += 1
            self.live += 1
            self.peak = max(self.peak, self.live)
        weakref.finalize(params, self._release)

    def _release(self) -> None:
        with self.lock:
            self.live -= 1

    def reset(self) -> None:
        with self.lock:
            self.total = 0
            self.peak = self.live


_COPY_STATS = _CopyStats()


class ParamSet:
    """
    Ordered map name -> ParamTensor, iterated in ascending name order.

    Single-writer: the in-place operations mutate tensor storage directly.
    """

    def __init__(self, tensors: Optional[Iterable[ParamTensor]] = None):
        self._tensors: Dict[str, ParamTensor] = {}
        for tensor in sorted(tensors or [], key=lambda t: t.name):
            if tensor.name in self._tensors:
                raise ConfigurationError(f"duplicate tensor name: {tensor.name}")
            self._tensors[tensor.name] = tensor
        seen: Dict[ParamGroup, str] = {}
        for tensor in self._tensors.values():
            if tensor.group in seen:
                raise ConfigurationError(
                    f"tensors {seen[tensor.group]} and {tensor.name} share group {tensor.group}"
                )
            seen[tensor.group] = tensor.name

    # Copy accounting

    @staticmethod
    def copies_made() -> int:
        """Total number of ParamSet copies allocated since the last reset."""
        return _COPY_STATS.total

    @staticmethod
    def live_copies() -> int:
        return _COPY_STATS.live

    @staticmethod
    def peak_live_copies() -> int:
        """Largest number of simultaneously alive copies since the last reset."""
        return _COPY_STATS.peak

    @staticmethod
    def reset_copy_stats() -> None:
        _COPY_STATS.reset()

    # Mapping protocol

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)

    def __getitem__(self, name: str) -> ParamTensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def names(self) -> List[str]:
        return list(self._tensors)

    def array(self, name: str) -> np.ndarray:
        """Shortcut for the data array of tensor `name`."""
        return self._tensors[name].data

    @property
    def size(self) -> int:
        """Total element count."""
        return sum(t.size for t in self)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.size} elements)"

    # Structure

    def structure(self) -> List[Tuple[str, ParamGroup, Tuple[int, ...]]]:
        return [t.structure() for t in self]

    def check_comparable(self, other: "ParamSet") -> None:
        """
        Raise ComparabilityError unless names, groups and shapes all match.

        Raises:
            ComparabilityError: On the first mismatching tensor
        """
        if self.names() != other.names():
            missing = sorted(set(self.names()) ^ set(other.names()))
            raise ComparabilityError(f"tensor names differ: {missing}")
        for mine, theirs in zip(self, other):
            if mine.structure() != theirs.structure():
                raise ComparabilityError(
                    f"tensor {mine.name}: {mine.group}{mine.shape} vs {theirs.group}{theirs.shape}"
                )

    def is_comparable(self, other: "ParamSet") -> bool:
        try:
            self.check_comparable(other)
        except ComparabilityError:
            return False
        return True

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(t.data))) for t in self)

    def bitwise_equal(self, other: "ParamSet") -> bool:
        if not self.is_comparable(other):
            return False
        return all(
            mine.data.dtype == theirs.data.dtype and mine.data.tobytes() == theirs.data.tobytes()
            for mine, theirs in zip(self, other)
        )

    # Copies

    def deep_copy(self) -> "ParamSet":
        """Structurally identical, bitwise-equal copy with independent storage."""
        copy = ParamSet(
            ParamTensor(t.name, t.group, t.shape, t.data.copy()) for t in self
        )
        _COPY_STATS.track(copy)
        return copy

    def zeros_like(self, dtype: type = np.float64) -> "ParamSet":
        """Same structure, all zeros; float64 by default (gradient and delta storage)."""
        zeros = ParamSet(
            ParamTensor(t.name, t.group, t.shape, np.zeros(t.shape, dtype=dtype)) for t in self
        )
        _COPY_STATS.track(zeros)
        return zeros

    def snapshot(self) -> "ParamSet":
        """Copy taken before a perturbation, for exact restore."""
        return self.deep_copy()

    def restore_from(self, snapshot: "ParamSet") -> None:
        """Overwrite storage with the snapshot's values (bitwise)."""
        self.check_comparable(snapshot)
        for mine, saved in zip(self, snapshot):
            mine.data[...] = saved.data

    # Flat views in the global noise order

    def flatten(self) -> np.ndarray:
        """Concatenate all tensors (ascending name, row-major) into a float64 vector."""
        if not len(self):
            return np.empty(0, dtype=np.float64)
        return np.concatenate([t.data.astype(np.float64).ravel() for t in self])

    @classmethod
    def from_flat(
        cls, template: "ParamSet", flat: np.ndarray, dtype: type = np.float32
    ) -> "ParamSet":
        """Build a ParamSet with template's structure from a flat vector."""
        flat = np.asarray(flat)
        if flat.size != template.size:
            raise ComparabilityError(
                f"flat vector has {flat.size} elements, template has {template.size}"
            )
        tensors = []
        offset = 0
        for t in template:
            chunk = flat[offset:offset + t.size].astype(dtype).reshape(t.shape)
            tensors.append(ParamTensor(t.name, t.group, t.shape, chunk))
            offset += t.size
        return cls(tensors)

    # In-place arithmetic

    def add_scaled(self, other: "ParamSet", scale: float) -> None:
        """
        self += scale * other, computed in float64 and rounded to storage dtype.

        Raises:
            ComparabilityError: If structures differ
            NoiseOverflowError: If any result is non-finite (nothing is written)
        """
        self.check_comparable(other)
        if scale == 0.0:
            return
        updated = []
        for mine, theirs in zip(self, other):
            value = (mine.data.astype(np.float64) + scale * theirs.data.astype(np.float64))
            value = value.astype(mine.data.dtype)
            if not np.all(np.isfinite(value)):
                raise NoiseOverflowError(f"non-finite value in {mine.name} after scaled add")
            updated.append(value)
        for mine, value in zip(self, updated):
            mine.data[...] = value

    def global_norm(self) -> float:
        """L2 norm over all elements, accumulated in float64."""
        total = 0.0
        for t in self:
            values = t.data.astype(np.float64)
            total += float(np.dot(values.ravel(), values.ravel()))
        return float(np.sqrt(total))


def axpy_noise_inplace(params: ParamSet, scale: float, stream: NoiseStream) -> None:
    """
    Add scale * noise to every element, consuming the stream in global order.

    Each element becomes fl(x + scale * eps) where the sum is formed in
    float64. The whole result is validated before anything is written, so an
    overflow leaves params untouched.

    Args:
        params: Parameters to perturb (float32 or float64 storage)
        scale: Multiplier on the noise (sigma, -sigma, or an update coefficient)
        stream: Noise stream; exactly params.size elements are consumed

    Raises:
        NoiseOverflowError: If any perturbed value is non-finite
    """
    if scale == 0.0:
        stream.advance(params.size)
        return
    updated = []
    for tensor in params:
        eps = stream.gaussians(tensor.size).reshape(tensor.shape)
        value = (tensor.data.astype(np.float64) + scale * eps).astype(tensor.data.dtype)
        if not np.all(np.isfinite(value)):
            raise NoiseOverflowError(
                f"perturbation with scale {scale!r} overflowed tensor {tensor.name}"
            )
        updated.append(value)
    for tensor, value in zip(params, updated):
        tensor.data[...] = value


@dataclass
class DiffStats:
    """Frobenius drift and per-group tau-sparsity between two ParamSets."""

    frobenius: float
    per_group_sparsity: Dict[ParamGroup, float]
    per_group_count: Dict[ParamGroup, int]
    tau: float

    @property
    def total_count(self) -> int:
        return sum(self.per_group_count.values())

    @property
    def global_sparsity(self) -> float:
        """Count-weighted mean of the group fractions (1.0 for an empty set)."""
        total = self.total_count
        if total == 0:
            return 1.0
        below = sum(
            self.per_group_sparsity[group] * count for group, count in self.per_group_count.items()
        )
        return below / total

    def groups(self) -> List[ParamGroup]:
        """Groups in layer-major order."""
        return sorted(self.per_group_count, key=lambda g: g.sort_key)


def _deltas(base: ParamSet, new: ParamSet) -> Iterator[Tuple[ParamTensor, np.ndarray]]:
    base.check_comparable(new)
    for old, cur in zip(base, new):
        yield old, cur.data.astype(np.float64) - old.data.astype(np.float64)


def diff_frobenius(base: ParamSet, new: ParamSet) -> float:
    """
    Frobenius norm of new - base over all concatenated elements.

    Raises:
        ComparabilityError: If the two sets are not structurally comparable
    """
    total = 0.0
    for _, delta in _deltas(base, new):
        flat = delta.ravel()
        total += float(np.dot(flat, flat))
    return float(np.sqrt(total))


def diff_sparsity(base: ParamSet, new: ParamSet, tau: float = DEFAULT_TAU) -> DiffStats:
    """
    Per-group fraction of elements with |new - base| < tau.

    Args:
        base: Reference parameters
        new: Fine-tuned parameters
        tau: Strict threshold; elements exactly at tau count as changed

    Returns:
        DiffStats with the Frobenius drift and per-group fractions/counts

    Raises:
        ConfigurationError: If tau <= 0
        ComparabilityError: If the two sets are not structurally comparable
    """
    if not tau > 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    sparsity: Dict[ParamGroup, float] = {}
    counts: Dict[ParamGroup, int] = {}
    total = 0.0
    for tensor, delta in _deltas(base, new):
        flat = delta.ravel()
        total += float(np.dot(flat, flat))
        below = int(np.count_nonzero(np.abs(flat) < tau))
        counts[tensor.group] = tensor.size
        sparsity[tensor.group] = below / tensor.size
    return DiffStats(
        frobenius=float(np.sqrt(total)),
        per_group_sparsity=sparsity,
        per_group_count=counts,
        tau=tau,
    )
