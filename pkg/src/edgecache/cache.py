"""Cache state containers, paired eviction/admission actions, hit-rate metrics.

A cache action is a pair of binary masks: `evict` marks positions of the
currently cached list to drop, `admit` marks which of the newly arrived files
to keep.  On a full cache the two mask sums must balance exactly, so the cache
size is conserved; below capacity the cache may grow up to its limit (the
warm-up regime).
"""
from __future__ import annotations

from dataclasses import dataclass, field


class CacheError(ValueError):
    """Invalid cache state, action, or metric input."""


@dataclass(frozen=True)
class CacheState:
    """Ordered set of distinct content ids with a fixed capacity."""

    entries: tuple[int, ...]
    capacity: int
    owner: str = "server"

    def __post_init__(self):
        if self.capacity < 1:
            raise CacheError(f"capacity must be positive, got {self.capacity}")
        if len(set(self.entries)) != len(self.entries):
            raise CacheError(f"duplicate entries in cache: {self.entries}")
        if len(self.entries) > self.capacity:
            raise CacheError(
                f"{len(self.entries)} entries exceed capacity {self.capacity}"
            )

    def __contains__(self, content_id: int) -> bool:
        return content_id in self.entries

    @property
    def is_full(self) -> bool:
        return len(self.entries) == self.capacity


@dataclass(frozen=True)
class CacheAction:
    """Paired eviction/admission masks; strictly binary."""

    evict: tuple[int, ...]
    admit: tuple[int, ...]

    def __post_init__(self):
        for mask in (self.evict, self.admit):
            if any(bit not in (0, 1) for bit in mask):
                raise CacheError(f"masks must be binary, got {mask}")

    @property
    def n_evict(self) -> int:
        return sum(self.evict)

    @property
    def n_admit(self) -> int:
        return sum(self.admit)


def apply_action(
    cache: CacheState, new_files: tuple[int, ...], action: CacheAction
) -> CacheState:
    """Apply eviction/admission masks; pure function of its inputs.

    On a full cache admissions must balance evictions; below capacity the
    result may grow but never beyond capacity.  Files in `new_files` with an
    admit bit of 0 are discarded outright.
    """
    new_files = tuple(new_files)
    if len(action.evict) != len(cache.entries):
        raise CacheError(
            f"evict mask length {len(action.evict)} != cache size {len(cache.entries)}"
        )
    if len(action.admit) != len(new_files):
        raise CacheError(
            f"admit mask length {len(action.admit)} != new file count {len(new_files)}"
        )
    if len(set(new_files)) != len(new_files):
        raise CacheError(f"duplicate ids in new files: {new_files}")

    admitted = [f for f, bit in zip(new_files, action.admit) if bit]
    for f in admitted:
        if f in cache.entries:
            raise CacheError(f"admitting already-cached content {f}")

    n_after = len(cache.entries) - action.n_evict + action.n_admit
    if cache.is_full and action.n_admit != action.n_evict:
        raise CacheError(
            f"unbalanced action on full cache: admit {action.n_admit}, "
            f"evict {action.n_evict}"
        )
    if n_after > cache.capacity:
        raise CacheError(
            f"action would overflow capacity {cache.capacity} with {n_after} entries"
        )

    kept = [e for e, bit in zip(cache.entries, action.evict) if not bit]
    return CacheState(tuple(kept + admitted), cache.capacity, cache.owner)


def hit_rate_server(n_misses: int, batch_size: int) -> float | None:
    """Realtime server hit rate: 1 - misses/batch.  `None` marks a no-traffic
    slot (batch empty); such slots are excluded from averages and replay."""
    if batch_size == 0:
        if n_misses != 0:
            raise CacheError("misses without traffic")
        return None
    if not 0 <= n_misses <= batch_size:
        raise CacheError(f"misses {n_misses} outside [0, {batch_size}]")
    return 1.0 - n_misses / batch_size


def hit_rate_ue(missed: int) -> int:
    """Per-device realtime hit rate; 1 on a hit or an idle slot, 0 on a miss."""
    if missed not in (0, 1):
        raise CacheError(f"missed must be 0 or 1, got {missed}")
    return 1 - missed


@dataclass
class HitRateSeries:
    """Per-slot hit values with a sliding averaging window."""

    window: int
    values: list[float] = field(default_factory=list)

    def append(self, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise CacheError(f"hit rate {value} outside [0, 1]")
        self.values.append(value)


def sliding_average(series: HitRateSeries, t: int | None = None) -> float:
    """Mean of the last `window` values up to slot `t` (clipped at the start)."""
    if not series.values:
        raise CacheError("sliding average of an empty series")
    if t is None:
        t = len(series.values) - 1
    if not 0 <= t < len(series.values):
        raise CacheError(f"slot {t} outside recorded range")
    lo = max(0, t - series.window + 1)
    chunk = series.values[lo : t + 1]
    return sum(chunk) / len(chunk)
