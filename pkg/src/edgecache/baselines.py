"""Classical cache-replacement policies behind the shared action interface.

All four always admit every newly arrived file and evict as many victims as
needed to balance; they differ only in the victim rule.  LRU and LFU keep
bookkeeping derived from the request stream, which is why these policies are
flagged as non-private in run summaries.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cache import CacheAction, CacheState

POLICY_KINDS = ("lru", "lfu", "fifo", "random")


class PolicyError(ValueError):
    pass


@dataclass
class PolicyState:
    """Per-entity bookkeeping; LFU counters persist for evicted ids."""

    recency: dict[int, int] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)
    queue: deque = field(default_factory=deque)
    clock: int = 0


def baseline_touch(kind: str, state: PolicyState, outcome: int) -> PolicyState:
    """Record one observed request (0 means no request this slot)."""
    if kind not in POLICY_KINDS:
        raise PolicyError(f"unknown policy {kind!r}")
    if outcome == 0:
        return state
    if kind == "lru":
        state.clock += 1
        if outcome in state.recency:
            state.recency[outcome] = state.clock
    elif kind == "lfu":
        state.counts[outcome] = state.counts.get(outcome, 0) + 1
    return state


def baseline_decide(
    kind: str,
    state: PolicyState,
    cache: CacheState,
    new_files,
    rng: np.random.Generator | None = None,
) -> CacheAction:
    """Admit all new files; choose victims by the policy rule.

    Mutates the bookkeeping as if the action were applied (callers apply it
    immediately).  Free capacity absorbs admissions before eviction starts.
    """
    if kind not in POLICY_KINDS:
        raise PolicyError(f"unknown policy {kind!r}")
    new_files = tuple(new_files)
    for f in new_files:
        if f in cache.entries:
            raise PolicyError(f"new file {f} already cached")
    free = cache.capacity - len(cache.entries)
    n_evict = max(0, len(new_files) - free)
    if len(new_files) > cache.capacity:
        raise PolicyError(
            f"cannot admit {len(new_files)} files into capacity {cache.capacity}"
        )

    victims: set[int] = set()
    if n_evict:
        if kind == "lru":
            ranked = sorted(cache.entries, key=lambda c: (state.recency.get(c, 0), c))
            victims = set(ranked[:n_evict])
        elif kind == "lfu":
            ranked = sorted(cache.entries, key=lambda c: (state.counts.get(c, 0), c))
            victims = set(ranked[:n_evict])
        elif kind == "fifo":
            victims = {state.queue[i] for i in range(n_evict)}
        else:  # random
            picks = rng.choice(len(cache.entries), size=n_evict, replace=False)
            victims = {cache.entries[i] for i in picks}

    # bookkeeping as applied
    for v in victims:
        state.recency.pop(v, None)
    if kind == "fifo":
        state.queue = deque(c for c in state.queue if c not in victims)
        state.queue.extend(new_files)
    if kind == "lru":
        for f in new_files:
            state.clock += 1
            state.recency[f] = state.clock

    return CacheAction(
        evict=tuple(1 if c in victims else 0 for c in cache.entries),
        admit=(1,) * len(new_files),
    )
