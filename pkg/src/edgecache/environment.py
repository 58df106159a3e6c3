"""Demand simulation and request routing for the edge-caching system.

Each user device (UE) owns a hidden Markov chain over Zipf exponents plus a
fixed private rank permutation, so devices are independent but not
identically distributed.  Requests missed at a UE are uploaded to the edge
server inside a per-slot batch; the server must erase that batch within the
slot once the global popularity prediction has been made.

The hidden dynamics (exponent sets, transition matrices, permutations,
arrival chains) are reachable only through this module and the test oracles;
agent-side code sees observations, never the generators.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cache import CacheState

NO_REQUEST = 0

# Hidden-dynamics generation ranges: number of exponent states per UE,
# exponent range, and the sticky three-state arrival-rate chain.
EXPONENT_STATE_CHOICES = (3, 4, 5)
EXPONENT_RANGE = (0.4, 2.0)
ARRIVAL_RATES = (0.6, 0.8, 1.0)
ARRIVAL_STICKINESS = 0.9

ALLOWED_MESSAGE_KINDS = frozenset(
    {
        "request_batch",
        "param_upload",
        "param_broadcast",
        "content_delivery",
        "actor_broadcast",
    }
)


class DomainError(ValueError):
    """Parameter outside its mathematical domain."""


class OrderingError(RuntimeError):
    """Privacy-lifecycle methods called out of order."""


@dataclass(frozen=True)
class Catalog:
    """Dense content ids 1..n_contents, stable for a whole experiment."""

    n_contents: int

    def __post_init__(self):
        if self.n_contents < 2:
            raise DomainError(f"catalog needs at least 2 contents, got {self.n_contents}")

    def ids(self) -> range:
        return range(1, self.n_contents + 1)


def zipf_pmf(alpha: float, catalog: Catalog, perm: np.ndarray) -> np.ndarray:
    """Zipf probability vector over content ids.

    `perm` maps rank to content id (perm[r-1] is the id holding rank r), so
    the id perm[r-1] receives probability r^-alpha / sum_k k^-alpha.
    """
    if alpha < 0:
        raise DomainError(f"zipf exponent must be non-negative, got {alpha}")
    n = catalog.n_contents
    perm = np.asarray(perm, dtype=int)
    if perm.shape != (n,) or sorted(perm.tolist()) != list(range(1, n + 1)):
        raise DomainError("perm must be a permutation of 1..N")
    ranks = np.arange(1, n + 1, dtype=float)
    weights = ranks ** (-alpha)
    by_rank = weights / weights.sum()
    out = np.empty(n, dtype=float)
    out[perm - 1] = by_rank
    return out


class MarkovChain:
    """Finite-state chain stepped by inverse-CDF draws from a caller stream."""

    def __init__(self, values, matrix, start_state: int):
        self.values = tuple(values)
        matrix = np.asarray(matrix, dtype=float)
        k = len(self.values)
        if matrix.shape != (k, k):
            raise DomainError(f"transition matrix shape {matrix.shape} != ({k}, {k})")
        if (matrix < 0).any():
            raise DomainError("transition probabilities must be non-negative")
        rowsums = matrix.sum(axis=1)
        if np.abs(rowsums - 1.0).max() > 1e-12:
            raise DomainError(f"rows must sum to 1, got {rowsums}")
        if not 0 <= start_state < k:
            raise DomainError(f"start state {start_state} outside [0, {k})")
        self.matrix = matrix
        self.state = int(start_state)
        self._row_cdfs = np.cumsum(matrix, axis=1)

    @property
    def value(self):
        return self.values[self.state]

    def step(self, rng: np.random.Generator) -> int:
        u = rng.random()
        nxt = int(np.searchsorted(self._row_cdfs[self.state], u, side="right"))
        self.state = min(nxt, len(self.values) - 1)
        return self.state


class MarkovPopularityModel:
    """Hidden Zipf-exponent chain plus the UE's fixed rank permutation."""

    def __init__(self, alphas, transition_matrix, start_state, rank_permutation, catalog):
        alphas = tuple(float(a) for a in alphas)
        for a in alphas:
            if a < 0:
                raise DomainError(f"negative zipf exponent {a}")
        self.chain = MarkovChain(alphas, transition_matrix, start_state)
        self.rank_permutation = np.asarray(rank_permutation, dtype=int)
        self.catalog = catalog
        # One pmf/cdf per exponent state; the permutation is fixed.
        self._pmfs = [zipf_pmf(a, catalog, self.rank_permutation) for a in alphas]
        self._cdfs = [np.cumsum(p) for p in self._pmfs]

    @property
    def current_state(self) -> int:
        return self.chain.state

    @property
    def current_alpha(self) -> float:
        return self.chain.value

    def current_pmf(self) -> np.ndarray:
        return self._pmfs[self.chain.state]

    def step(self, rng: np.random.Generator) -> int:
        return self.chain.step(rng)

    def draw_content(self, rng: np.random.Generator) -> int:
        u = rng.random()
        idx = int(np.searchsorted(self._cdfs[self.chain.state], u, side="right"))
        return min(idx, self.catalog.n_contents - 1) + 1


@dataclass
class UserProfile:
    """Environment-side demand generator for one UE."""

    ue_id: int
    arrival_chain: MarkovChain
    popularity: MarkovPopularityModel
    window_len: int
    history_window: deque = field(init=False)

    def __post_init__(self):
        if self.window_len < 1:
            raise DomainError("window length must be positive")
        self.history_window = deque(
            [NO_REQUEST] * self.window_len, maxlen=self.window_len
        )

    @property
    def arrival_rate(self) -> float:
        return float(self.arrival_chain.value)


def generate_request(profile: UserProfile, t: int, rng: np.random.Generator) -> int:
    """Draw this slot's request (or NO_REQUEST) and append it to the window."""
    lam = profile.arrival_rate
    outcome = NO_REQUEST
    if rng.random() < lam:
        outcome = profile.popularity.draw_content(rng)
    profile.history_window.append(outcome)
    return outcome


@dataclass(frozen=True)
class GlobalRequestBatch:
    """Requests that missed their UE caches in slot `slot`; erased same slot."""

    slot: int
    entries: tuple[tuple[int, int], ...]  # (ue_id, content_id)

    @property
    def size(self) -> int:
        return len(self.entries)

    def contents(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.entries)


def route_and_collect(
    t: int,
    requests: dict[int, int],
    ue_caches: dict[int, CacheState],
    server_cache: CacheState,
) -> tuple[GlobalRequestBatch, tuple[int, ...], dict[int, bool]]:
    """Route slot requests: local hits stay on the UE, misses form the batch.

    Returns the batch, the ordered distinct batch contents absent from the
    server cache (set semantics: duplicates collapse), and per-UE miss flags.
    A no-request slot counts as not-missed for its UE.
    """
    entries = []
    missed: dict[int, bool] = {}
    for ue_id in sorted(requests):
        content = requests[ue_id]
        if content == NO_REQUEST:
            missed[ue_id] = False
            continue
        if content in ue_caches[ue_id]:
            missed[ue_id] = False
        else:
            missed[ue_id] = True
            entries.append((ue_id, content))
    batch = GlobalRequestBatch(t, tuple(entries))
    server_new = []
    for _, content in entries:
        if content not in server_cache and content not in server_new:
            server_new.append(content)
    return batch, tuple(server_new), missed


class MessageLog:
    """Typed record of everything crossing the UE/server boundary.

    Appending an unknown kind raises immediately; structural problems found
    after the fact land in `violations` so an audit can assert it stays empty.
    """

    def __init__(self, keep_records: bool = False):
        self.keep_records = keep_records
        self.counts: dict[str, int] = {}
        self.records: list[dict] = []
        self.violations: list[str] = []

    def append(self, kind: str, **meta) -> None:
        if kind not in ALLOWED_MESSAGE_KINDS:
            raise DomainError(f"message kind {kind!r} not allowed on this boundary")
        self.counts[kind] = self.counts.get(kind, 0) + 1
        if self.keep_records:
            self.records.append({"kind": kind, **meta})

    def summary(self) -> dict:
        return {
            "counts": dict(sorted(self.counts.items())),
            "kept_records": len(self.records),
            "violations": list(self.violations),
        }


class MecServer:
    """Edge-server cache plus the slot-scoped request-batch lifecycle.

    At most one batch is ever live; it can be erased only after the global
    prediction for its slot was made, and erasing drops every request record.
    """

    def __init__(self, capacity: int, message_log: MessageLog):
        self.cache = CacheState((), capacity, owner="server")
        self.message_log = message_log
        self._batch: GlobalRequestBatch | None = None
        self._predicted = False

    def receive_batch(self, batch: GlobalRequestBatch) -> None:
        if self._batch is not None:
            raise OrderingError(
                f"batch for slot {self._batch.slot} still live; erase it first"
            )
        self._batch = batch
        self._predicted = False
        self.message_log.append(
            "request_batch", slot=batch.slot, entries=batch.entries
        )

    def live_batch(self) -> GlobalRequestBatch:
        if self._batch is None:
            raise OrderingError("no live batch (already erased or never received)")
        return self._batch

    def mark_predicted(self) -> None:
        if self._batch is None:
            raise OrderingError("no live batch to predict from")
        self._predicted = True

    def erase_batch(self, t: int) -> None:
        if self._batch is None:
            raise OrderingError("nothing to erase")
        if self._batch.slot != t:
            raise OrderingError(f"live batch is for slot {self._batch.slot}, not {t}")
        if not self._predicted:
            raise OrderingError("erase before the global prediction for this slot")
        self._batch = None
        self._predicted = False

    def request_records(self) -> tuple[tuple[int, int, int], ...]:
        """Introspection hook: every per-UE request record currently held."""
        if self._batch is None:
            return ()
        return tuple((ue, c, self._batch.slot) for ue, c in self._batch.entries)


@dataclass(frozen=True)
class SlotRequests:
    t: int
    requests: dict[int, int]


class EdgeEnvironment:
    """Owns the hidden per-UE demand dynamics and the canonical request trace.

    All randomness flows through named streams derived from the master seed;
    the draw sequence per slot depends only on the demand process, never on
    any caching policy, so the request trace is policy-invariant.
    """

    def __init__(self, catalog: Catalog, profiles: list[UserProfile], rngs, record_trace=False):
        self.catalog = catalog
        self._profiles = profiles
        self._rngs = rngs  # one generator per UE, aligned with profiles
        self.t = -1
        self.record_trace = record_trace
        self.request_trace: list[tuple[int, ...]] = []

    @classmethod
    def build(
        cls,
        catalog: Catalog,
        n_ues: int,
        window_len: int,
        streams,
        stationary: bool = False,
        record_trace: bool = False,
    ) -> "EdgeEnvironment":
        """Generate hidden dynamics from the 'env/setup' stream.

        Per UE: a uniformly sized exponent set with uniform exponents and
        flat-Dirichlet transition rows (a single frozen exponent when
        `stationary`), a private rank permutation, and a sticky three-state
        arrival-rate chain.
        """
        setup = streams("env/setup")
        n = catalog.n_contents
        profiles = []
        rngs = []
        lam_matrix = _sticky_matrix(len(ARRIVAL_RATES), ARRIVAL_STICKINESS)
        for ue_id in range(1, n_ues + 1):
            if stationary:
                g = 1
                alphas = setup.uniform(*EXPONENT_RANGE, size=1)
                matrix = np.ones((1, 1))
                start = 0
            else:
                g = int(setup.choice(EXPONENT_STATE_CHOICES))
                alphas = setup.uniform(*EXPONENT_RANGE, size=g)
                matrix = np.vstack([setup.dirichlet(np.ones(g)) for _ in range(g)])
                # Dirichlet rows can miss exact row sums by an ulp; renormalize.
                matrix = matrix / matrix.sum(axis=1, keepdims=True)
                start = int(setup.integers(g))
            perm = setup.permutation(np.arange(1, n + 1))
            popularity = MarkovPopularityModel(alphas, matrix, start, perm, catalog)
            arrival = MarkovChain(
                ARRIVAL_RATES, lam_matrix, int(setup.integers(len(ARRIVAL_RATES)))
            )
            profiles.append(UserProfile(ue_id, arrival, popularity, window_len))
            rngs.append(streams(f"env/ue{ue_id}"))
        return cls(catalog, profiles, rngs, record_trace=record_trace)

    @property
    def n_ues(self) -> int:
        return len(self._profiles)

    def generate_slot(self) -> SlotRequests:
        """Advance every UE's hidden chains one slot and draw requests."""
        self.t += 1
        requests = {}
        for profile, rng in zip(self._profiles, self._rngs):
            profile.popularity.step(rng)
            profile.arrival_chain.step(rng)
            requests[profile.ue_id] = generate_request(profile, self.t, rng)
        if self.record_trace:
            self.request_trace.append(tuple(requests[p.ue_id] for p in self._profiles))
        return SlotRequests(self.t, requests)


def _sticky_matrix(k: int, stay: float) -> np.ndarray:
    off = (1.0 - stay) / (k - 1) if k > 1 else 0.0
    m = np.full((k, k), off)
    np.fill_diagonal(m, stay if k > 1 else 1.0)
    return m
