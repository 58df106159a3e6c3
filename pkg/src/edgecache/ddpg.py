"""Deterministic policy-gradient caching agent.

The actor maps the renewed state (cache indicator plus predicted popularity)
to a per-content score vector; a ranking decoder turns those scores into a
balanced eviction/admission action for whatever capacity the acting entity
has.  The critic regresses discounted hit-rate returns over replayed
transitions; the actor ascends the critic's action gradient.  Training runs
at the server only; devices receive the actor by broadcast and act greedily.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cache import CacheAction, CacheState, apply_action, hit_rate_server, hit_rate_ue, sliding_average
from .environment import route_and_collect
from .federated import predict_for_server
from .nn import (
    AdamState,
    Params,
    adam_step,
    backward,
    clone_params,
    forward,
    init_dense,
    params_digest,
    soft_update,
)

REPLAY_START = 256  # minimum stored transitions before updates begin


@dataclass(frozen=True)
class ExplorationSchedule:
    """Per-episode Gaussian noise scale: sigma0 * decay^episode, floored."""

    sigma0: float = 0.3
    decay: float = 0.999
    floor: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.floor <= self.sigma0:
            raise ValueError(f"need 0 <= floor <= sigma0, got {self}")

    def value(self, episode: int) -> float:
        return max(self.floor, self.sigma0 * self.decay**episode)


def state_vector(cache: CacheState, popularity: np.ndarray, n_contents: int) -> np.ndarray:
    """Renewed state: binary cache membership over the catalog, then the
    predicted popularity vector.  Length 2N."""
    indicator = np.zeros(n_contents)
    for c in cache.entries:
        indicator[c - 1] = 1.0
    return np.concatenate([indicator, np.asarray(popularity, dtype=float)])


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray


class ReplayBuffer:
    """FIFO ring of transitions with uniform minibatch sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = int(capacity)
        self._s = np.empty((capacity, state_dim))
        self._a = np.empty((capacity, action_dim))
        self._r = np.empty(capacity)
        self._s2 = np.empty((capacity, state_dim))
        self._next = 0
        self.size = 0

    def push(self, state, action, reward, next_state) -> None:
        i = self._next
        self._s[i] = state
        self._a[i] = action
        self._r[i] = reward
        self._s2[i] = next_state
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, k: int):
        """k distinct transitions as stacked arrays (S, A, R, S2)."""
        idx = rng.choice(self.size, size=k, replace=False)
        return self._s[idx], self._a[idx], self._r[idx], self._s2[idx]

    def transitions(self) -> list[Transition]:
        return [
            Transition(self._s[i].copy(), self._a[i].copy(), float(self._r[i]), self._s2[i].copy())
            for i in range(self.size)
        ]


def actor_scores(theta_a: Params, state: np.ndarray, noise_sigma: float,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Policy output with optional iid Gaussian exploration noise."""
    if noise_sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {noise_sigma}")
    out, _ = forward(theta_a, state)
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    return out


def decode_action(scores: np.ndarray, cache: CacheState, new_files) -> CacheAction:
    """Feasible action from a score vector: keep the top-capacity candidates.

    Candidates are the cached entries plus the new files, ranked by score
    with ties broken toward the lower content id.  Below capacity the cache
    only grows: the best-scored new files fill the free space.
    """
    new_files = tuple(new_files)
    for f in new_files:
        if f in cache.entries:
            raise ValueError(f"new file {f} already cached")
    if len(set(new_files)) != len(new_files):
        raise ValueError(f"duplicate new files: {new_files}")

    if not cache.is_full:
        free = cache.capacity - len(cache.entries)
        ranked = sorted(new_files, key=lambda c: (-scores[c - 1], c))
        taken = set(ranked[:free])
        return CacheAction(
            evict=(0,) * len(cache.entries),
            admit=tuple(1 if f in taken else 0 for f in new_files),
        )

    candidates = cache.entries + new_files
    ranked = sorted(candidates, key=lambda c: (-scores[c - 1], c))
    kept = set(ranked[: cache.capacity])
    return CacheAction(
        evict=tuple(0 if e in kept else 1 for e in cache.entries),
        admit=tuple(1 if f in kept else 0 for f in new_files),
    )


def critic_q(theta_c: Params, state: np.ndarray, action_scores: np.ndarray) -> float:
    """Scalar action-value estimate for one (state, action) pair."""
    out, _ = forward(theta_c, np.concatenate([state, action_scores]))
    return float(out[0])


def critic_update(
    theta_c: Params,
    theta_c_target: Params,
    theta_a_target: Params,
    minibatch,
    chi: float,
    adam: AdamState,
) -> float:
    """One MSE regression step toward the bootstrapped targets.

    Targets come from the target actor/critic on the stored next states;
    this is a continuing task, so every target bootstraps.
    """
    if not 0.0 <= chi <= 1.0:
        raise ValueError(f"discount {chi} outside [0, 1]")
    s, a, r, s2 = minibatch
    if len(r) == 0:
        raise ValueError("empty minibatch")
    a2, _ = forward(theta_a_target, s2)
    q2, _ = forward(theta_c_target, np.hstack([s2, a2]))
    y = r + chi * q2[:, 0]
    out, tape = forward(theta_c, np.hstack([s, a]))
    q = out[:, 0]
    err = q - y
    loss = float(np.mean(err * err))
    gout = (2.0 * err / len(r))[:, None]
    grads, _ = backward(theta_c, tape, gout)
    adam_step(adam, theta_c, grads)
    return loss


def actor_policy_gradient(theta_a: Params, critic, states: np.ndarray):
    """Gradient of mean_s Q(s, pi(s)) w.r.t. the actor parameters.

    `critic` is either critic parameters or a callable
    `(states, actions) -> (q values, dq/da)` so analytic value landscapes can
    drive the same update.  Returns (gradients, objective value).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    batch = states.shape[0]
    actions, tape_a = forward(theta_a, states)
    if tape_a.squeezed:
        actions = actions[None, :]
    if callable(critic):
        q, dq_da = critic(states, actions)
    else:
        out, tape_c = forward(critic, np.hstack([states, actions]))
        q = out[:, 0]
        _, gin = backward(critic, tape_c, np.ones((batch, 1)))
        dq_da = gin[:, states.shape[1]:]
    gout = np.asarray(dq_da, dtype=float) / batch
    if tape_a.squeezed:
        gout = gout[0]
    grads, _ = backward(theta_a, tape_a, gout)
    return grads, float(np.mean(q))


def actor_update(theta_a: Params, critic, states: np.ndarray, adam: AdamState) -> float:
    """Ascent step on the policy objective; critic parameters untouched."""
    if len(np.atleast_2d(states)) == 0:
        raise ValueError("empty minibatch")
    grads, objective = actor_policy_gradient(theta_a, critic, states)
    adam_step(adam, theta_a, [(-dw, -db) for dw, db in grads])
    return objective


def new_actor(n_contents: int, hidden, rng) -> Params:
    dims = [2 * n_contents, *hidden, n_contents]
    return init_dense(dims, ["relu"] * len(hidden) + ["tanh"], rng)


def new_critic(n_contents: int, hidden, rng) -> Params:
    dims = [3 * n_contents, *hidden, 1]
    return init_dense(dims, ["relu"] * len(hidden) + ["linear"], rng)


# --- system plumbing shared by training and evaluation loops ---------------


@dataclass
class CachingSystem:
    """Everything one experiment run operates on."""

    env: object  # EdgeEnvironment
    server: object  # MecServer
    nodes: list  # list[UserNode]
    theta_g: Params | None
    message_log: object
    streams: object  # StreamFactory
    n_contents: int
    window_len: int


@dataclass(frozen=True)
class SlotView:
    """Agent-visible outcome of one slot at the server."""

    t: int
    requests: dict[int, int]
    missed: dict[int, bool]
    batch_size: int
    h0: float | None
    server_new: tuple[int, ...]
    state: np.ndarray | None


def observe_server_slot(system: CachingSystem, theta_g: Params | None) -> SlotView:
    """Advance the environment one slot and run the server's receive /
    predict / erase lifecycle.  With `theta_g` None (classical policies) the
    prediction step is skipped and no state vector is built."""
    env = system.env
    server = system.server
    slot = env.generate_slot()
    ue_caches = {node.ue_id: node.cache for node in system.nodes}
    batch, server_new, missed = route_and_collect(
        slot.t, slot.requests, ue_caches, server.cache
    )
    server.receive_batch(batch)
    h0 = hit_rate_server(len(server_new), batch.size)
    if theta_g is not None:
        p_hat = predict_for_server(theta_g, server, system.n_contents, system.window_len)
        state = state_vector(server.cache, p_hat, system.n_contents)
    else:
        server.mark_predicted()
        state = None
    deliveries = batch.entries
    server.erase_batch(slot.t)
    if deliveries:
        system.message_log.append("content_delivery", slot=slot.t, entries=deliveries)
    assert server.request_records() == (), "request records survived the erase"
    return SlotView(slot.t, slot.requests, missed, batch.size, h0, server_new, state)


def _shared_predictor(nodes) -> Params | None:
    theta = nodes[0].predictor
    return theta if all(node.predictor is theta for node in nodes) else None


def ue_slot_step(system: CachingSystem, broadcast_actor: Params, view: SlotView):
    """Device-side slot handling: observe, predict, act with the broadcast
    actor (no noise, no learning), update the hit-rate series.

    Returns per-device (hit, sliding average) pairs in node order.
    """
    nodes = system.nodes
    n = system.n_contents
    for node in nodes:
        node.observe(view.requests[node.ue_id])
    shared = _shared_predictor(nodes)
    encodings = np.stack([node.window_encoding() for node in nodes])
    if shared is not None:
        preds, _ = forward(shared, encodings)
    else:
        preds = np.stack([forward(node.predictor, enc)[0] for node, enc in zip(nodes, encodings)])
    states = np.stack(
        [state_vector(node.cache, preds[i], n) for i, node in enumerate(nodes)]
    )
    scores, _ = forward(broadcast_actor, states)
    metrics = []
    for i, node in enumerate(nodes):
        was_missed = view.missed[node.ue_id]
        hi = hit_rate_ue(int(was_missed))
        node.hits.append(hi)
        savg = sliding_average(node.hits)
        new_files = (view.requests[node.ue_id],) if was_missed else ()
        action = decode_action(scores[i], node.cache, new_files)
        node.cache = apply_action(node.cache, new_files, action)
        metrics.append((hi, savg))
    return metrics


def ue_act(theta_a: Params, ue, new_files) -> CacheAction:
    """Algorithm run on one device: predict locally, build the renewed state,
    run the broadcast actor deterministically, decode against the device's
    own capacity.  No critic, no training."""
    from .federated import predict_local

    prediction = predict_local(ue.predictor, ue.window_encoding())
    s = state_vector(ue.cache, prediction, ue.n_contents)
    scores = actor_scores(theta_a, s, 0.0)
    return decode_action(scores, ue.cache, new_files)


@dataclass
class EpisodeStats:
    episode: int
    mean_h0: float
    mean_critic_loss: float
    sigma: float


@dataclass
class TrainResult:
    actor: Params
    critic: Params
    actor_target: Params
    critic_target: Params
    episode_log: list[EpisodeStats]
    replay: ReplayBuffer


def train(system: CachingSystem, config) -> TrainResult:
    """Server-side training loop.

    Per slot: receive the batch, predict global popularity, observe the
    renewed state and the hit-rate reward, erase the batch, act with
    exploration noise, store the previous slot's completed transition
    (s, a, r, s'), then regress the critic and ascend the actor on one
    sampled minibatch, soft-updating the targets every few steps.  Devices
    act in the same slots with the actor snapshot broadcast at the start of
    the episode.  No-traffic slots never reach the replay buffer.
    """
    if not 0.0 <= config.discount <= 1.0:
        raise ValueError(f"discount {config.discount} outside [0, 1]")
    n = system.n_contents
    streams = system.streams
    init_rng = streams("agent/init")
    noise_rng = streams("agent/noise")
    replay_rng = streams("agent/replay")
    actor = new_actor(n, config.actor_hidden, init_rng)
    critic = new_critic(n, config.critic_hidden, init_rng)
    actor_target = clone_params(actor)
    critic_target = clone_params(critic)
    adam_a = AdamState(lr=config.learning_rate)
    adam_c = AdamState(lr=config.learning_rate)
    replay = ReplayBuffer(config.replay_capacity, 2 * n, n)
    schedule = ExplorationSchedule(config.sigma0, config.sigma_decay, config.sigma_floor)
    start_after = max(config.batch_size, REPLAY_START)

    pending: tuple[np.ndarray, np.ndarray, float | None] | None = None
    episode_log: list[EpisodeStats] = []
    update_steps = 0
    for episode in range(config.episodes):
        sigma = schedule.value(episode)
        ue_actor = clone_params(actor)
        system.message_log.append(
            "actor_broadcast", episode=episode, digest=params_digest(ue_actor)
        )
        h0_sum, h0_n, loss_sum, loss_n = 0.0, 0, 0.0, 0
        for _ in range(config.slots_per_episode):
            view = observe_server_slot(system, system.theta_g)
            if pending is not None and pending[2] is not None:
                replay.push(pending[0], pending[1], pending[2], view.state)
            scores = actor_scores(actor, view.state, sigma, noise_rng)
            action = decode_action(scores, system.server.cache, view.server_new)
            system.server.cache = apply_action(
                system.server.cache, view.server_new, action
            )
            pending = (view.state, scores, view.h0)
            ue_slot_step(system, ue_actor, view)
            if replay.size >= start_after:
                minibatch = replay.sample(replay_rng, config.batch_size)
                loss_sum += critic_update(
                    critic, critic_target, actor_target, minibatch,
                    config.discount, adam_c,
                )
                loss_n += 1
                actor_update(actor, critic, minibatch[0], adam_a)
                update_steps += 1
                if update_steps % config.target_interval == 0:
                    soft_update(actor_target, actor, config.soft_update)
                    soft_update(critic_target, critic, config.soft_update)
            if view.h0 is not None:
                h0_sum += view.h0
                h0_n += 1
        episode_log.append(
            EpisodeStats(
                episode,
                h0_sum / h0_n if h0_n else float("nan"),
                loss_sum / loss_n if loss_n else float("nan"),
                sigma,
            )
        )
    return TrainResult(actor, critic, actor_target, critic_target, episode_log, replay)


# --- gradient verification used by tests and the `gradcheck` CLI verb ------


def run_gradient_checks(seed: int = 0, draws: int = 20, delta: float = 1e-5):
    """Finite-difference verification of every gradient path in the agent.

    Small instances of the production architectures (same activation
    patterns) checked over full parameter vectors; returns
    [(name, max relative error)].
    """
    from .nn import finite_difference_gradient, flatten_grads, max_relative_error

    rng = np.random.default_rng(seed)
    n = 4
    results = []

    def check(name, params, loss_and_grads):
        worst = 0.0
        for _ in range(draws):
            for layer in params:
                layer.w[...] = rng.uniform(-0.8, 0.8, size=layer.w.shape)
                layer.b[...] = rng.uniform(-0.5, 0.5, size=layer.b.shape)
            loss_fn, analytic = loss_and_grads()
            fd = finite_difference_gradient(loss_fn, params, delta)
            worst = max(worst, max_relative_error(flatten_grads(analytic), fd))
        results.append((name, worst))

    # predictor: relu stack with softmax output, cross-entropy loss
    pred = new_predictor_small = init_dense([10, 8, n], ["relu", "softmax"], rng)
    xs = rng.uniform(0, 1, size=(5, 10))
    ys = rng.integers(n, size=5)

    def pred_case():
        def loss_fn(p):
            out, _ = forward(p, xs)
            return float(-np.log(out[np.arange(5), ys]).mean())

        out, tape = forward(pred, xs)
        gout = np.zeros_like(out)
        gout[np.arange(5), ys] = -1.0 / (out[np.arange(5), ys] * 5)
        grads, _ = backward(pred, tape, gout)
        return loss_fn, grads

    check("predictor", pred, pred_case)

    # actor: tanh head, mean-of-outputs probe loss
    actor = init_dense([2 * n, 6, n], ["relu", "tanh"], rng)
    s_in = rng.uniform(-1, 1, size=(5, 2 * n))
    probe = rng.uniform(-1, 1, size=(5, n))

    def actor_case():
        def loss_fn(p):
            out, _ = forward(p, s_in)
            return float((out * probe).mean())

        out, tape = forward(actor, s_in)
        grads, _ = backward(actor, tape, probe / probe.size * n)
        return loss_fn, grads

    check("actor", actor, actor_case)

    # critic: linear head, MSE against fixed targets
    critic = init_dense([3 * n, 6, 1], ["relu", "linear"], rng)
    sa = rng.uniform(-1, 1, size=(5, 3 * n))
    targets = rng.uniform(0, 1, size=5)

    def critic_case():
        def loss_fn(p):
            out, _ = forward(p, sa)
            return float(np.mean((out[:, 0] - targets) ** 2))

        out, tape = forward(critic, sa)
        grads, _ = backward(critic, tape, (2 * (out[:, 0] - targets) / 5)[:, None])
        return loss_fn, grads

    check("critic", critic, critic_case)

    # composed objective: mean_s Q(s, pi(s)) differentiated through both nets
    actor2 = init_dense([2 * n, 6, n], ["relu", "tanh"], rng)
    critic2 = init_dense([3 * n, 6, 1], ["relu", "linear"], rng)
    for layer in critic2:
        layer.w[...] = rng.uniform(-0.8, 0.8, size=layer.w.shape)
        layer.b[...] = rng.uniform(-0.5, 0.5, size=layer.b.shape)
    states = rng.uniform(-1, 1, size=(5, 2 * n))

    def composed_case():
        def loss_fn(p):
            a, _ = forward(p, states)
            q, _ = forward(critic2, np.hstack([states, a]))
            return float(q[:, 0].mean())

        grads, _ = actor_policy_gradient(actor2, critic2, states)
        return loss_fn, grads

    check("actor-through-critic", actor2, composed_case)
    return results
