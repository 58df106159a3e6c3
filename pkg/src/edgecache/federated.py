"""Federated popularity prediction.

Every device trains a next-request classifier on its own history; the server
periodically averages the uploaded parameters and broadcasts the aggregate
back.  Only parameters ever cross the boundary during training, and the
aggregate doubles as the server's global predictor, fed with the current-slot
request batch re-encoded into the shared input shape.
"""
from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cache import CacheState, HitRateSeries
from .nn import (
    AdamState,
    Params,
    adam_step,
    backward,
    clone_params,
    forward,
    init_dense,
    params_digest,
    same_architecture,
)

NO_REQUEST_CHANNEL = -1  # last slot-block position


def encoding_width(n_contents: int, window_len: int) -> int:
    return window_len * (n_contents + 1)


def encode_history(window, n_contents: int) -> np.ndarray:
    """One-hot window encoding: per slot, N content bits plus a no-request bit."""
    block = n_contents + 1
    out = np.zeros(len(window) * block)
    for i, outcome in enumerate(window):
        if outcome == 0:
            out[i * block + n_contents] = 1.0
        elif 1 <= outcome <= n_contents:
            out[i * block + outcome - 1] = 1.0
        else:
            raise ValueError(f"outcome {outcome} outside catalog")
    return out


def encode_batch(contents, n_contents: int, window_len: int) -> np.ndarray:
    """Current-slot batch as a normalized count vector, replicated into the
    window-shaped input (no-request channel zero).  Empty batch encodes to
    all zeros."""
    counts = np.zeros(n_contents)
    for c in contents:
        if not 1 <= c <= n_contents:
            raise ValueError(f"content {c} outside catalog")
        counts[c - 1] += 1.0
    block = np.zeros(n_contents + 1)
    total = counts.sum()
    if total > 0:
        block[:n_contents] = counts / total
    return np.tile(block, window_len)


def predict_local(theta: Params, encoding: np.ndarray) -> np.ndarray:
    """Next-slot popularity for one device; a softmax probability vector."""
    out, _ = forward(theta, encoding)
    return out


def predict_global(theta: Params, encoding: np.ndarray) -> np.ndarray:
    """Server-side popularity prediction from the batch encoding."""
    out, _ = forward(theta, encoding)
    return out


def predict_for_server(theta_g: Params, server, n_contents: int, window_len: int) -> np.ndarray:
    """Predict from the live batch and mark the slot's prediction done.

    Must run before the erase; reading an erased batch raises."""
    batch = server.live_batch()
    enc = encode_batch(batch.contents(), n_contents, window_len)
    p = predict_global(theta_g, enc)
    server.mark_predicted()
    return p


def new_predictor(n_contents: int, window_len: int, hidden, rng) -> Params:
    dims = [encoding_width(n_contents, window_len), *hidden, n_contents]
    acts = ["relu"] * len(hidden) + ["softmax"]
    return init_dense(dims, acts, rng)


def build_local_dataset(log, window_len: int, n_contents: int):
    """(window encoding, next-request class) pairs from one device's log.

    Slots with no request are excluded as targets but appear inside windows.
    Returns (X, y) or None when the log yields no usable pair.
    """
    xs, ys = [], []
    for end in range(window_len - 1, len(log) - 1):
        target = log[end + 1]
        if target == 0:
            continue
        window = log[end - window_len + 1 : end + 1]
        xs.append(encode_history(window, n_contents))
        ys.append(target - 1)
    if not xs:
        return None
    return np.asarray(xs), np.asarray(ys, dtype=int)


def _cross_entropy_step(theta, x, y, adam):
    out, tape = forward(theta, x)
    probs = out[np.arange(len(y)), y]
    loss = float(-np.log(np.maximum(probs, 1e-300)).mean())
    gout = np.zeros_like(out)
    gout[np.arange(len(y)), y] = -1.0 / (np.maximum(probs, 1e-300) * len(y))
    grads, _ = backward(theta, tape, gout)
    adam_step(adam, theta, grads)
    return loss


def local_train_round(
    theta: Params,
    dataset,
    epochs: int,
    adam: AdamState,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> list[float]:
    """Minibatch cross-entropy training on one device; returns epoch losses."""
    if dataset is None:
        warnings.warn("empty local dataset; skipping training round")
        return []
    x, y = dataset
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for lo in range(0, len(y), batch_size):
            idx = order[lo : lo + batch_size]
            total += _cross_entropy_step(theta, x[idx], y[idx], adam) * len(idx)
        losses.append(total / len(y))
    return losses


def _averaged(arrays, weights, n_uploads):
    """(1/I) * sum_i w_i * a_i, computed so that the result is exactly
    permutation-invariant and exactly the common value for identical
    uniform-weight uploads: shift by the elementwise min, sum the shifted
    terms in canonically sorted order, then unshift."""
    scaled = np.stack([w * a for w, a in zip(weights, arrays)])
    base = scaled.min(axis=0)
    deltas = np.sort(scaled - base, axis=0)
    return base + np.add.reduce(deltas, axis=0) / n_uploads


def fedavg(uploads: list[Params], weights) -> Params:
    """Aggregate device parameters: (1/I) * sum_i w_i * theta_i, elementwise."""
    if not uploads:
        raise ValueError("no uploads to aggregate")
    weights = [float(w) for w in weights]
    if len(weights) != len(uploads):
        raise ValueError(f"{len(weights)} weights for {len(uploads)} uploads")
    first = uploads[0]
    for other in uploads[1:]:
        if not same_architecture(first, other):
            raise ValueError("uploads have differing architectures")
    n = len(uploads)
    result = clone_params(first)
    for i, layer in enumerate(result):
        layer.w[...] = _averaged([u[i].w for u in uploads], weights, n)
        layer.b[...] = _averaged([u[i].b for u in uploads], weights, n)
    return result


@dataclass(frozen=True)
class FlRound:
    index: int
    upload_digests: tuple[tuple[int, str], ...]  # (ue_id, digest)
    broadcast_digest: str


class FlRoundLog:
    """Line-delimited record of every aggregation round; parameters only."""

    def __init__(self):
        self.rounds: list[FlRound] = []

    def append(self, rnd: FlRound) -> None:
        self.rounds.append(rnd)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rnd in self.rounds:
                fh.write(
                    json.dumps(
                        {
                            "round": rnd.index,
                            "uploads": {str(ue): d for ue, d in rnd.upload_digests},
                            "broadcast": rnd.broadcast_digest,
                        }
                    )
                    + "\n"
                )


@dataclass
class UserNode:
    """Agent-side state of one device: cache, predictor, private history."""

    ue_id: int
    cache: CacheState
    n_contents: int
    window_len: int
    predictor: Params | None = None
    policy_state: object | None = None
    window: deque = field(init=False)
    log: list[int] = field(init=False, default_factory=list)
    hits: HitRateSeries | None = None

    def __post_init__(self):
        self.window = deque([0] * self.window_len, maxlen=self.window_len)

    def observe(self, outcome: int) -> None:
        self.window.append(outcome)
        self.log.append(outcome)

    def window_encoding(self) -> np.ndarray:
        return encode_history(self.window, self.n_contents)


def broadcast(theta_g: Params, nodes, round_log: FlRoundLog | None = None,
              message_log=None, round_index: int | None = None,
              upload_digests=()) -> None:
    """Install the aggregate on every device and append the round record.

    Devices share one read-only parameter object; local training always
    clones before mutating."""
    digest = params_digest(theta_g)
    for node in nodes:
        node.predictor = theta_g
    if message_log is not None:
        message_log.append("param_broadcast", round=round_index, digest=digest)
    if round_log is not None:
        round_log.append(FlRound(round_index, tuple(upload_digests), digest))


def personalize_nodes(nodes, epochs: int, lr: float, batch_size: int, streams) -> None:
    """Post-aggregation local pass: each device trains its own copy of the
    latest broadcast on its private history and deploys that copy.  Nothing
    is uploaded, so the server-side aggregate is untouched."""
    if epochs < 1:
        return
    for node in nodes:
        dataset = build_local_dataset(node.log, node.window_len, node.n_contents)
        theta_i = clone_params(node.predictor)
        rng = streams(f"fl/ue{node.ue_id}/personalize")
        local_train_round(theta_i, dataset, epochs, AdamState(lr=lr), rng, batch_size)
        node.predictor = theta_i


def run_fl_rounds(
    nodes,
    rounds: int,
    epochs: int,
    lr: float,
    batch_size: int,
    streams,
    round_log: FlRoundLog,
    message_log,
) -> Params:
    """Alternate local training with aggregation; returns the final aggregate.

    Device datasets are built once from the histories accumulated so far.
    Uniform aggregation weights."""
    datasets = {
        node.ue_id: build_local_dataset(node.log, node.window_len, node.n_contents)
        for node in nodes
    }
    theta_g = nodes[0].predictor
    weights = [1.0] * len(nodes)
    for r in range(rounds):
        uploads = []
        digests = []
        for node in nodes:
            theta_i = clone_params(theta_g)
            adam = AdamState(lr=lr)
            rng = streams(f"fl/ue{node.ue_id}/round{r}")
            local_train_round(theta_i, datasets[node.ue_id], epochs, adam, rng, batch_size)
            uploads.append(theta_i)
            d = params_digest(theta_i)
            digests.append((node.ue_id, d))
            message_log.append("param_upload", round=r, ue=node.ue_id, digest=d)
        theta_g = fedavg(uploads, weights)
        broadcast(theta_g, nodes, round_log, message_log, r, digests)
    return theta_g
