"""Experiment configuration, orchestration, metrics, and emission.

A run is fully determined by (config, master seed): hidden demand dynamics,
agent initialization, exploration, and replay sampling all draw from named
substreams, so identical configs produce byte-identical metric CSVs and the
request trace never depends on the caching policy.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import baselines, ddpg, federated
from .cache import CacheState, HitRateSeries, apply_action, hit_rate_ue, sliding_average
from .environment import Catalog, EdgeEnvironment, MecServer, MessageLog
from .federated import FlRoundLog, UserNode
from .nn import clone_params, save_params
from .streams import StreamFactory

POLICIES = ("ddpg",) + baselines.POLICY_KINDS
NON_PRIVATE_POLICIES = frozenset({"lru", "lfu", "fifo"})

CSV_HEADER = "t,policy,seed,h0,ue_id,hi,hi_savg"


class ConfigError(ValueError):
    """Invalid experiment configuration; carries every violation found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class ExperimentConfig:
    n_contents: int = 24
    n_ues: int = 6
    m_server: int = 9
    m_ue: int | tuple[int, ...] = 2
    history_window: int = 10  # H; devices keep H+1 outcomes
    hit_window: int = 100  # T_h
    slots_per_episode: int = 200
    episodes: int = 4000
    discount: float = 0.95
    sigma0: float = 0.3
    sigma_decay: float = 0.999
    sigma_floor: float = 0.02
    target_interval: int = 4
    soft_update: float = 0.001
    learning_rate: float = 1e-4
    batch_size: int = 64
    replay_capacity: int = 100_000
    fl_epochs: int = 5
    fl_rounds: int = 8
    fl_warmup_slots: int = 2400
    fl_learning_rate: float = 3e-4
    fl_personalization_epochs: int = 2
    burn_in_slots: int = 2000
    eval_slots: int = 1024
    stationary: bool = False
    policy: str = "ddpg"
    seed: int = 0
    actor_hidden: tuple[int, ...] = (128, 128)
    critic_hidden: tuple[int, ...] = (128, 128)
    predictor_hidden: tuple[int, ...] = (128, 128)

    def m_ue_list(self) -> tuple[int, ...]:
        if isinstance(self.m_ue, int):
            return (self.m_ue,) * self.n_ues
        return tuple(self.m_ue)

    def validate(self) -> list[str]:
        v = []
        if self.n_contents < 2:
            v.append(f"n_contents must be >= 2, got {self.n_contents}")
        if self.n_ues < 1:
            v.append(f"n_ues must be >= 1, got {self.n_ues}")
        if self.m_server < 1:
            v.append(f"m_server must be >= 1, got {self.m_server}")
        if self.m_server > self.n_contents:
            v.append(f"m_server {self.m_server} exceeds n_contents {self.n_contents}")
        m_ues = self.m_ue_list()
        if len(m_ues) != self.n_ues:
            v.append(f"m_ue list length {len(m_ues)} != n_ues {self.n_ues}")
        for m in m_ues:
            if not 1 <= m <= self.m_server:
                v.append(f"m_ue {m} outside [1, m_server={self.m_server}]")
        for name in ("history_window", "hit_window", "slots_per_episode",
                     "target_interval", "batch_size", "fl_epochs", "eval_slots"):
            if getattr(self, name) < 1:
                v.append(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("episodes", "fl_rounds", "fl_warmup_slots", "burn_in_slots",
                     "fl_personalization_epochs", "seed"):
            if getattr(self, name) < 0:
                v.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.discount <= 1.0:
            v.append(f"discount must be in [0, 1], got {self.discount}")
        if not 0.0 <= self.soft_update <= 1.0:
            v.append(f"soft_update must be in [0, 1], got {self.soft_update}")
        if not 0.0 <= self.sigma_floor <= self.sigma0:
            v.append(f"need 0 <= sigma_floor <= sigma0, got {self.sigma_floor}, {self.sigma0}")
        if not 0.0 < self.sigma_decay <= 1.0:
            v.append(f"sigma_decay must be in (0, 1], got {self.sigma_decay}")
        for name in ("learning_rate", "fl_learning_rate"):
            if getattr(self, name) <= 0:
                v.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.replay_capacity < self.batch_size:
            v.append(
                f"replay_capacity {self.replay_capacity} below batch_size {self.batch_size}"
            )
        if self.policy not in POLICIES:
            v.append(f"policy must be one of {POLICIES}, got {self.policy!r}")
        for name in ("actor_hidden", "critic_hidden", "predictor_hidden"):
            dims = getattr(self, name)
            if not dims or any(d < 1 for d in dims):
                v.append(f"{name} must be positive layer widths, got {dims}")
        return v


_TUPLE_FIELDS = {"m_ue", "actor_hidden", "critic_hidden", "predictor_hidden"}


def _coerce(name: str, raw: str):
    ftypes = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    if name not in ftypes:
        raise ConfigError([f"unknown config key {name!r}"])
    raw = raw.strip()
    if name in _TUPLE_FIELDS:
        parts = [p for p in raw.split(",") if p.strip()]
        values = tuple(int(p) for p in parts)
        if name == "m_ue" and len(values) == 1:
            return values[0]
        return values
    if name == "stationary":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError([f"stationary must be true/false, got {raw!r}"])
    if name == "policy":
        return raw
    current = getattr(ExperimentConfig(), name)
    if isinstance(current, bool):
        return raw.lower() in ("true", "1", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Flat key=value config file; '#' comments; unknown keys are errors."""
    values = {}
    errors = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                errors.append(f"line {lineno}: expected key = value, got {line!r}")
                continue
            key, raw = line.split("=", 1)
            key = key.strip()
            try:
                values[key] = _coerce(key, raw)
            except ConfigError as exc:
                errors.extend(f"line {lineno}: {v}" for v in exc.violations)
            except ValueError as exc:
                errors.append(f"line {lineno}: bad value for {key}: {exc}")
    if errors:
        raise ConfigError(errors)
    for key, val in (overrides or {}).items():
        values[key] = val
    config = ExperimentConfig(**values)
    violations = config.validate()
    if violations:
        raise ConfigError(violations)
    return config


@dataclass(frozen=True)
class SlotMetrics:
    """One evaluation slot: server hit rate (None on no traffic) and per-UE
    (hit, sliding average) pairs in UE order."""

    t: int
    h0: float | None
    ue: tuple[tuple[int, float], ...]


@dataclass
class RunSummary:
    policy: str
    seed: int
    eval_slots: int
    traffic_slots: int
    mean_h0: float
    sd_h0: float
    ue_mean_hit: tuple[float, ...]
    ue_mean_savg: tuple[float, ...]
    private: bool

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    config: ExperimentConfig
    trace: list[SlotMetrics]
    summary: RunSummary
    episode_log: list
    round_log: FlRoundLog
    message_log: MessageLog
    actor: list | None = None
    critic: list | None = None
    system: object | None = None


def _build_system(config: ExperimentConfig, keep_messages: bool, record_trace: bool):
    streams = StreamFactory(config.seed)
    catalog = Catalog(config.n_contents)
    window_len = config.history_window + 1
    env = EdgeEnvironment.build(
        catalog,
        config.n_ues,
        window_len,
        streams,
        stationary=config.stationary,
        record_trace=record_trace,
    )
    message_log = MessageLog(keep_records=keep_messages)
    server = MecServer(config.m_server, message_log)
    predictor = federated.new_predictor(
        config.n_contents, window_len, config.predictor_hidden, streams("fl/init")
    )
    nodes = []
    for ue_id, m in zip(range(1, config.n_ues + 1), config.m_ue_list()):
        node = UserNode(
            ue_id=ue_id,
            cache=CacheState((), m, owner=f"ue{ue_id}"),
            n_contents=config.n_contents,
            window_len=window_len,
            predictor=predictor,
            hits=HitRateSeries(config.hit_window),
        )
        if config.policy in baselines.POLICY_KINDS:
            node.policy_state = baselines.PolicyState()
        nodes.append(node)
    system = ddpg.CachingSystem(
        env=env,
        server=server,
        nodes=nodes,
        theta_g=predictor,
        message_log=message_log,
        streams=streams,
        n_contents=config.n_contents,
        window_len=window_len,
    )
    return system


def _baseline_slot(system, config, kind, server_state, ue_rngs, view):
    """Classical-policy handling of one slot at the server and every device."""
    server = system.server
    for ue_id in sorted(view.requests):
        if view.missed[ue_id]:
            baselines.baseline_touch(kind, server_state, view.requests[ue_id])
    action = baselines.baseline_decide(
        kind, server_state, server.cache, view.server_new,
        ue_rngs.get("server"),
    )
    server.cache = apply_action(server.cache, view.server_new, action)
    metrics = []
    for node in system.nodes:
        req = view.requests[node.ue_id]
        node.observe(req)
        baselines.baseline_touch(kind, node.policy_state, req)
        was_missed = view.missed[node.ue_id]
        hi = hit_rate_ue(int(was_missed))
        node.hits.append(hi)
        savg = sliding_average(node.hits)
        new_files = (req,) if was_missed else ()
        ue_action = baselines.baseline_decide(
            kind, node.policy_state, node.cache, new_files, ue_rngs.get(node.ue_id)
        )
        node.cache = apply_action(node.cache, new_files, ue_action)
        metrics.append((hi, savg))
    return metrics


def run_experiment(
    config: ExperimentConfig,
    outdir=None,
    keep_messages: bool = False,
    record_trace: bool = False,
) -> RunResult:
    """Warm up, train (learned policy only), then evaluate; one metric row
    per evaluation slot."""
    violations = config.validate()
    if violations:
        raise ConfigError(violations)
    system = _build_system(config, keep_messages, record_trace)
    round_log = FlRoundLog()
    episode_log: list = []
    actor = critic = None

    if config.policy == "ddpg":
        streams = system.streams
        # Rollout to accumulate device histories (and fill caches) before any
        # training; devices act with an untrained actor snapshot.
        seed_actor = ddpg.new_actor(
            config.n_contents, config.actor_hidden, streams("agent/warmup-actor")
        )
        for _ in range(config.fl_warmup_slots):
            view = ddpg.observe_server_slot(system, system.theta_g)
            scores = ddpg.actor_scores(seed_actor, view.state, 0.0)
            action = ddpg.decode_action(scores, system.server.cache, view.server_new)
            system.server.cache = apply_action(
                system.server.cache, view.server_new, action
            )
            ddpg.ue_slot_step(system, seed_actor, view)
        if config.fl_rounds > 0:
            system.theta_g = federated.run_fl_rounds(
                system.nodes,
                config.fl_rounds,
                config.fl_epochs,
                config.fl_learning_rate,
                32,
                streams,
                round_log,
                system.message_log,
            )
            federated.personalize_nodes(
                system.nodes,
                config.fl_personalization_epochs,
                config.fl_learning_rate,
                32,
                streams,
            )
        result = ddpg.train(system, config)
        actor, critic = result.actor, result.critic
        episode_log = result.episode_log
        eval_actor = clone_params(actor)
        system.message_log.append(
            "actor_broadcast", episode="final", digest=federated.params_digest(eval_actor)
        )
    else:
        kind = config.policy
        server_state = baselines.PolicyState()
        ue_rngs = {"server": system.streams("baseline/server")}
        for node in system.nodes:
            ue_rngs[node.ue_id] = system.streams(f"baseline/ue{node.ue_id}")
        for _ in range(config.burn_in_slots):
            view = ddpg.observe_server_slot(system, None)
            _baseline_slot(system, config, kind, server_state, ue_rngs, view)

    trace: list[SlotMetrics] = []
    for _ in range(config.eval_slots):
        if config.policy == "ddpg":
            view = ddpg.observe_server_slot(system, system.theta_g)
            scores = ddpg.actor_scores(eval_actor, view.state, 0.0)
            action = ddpg.decode_action(scores, system.server.cache, view.server_new)
            system.server.cache = apply_action(
                system.server.cache, view.server_new, action
            )
            ue_metrics = ddpg.ue_slot_step(system, eval_actor, view)
        else:
            view = ddpg.observe_server_slot(system, None)
            ue_metrics = _baseline_slot(system, config, kind, server_state, ue_rngs, view)
        trace.append(SlotMetrics(view.t, view.h0, tuple(ue_metrics)))

    summary = summarize(trace, config.policy, config.seed)
    result = RunResult(
        config, trace, summary, episode_log, round_log, system.message_log,
        actor, critic, system,
    )
    if outdir is not None:
        write_run_outputs(result, outdir)
    return result


def summarize(trace: list[SlotMetrics], policy: str, seed: int) -> RunSummary:
    h0 = [row.h0 for row in trace if row.h0 is not None]
    n_ues = len(trace[0].ue) if trace else 0
    ue_hits = tuple(
        float(np.mean([row.ue[i][0] for row in trace])) for i in range(n_ues)
    )
    ue_savgs = tuple(
        float(np.mean([row.ue[i][1] for row in trace])) for i in range(n_ues)
    )
    return RunSummary(
        policy=policy,
        seed=seed,
        eval_slots=len(trace),
        traffic_slots=len(h0),
        mean_h0=float(np.mean(h0)) if h0 else float("nan"),
        sd_h0=float(np.std(h0)) if h0 else float("nan"),
        ue_mean_hit=ue_hits,
        ue_mean_savg=ue_savgs,
        private=policy not in NON_PRIVATE_POLICIES,
    )


# --- emission ---------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def trace_to_csv(trace: list[SlotMetrics], policy: str, seed: int) -> str:
    """Exact row schema: per slot one server row (ue fields empty) and one
    row per UE (h0 empty); no-traffic slots leave h0 empty."""
    lines = [CSV_HEADER]
    for row in trace:
        lines.append(f"{row.t},{policy},{seed},{_fmt(row.h0)},,,")
        for ue_idx, (hi, savg) in enumerate(row.ue, start=1):
            lines.append(f"{row.t},{policy},{seed},,{ue_idx},{int(hi)},{_fmt(savg)}")
    return "\n".join(lines) + "\n"


def emit(trace: list[SlotMetrics], fmt: str, path, policy="", seed=0, sweep_table=None):
    """Write a trace as CSV, or a sweep summary as an SVG line plot."""
    if not trace and sweep_table is None:
        raise ValueError("empty trace")
    if fmt == "csv":
        with open(path, "w") as fh:
            fh.write(trace_to_csv(trace, policy, seed))
    elif fmt == "svg-plot":
        plot_sweep(sweep_table, path)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def parse_trace_csv(text: str):
    """Inverse of `trace_to_csv`; returns (trace rows, policy, seed)."""
    lines = text.strip().split("\n")
    if lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected header {lines[0]!r}")
    by_slot: dict[int, dict] = {}
    policy, seed = "", 0
    for line in lines[1:]:
        t_s, policy, seed_s, h0_s, ue_s, hi_s, savg_s = line.split(",")
        t = int(t_s)
        seed = int(seed_s)
        entry = by_slot.setdefault(t, {"h0": None, "ue": {}})
        if ue_s == "":
            entry["h0"] = float(h0_s) if h0_s else None
        else:
            entry["ue"][int(ue_s)] = (int(hi_s), float(savg_s))
    trace = []
    for t in sorted(by_slot):
        entry = by_slot[t]
        ue = tuple(entry["ue"][k] for k in sorted(entry["ue"]))
        trace.append(SlotMetrics(t, entry["h0"], ue))
    return trace, policy, seed


def write_run_outputs(result: RunResult, outdir) -> None:
    os.makedirs(outdir, exist_ok=True)
    cfg = result.config
    emit(result.trace, "csv", os.path.join(outdir, "trace.csv"),
         policy=cfg.policy, seed=cfg.seed)
    with open(os.path.join(outdir, "summary.json"), "w") as fh:
        json.dump(result.summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(outdir, "message_summary.json"), "w") as fh:
        json.dump(result.message_log.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg.policy == "ddpg":
        result.round_log.write_jsonl(os.path.join(outdir, "fl_rounds.jsonl"))
        with open(os.path.join(outdir, "training_log.csv"), "w") as fh:
            fh.write("episode,mean_h0,critic_loss,sigma\n")
            for row in result.episode_log:
                fh.write(
                    f"{row.episode},{_fmt(row.mean_h0)},"
                    f"{_fmt(row.mean_critic_loss)},{_fmt(row.sigma)}\n"
                )
        if result.actor is not None:
            save_params(result.actor, os.path.join(outdir, "actor.bin"))
            save_params(result.critic, os.path.join(outdir, "critic.bin"))


# --- sweeps -----------------------------------------------------------------

SWEEP_AXES = {
    "m0": "m_server",
    "mi": "m_ue",
    "h": "history_window",
    "n": "n_contents",
    "m_server": "m_server",
    "m_ue": "m_ue",
    "history_window": "history_window",
    "n_contents": "n_contents",
}


def _run_cell(args):
    config, keep = args
    result = run_experiment(config, keep_messages=keep)
    return result.summary.to_dict()


def sweep(
    template: ExperimentConfig,
    axis: str,
    values,
    seeds=(0, 1, 2, 3, 4),
    policies=POLICIES,
    jobs: int = 1,
    outdir=None,
):
    """One run per (policy, axis value, seed); aggregated mean and SD per
    (policy, value).  Cells are independent and may execute in parallel;
    results are identical either way."""
    if axis not in SWEEP_AXES:
        raise ConfigError([f"unknown sweep axis {axis!r}; use one of {sorted(SWEEP_AXES)}"])
    field_name = SWEEP_AXES[axis]
    cells = []
    for policy in policies:
        for value in values:
            for seed in seeds:
                cfg = dataclasses.replace(
                    template, **{field_name: value}, policy=policy, seed=seed
                )
                bad = cfg.validate()
                if bad:
                    raise ConfigError([f"axis value {value!r}: {b}" for b in bad])
                cells.append(cfg)
    if jobs > 1:
        import multiprocessing as mp

        with mp.Pool(jobs) as pool:
            summaries = pool.map(_run_cell, [(c, False) for c in cells])
    else:
        summaries = [_run_cell((c, False)) for c in cells]
    rows = []
    for cfg, summary in zip(cells, summaries):
        rows.append(
            {
                "policy": cfg.policy,
                "axis": field_name,
                "value": getattr(cfg, field_name),
                "seed": cfg.seed,
                **summary,
            }
        )
    table = aggregate_sweep(rows)
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        _write_sweep_csv(rows, os.path.join(outdir, "sweep_cells.csv"))
        _write_agg_csv(table, os.path.join(outdir, "sweep_summary.csv"))
        plot_sweep(table, os.path.join(outdir, "sweep_plot.svg"))
    return rows, table


def aggregate_sweep(rows):
    table = []
    keys = sorted({(r["policy"], r["value"]) for r in rows}, key=lambda k: (k[0], str(k[1])))
    for policy, value in keys:
        sample = [r["mean_h0"] for r in rows if r["policy"] == policy and r["value"] == value]
        sds = [r["sd_h0"] for r in rows if r["policy"] == policy and r["value"] == value]
        table.append(
            {
                "policy": policy,
                "value": value,
                "mean_h0": float(np.mean(sample)),
                "sd_over_seeds": float(np.std(sample)),
                "mean_sd_h0": float(np.mean(sds)),
                "n_seeds": len(sample),
            }
        )
    return table


def _write_sweep_csv(rows, path):
    cols = ["policy", "axis", "value", "seed", "mean_h0", "sd_h0", "traffic_slots"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in cols) + "\n")


def _write_agg_csv(table, path):
    cols = ["policy", "value", "mean_h0", "sd_over_seeds", "mean_sd_h0", "n_seeds"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in table:
            fh.write(",".join(_fmt(r[c]) for c in cols) + "\n")


def plot_sweep(table, path) -> None:
    """Mean hit rate versus the sweep axis, one line per policy."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    policies = sorted({r["policy"] for r in table})
    for policy in policies:
        pts = sorted(
            [(r["value"], r["mean_h0"]) for r in table if r["policy"] == policy]
        )
        if not pts:
            continue
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=policy)
    ax.set_xlabel("sweep value")
    ax.set_ylabel("mean hit rate")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
