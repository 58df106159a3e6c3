"""Command-line entry points: run, sweep, audit, gradcheck.

Flags mirror the config-file keys; `--seed` overrides the file.  Failures
exit nonzero after printing one machine-readable JSON error line to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import ddpg, harness
from .environment import ALLOWED_MESSAGE_KINDS
from .harness import ConfigError, ExperimentConfig, load_config


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, type=str)


def _config_from_args(args) -> ExperimentConfig:
    overrides = {}
    for f in dataclasses.fields(ExperimentConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            overrides[f.name] = harness._coerce(f.name, raw)
    if args.config:
        return load_config(args.config, overrides)
    config = dataclasses.replace(ExperimentConfig(), **overrides)
    violations = config.validate()
    if violations:
        raise ConfigError(violations)
    return config


def _fail(kind: str, detail) -> int:
    sys.stderr.write(json.dumps({"error": kind, "detail": detail}) + "\n")
    return 2


def cmd_run(args) -> int:
    try:
        config = _config_from_args(args)
    except ConfigError as exc:
        return _fail("config", exc.violations)
    result = harness.run_experiment(
        config, outdir=args.out, keep_messages=args.keep_messages
    )
    s = result.summary
    print(
        f"policy={s.policy} seed={s.seed} slots={s.eval_slots} "
        f"mean_h0={s.mean_h0:.4f} sd_h0={s.sd_h0:.4f} private={s.private}"
    )
    return 0


def cmd_sweep(args) -> int:
    try:
        config = _config_from_args(args)
    except ConfigError as exc:
        return _fail("config", exc.violations)
    values = [int(v) for v in args.values.split(",") if v.strip()]
    seeds = [int(v) for v in args.seeds.split(",") if v.strip()]
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    try:
        rows, table = harness.sweep(
            config, args.axis, values, seeds=seeds, policies=policies,
            jobs=args.jobs, outdir=args.out,
        )
    except ConfigError as exc:
        return _fail("config", exc.violations)
    for line in table:
        print(
            f"policy={line['policy']} value={line['value']} "
            f"mean_h0={line['mean_h0']:.4f} sd={line['sd_over_seeds']:.4f}"
        )
    return 0


def cmd_audit(args) -> int:
    """Validate the privacy-relevant artifacts of a finished run directory."""
    problems = []
    msg_path = os.path.join(args.run_dir, "message_summary.json")
    if not os.path.exists(msg_path):
        problems.append(f"missing {msg_path}")
    else:
        with open(msg_path) as fh:
            summary = json.load(fh)
        for kind in summary.get("counts", {}):
            if kind not in ALLOWED_MESSAGE_KINDS:
                problems.append(f"disallowed message kind {kind!r}")
        if summary.get("violations"):
            problems.append(f"recorded violations: {summary['violations']}")
    fl_path = os.path.join(args.run_dir, "fl_rounds.jsonl")
    if os.path.exists(fl_path):
        with open(fl_path) as fh:
            for lineno, line in enumerate(fh, 1):
                rec = json.loads(line)
                if set(rec) != {"round", "uploads", "broadcast"}:
                    problems.append(f"fl_rounds line {lineno}: unexpected fields {sorted(rec)}")
                    continue
                digests = list(rec["uploads"].values()) + [rec["broadcast"]]
                for d in digests:
                    if not (isinstance(d, str) and len(d) == 64
                            and all(c in "0123456789abcdef" for c in d)):
                        problems.append(f"fl_rounds line {lineno}: non-digest payload {d!r}")
    if problems:
        for p in problems:
            print(f"FAIL {p}")
        return _fail("audit", problems)
    print("PASS message log kinds within the allowed boundary set")
    print("PASS federated round log carries parameter digests only")
    return 0


def cmd_gradcheck(args) -> int:
    report = ddpg.run_gradient_checks(seed=args.seed, draws=args.draws)
    failed = False
    for name, err in report:
        ok = err <= 1e-4
        failed = failed or not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3e}")
    if failed:
        return _fail("gradcheck", {name: err for name, err in report})
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="edgecache")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="single experiment run")
    _add_config_flags(p_run)
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--keep-messages", action="store_true")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="axis sweep over policies and seeds")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=sorted(harness.SWEEP_AXES))
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--seeds", default="0,1,2,3,4")
    p_sweep.add_argument("--policies", default=",".join(harness.POLICIES))
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_audit = sub.add_parser("audit", help="privacy audit of a run directory")
    p_audit.add_argument("--run-dir", required=True)
    p_audit.set_defaults(fn=cmd_audit)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--draws", type=int, default=20)
    p_grad.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
