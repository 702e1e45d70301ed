"""Command-line entry point: ``dpin <subcommand> --config <preset-or-file> [--set key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import agent, feed_sim, gradcheck, harness
from .errors import ConfigError, ConsistencyError, DataCorruptionError, DimensionError, FeasibilityError
from .model import DpinModel

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpin", description="Page-level interest Q-learning for feed ads allocation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", default="desk", help=f"preset ({', '.join(harness.PRESETS)}) or TOML file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (TOML literal)")
        sp.add_argument("--output-dir", help="directory for outputs (env DPIN_OUTPUT_DIR wins)")

    sp = sub.add_parser("generate-log", help="write an exploratory offline log")
    common(sp)
    sp.add_argument("--requests", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")

    sp = sub.add_parser("train", help="offline DQN on a log; writes a checkpoint and per-epoch metrics")
    common(sp)
    sp.add_argument("--log", help="offline log file (generated on the fly when omitted)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--variant", default="full", choices=sorted(harness.VARIANTS))

    sp = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--variant", default="full", choices=sorted(harness.VARIANTS))
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("ablate", help="train and evaluate every ablation variant per seed")
    common(sp)
    sp.add_argument("--seeds", help="comma-separated seeds (default from [eval].seeds)")
    sp.add_argument("--variants", help="comma-separated subset of variants")

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op and the full Q-network")
    common(sp)
    sp.add_argument("--instances", type=int, default=20)

    sp = sub.add_parser("oracle", help="exact value iteration on an enumerable MDP")
    common(sp)
    sp.add_argument("--gamma", type=float)
    return p


def _config(args) -> harness.ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = harness.load_config(args.config)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg


def _outdir(cfg: harness.ExperimentConfig) -> Path:
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate_log(args, cfg) -> int:
    world = feed_sim.make_world(cfg.sim)
    n = args.requests or cfg.data.requests
    log = feed_sim.generate_offline_log(feed_sim.uniform_policy, n, cfg.sim, seed=args.seed, world=world)
    path = Path(args.out) if args.out else _outdir(cfg) / "offline_log.jsonl"
    feed_sim.write_log(path, log, cfg.sim)
    means = log.history_length_means()
    print(f"wrote {len(log)} transitions from {log.n_episodes} requests to {path}")
    print("history_length_means " + " ".join(f"{k}={v:.3f}" for k, v in means.items()))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    seed = cfg.training.seed if args.seed is None else args.seed
    world = feed_sim.make_world(cfg.sim)
    eval_world = world.copy()
    if args.log:
        log = feed_sim.read_log(args.log, world)
    else:
        log = feed_sim.generate_offline_log(feed_sim.uniform_policy, cfg.data.requests, cfg.sim, seed=seed,
                                            world=world)
    model = DpinModel(harness.variant_config(cfg.model, args.variant), cfg.sim.feature_space())
    hyper = replace(cfg.training, seed=seed)

    def on_epoch(epoch, params):
        row = harness.evaluate_policy(params, model, eval_world, cfg.eval.episodes, cfg.eval.seed)
        return {"R_ad": row.R_ad, "R_fee": row.R_fee, "mean_episode_reward": row.mean_episode_reward}

    params, history = agent.train(log.transitions, hyper, model, cfg.sim, on_epoch=on_epoch)
    out = _outdir(cfg)
    agent.save_checkpoint(out / "checkpoint.npz", params, model)
    (out / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    rows = [harness.MetricsRow(f"{args.variant}-s{seed}", seed, args.variant, rec.epoch, rec.extra["R_ad"],
                               rec.extra["R_fee"], rec.extra["mean_episode_reward"], rec.loss)
            for rec in history]
    harness.write_metrics(out / "train_metrics.csv", rows)
    for r in rows:
        print(",".join(r.as_record()))
    print(f"checkpoint written to {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    model = DpinModel(harness.variant_config(cfg.model, args.variant), cfg.sim.feature_space())
    params = agent.load_checkpoint(args.checkpoint, model)
    world = feed_sim.make_world(cfg.sim)
    episodes = args.episodes or cfg.eval.episodes
    seed = cfg.eval.seed if args.seed is None else args.seed
    row = harness.evaluate_policy(params, model, world, episodes, seed, run_id="evaluate", variant=args.variant)
    harness.write_metrics(_outdir(cfg) / "eval_metrics.csv", [row])
    print(",".join(harness.METRICS_HEADER))
    print(",".join(row.as_record()))
    return EXIT_OK


def _csv_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    return [t for t in next(csv.reader([text])) if t.strip()]


def cmd_ablate(args, cfg) -> int:
    seeds = [int(s) for s in _csv_list(args.seeds)] if args.seeds else None
    variants = _csv_list(args.variants) or list(harness.VARIANTS)
    rows = harness.run_ablation(cfg, seeds=seeds, variants=variants)
    path = _outdir(cfg) / "ablation_metrics.csv"
    harness.write_metrics(path, rows)
    print(harness.metrics_csv(rows), end="")
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    res = gradcheck.run_suite(cfg, n_instances=args.instances)
    status = "ok" if res.ok else "fail"
    print(f"gradcheck status={status} max_rel_error={res.max_rel_error:.3e} worst={res.worst} "
          f"instances={res.n_instances} coordinates={res.n_checked}")
    return EXIT_OK if res.ok else EXIT_FAIL


def cmd_oracle(args, cfg) -> int:
    gamma = cfg.training.gamma if args.gamma is None else args.gamma
    res = harness.value_iteration_oracle(cfg.sim, gamma)
    path = _outdir(cfg) / "oracle_q.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["user_id", "context", "ads", "organics", "page_index", "action", "q"])
        for (user, ctx, ads, orgs, page), pattern, q in res.table():
            bits = format(pattern, f"0{cfg.sim.K}b")
            w.writerow([user, " ".join(map(str, ctx)), " ".join(map(str, ads)), " ".join(map(str, orgs)), page,
                        bits, repr(q)])
    print(f"oracle states={len(res)} iterations={res.iterations} gamma={gamma} written={path}")
    return EXIT_OK


COMMANDS = {
    "generate-log": cmd_generate_log,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail("io", exc, EXIT_IO)
    except (DataCorruptionError, ConsistencyError, DimensionError, FeasibilityError) as exc:
        return _fail("data", exc, EXIT_DATA)


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main_cli(argv: Sequence[str] | None = None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
