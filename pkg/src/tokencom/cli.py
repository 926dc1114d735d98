"""Command-line entry points: train, evaluate, oracle, preset, ta-demo."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import oracle as orc
from .config import PRESETS, SEED_ENV, ExperimentConfig, dump_config, load_config
from .errors import TokenComError
from .experiments import MetricsRow, emit_csv, run_preset, summarize
from .tokenizers import (
    BaseStationEndpoint, SimulatedLink, UserEndpoint, compression_rate, load_catalog, required_bitrate,
    run_agreement,
)
from .training import Learner, evaluate, train


def _seed(args, cfg: ExperimentConfig) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.seeds[0]


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_values(seeds=(args.seed,))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _load(args).desk_scaled()
    seed = _seed(args, cfg)
    out = _out(args)
    ec = cfg.episode_config()
    learner, log = train(ec, cfg.kind, cfg.agent_settings(), seed, eval_every=args.eval_every)
    records = log.evaluations if args.eval_every else log.records
    rows = [MetricsRow.from_record("train", float(cfg.H), cfg.kind, seed, r) for r in records]
    emit_csv(rows, out / "metrics.csv")
    (out / "checkpoints").mkdir(exist_ok=True)
    ckpt = out / "checkpoints" / f"{cfg.kind.value}_seed{seed}.npz"
    learner.save(ckpt)
    (out / "config.txt").write_text(dump_config(cfg))
    last = log.records[-1]
    print(f"trained {cfg.kind.value} for {len(log.records)} episodes ({log.updates} updates); "
          f"last episode utility {last.mean_utility:.4f}, freezing {last.freezing_pct:.1f}%")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args).desk_scaled()
    seed = _seed(args, cfg)
    out = _out(args)
    ec = cfg.episode_config()
    learner = Learner(ec, cfg.kind, cfg.agent_settings(), np.random.default_rng(0))
    learner.load(args.checkpoint)
    episodes = args.episodes or cfg.eval_episodes
    log = evaluate(learner, ec, episodes, seed)
    rows = [MetricsRow.from_record("evaluate", float(cfg.H), cfg.kind, seed, r) for r in log.records]
    emit_csv(rows, out / "metrics.csv")
    s = summarize(log.records)
    print(f"{cfg.kind.value}: {episodes} greedy episodes, utility {s.mean_utility:.4f}, "
          f"freezing {s.freezing_pct:.2f}%, PSNR {s.mean_psnr:.2f} dB")
    return 0


def cmd_oracle(args) -> int:
    cfg = _load(args)
    seed = _seed(args, cfg)
    out = _out(args)
    ec = cfg.episode_config(codec="token")
    draws = orc.sample_draws(ec, args.draws, seed)
    res = orc.oracle_solve(ec, draws, power_levels=args.levels)
    lines = ["draw,feasible,utility"]
    lines += [f"{k},{int(f)},{u!r}" for k, (f, u) in enumerate(zip(res.feasible, res.utilities))]
    (out / "oracle.csv").write_text("\n".join(lines) + "\n")
    print(f"oracle: {int(res.feasible.sum())}/{len(draws)} draws feasible, "
          f"mean best utility {res.mean_utility:.6f}")
    first = next((d for d in res.decisions if d is not None), None)
    if first is not None:
        powers = (np.abs(first.w) ** 2).sum(axis=-1)
        print(f"first feasible decision: indices {first.indices.tolist()}")
        print(f"  kappa {first.kappa.tolist()}")
        print(f"  cell powers (W) {np.round(powers, 6).tolist()}")
    return 0


def cmd_preset(args) -> int:
    cfg = _load(args)
    if args.name:
        cfg = cfg.with_values(preset=args.name)
    out = _out(args)
    progress = (lambda c: print(f"running {c.name}", file=sys.stderr)) if args.verbose else None
    rows = run_preset(cfg, out=out, workers=args.workers, progress=progress)
    (out / "config.txt").write_text(dump_config(cfg))
    print(f"{cfg.preset}: {len(rows)} rows written to {out / 'metrics.csv'}")
    return 0


def cmd_ta_demo(args) -> int:
    cfg = _load(args)
    seed = _seed(args, cfg)
    rng = np.random.default_rng(seed)
    catalog = load_catalog(cfg.catalog or None)
    tags = [s.name_tag for s in catalog]
    users = []
    for uid in range(args.users):
        if args.full:
            caps = tags
        else:
            k = int(rng.integers(1, len(tags) + 1))
            caps = [tags[j] for j in sorted(rng.choice(len(tags), size=k, replace=False))]
        users.append(UserEndpoint(uid, caps))
    bs = BaseStationEndpoint(catalog)
    link = SimulatedLink()
    # pick each user's largest-bpp compatible pair
    agreed = run_agreement(bs, users, lambda uid, pairs: len(pairs), link)
    for msg in link.log:
        print(msg.decode().rstrip())
    video = cfg.video
    for uid, spec in sorted(agreed.items()):
        eta = compression_rate(spec)
        print(f"user {uid}: {spec.name_tag} eta={eta:.7g} bpp, "
              f"required {required_bitrate(eta, video):.0f} bit/s at {video.width}x{video.height}")
    if args.out:
        out = _out(args)
        (out / "ta_demo.txt").write_bytes(b"".join(link.log))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokencom", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="{train,evaluate,oracle,preset,ta-demo}")
    sub.required = True

    def common(p, out_default="runs"):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, default=None, help=f"seed (default: config seeds, or ${SEED_ENV})")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("train", help="train one baseline")
    common(p)
    p.add_argument("--eval-every", type=int, default=0, help="greedy evaluation episode every k episodes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint greedily")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle", help="brute-force optimum on a tiny instance")
    common(p)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--levels", type=int, default=20, help="per-cell power grid size")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("preset", help="run a preset experiment")
    common(p)
    p.add_argument("--name", choices=PRESETS, help="preset (overrides the config)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_preset)

    p = sub.add_parser("ta-demo", help="walk through tokenizer agreement")
    common(p, out_default=None)
    p.add_argument("--users", type=int, default=4)
    p.add_argument("--full", action="store_true", help="every user supports the whole catalog")
    p.set_defaults(func=cmd_ta_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TokenComError, OSError, ValueError) as exc:
        print(f"tokencom {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
