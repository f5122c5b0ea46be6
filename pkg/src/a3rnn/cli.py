"""Command line entry point: ``a3rnn <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import env as E
from .config import ConfigError, load_config, load_suite
from .model import build_model

EXIT_INCOMPLETE = 3


def _load_episodes(data_dir):
    path = Path(data_dir)
    if not (path / "manifest.json").exists():
        raise SystemExit(f"no dataset at {path}; run `a3rnn gen-data --out {path}` first")
    _, episodes = E.load_dataset(path)
    return episodes


def cmd_gen_data(args) -> int:
    episodes = E.generate_dataset(args.slots, args.per_slot, args.seed)
    manifest = E.save_dataset(episodes, args.out, seed=args.seed)
    print("file\tslot\tseed")
    for entry in manifest["episodes"]:
        print(f"{entry['file']}\t{entry['slot']}\t{entry['seed']}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    model_cfg, train_cfg = load_config(args.config)
    if args.epochs is not None:
        train_cfg = train_cfg.__class__(**{**train_cfg.__dict__, "epochs": args.epochs})
    episodes = _load_episodes(args.data or train_cfg.data_dir)
    out = Path(args.out or train_cfg.out_dir)
    model = build_model(model_cfg)
    records = train(model, episodes, train_cfg, out, progress=args.verbose)
    last = records[-1]
    print("epoch\ttotal\tbody\t" + "\t".join(f"sim_{k + 1}" for k in range(len(last.similarity))))
    print(f"{last.epoch}\t{last.losses['total']:.6g}\t{last.losses['body']:.6g}\t"
          + "\t".join(f"{s:.4f}" for s in last.similarity))
    print(f"# outputs in {out}", file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    from .report import write_results_table
    from .train import run_ablation

    suite = load_suite(args.suite)
    episodes = _load_episodes(args.data or suite.train.data_dir)
    out = Path(args.out or suite.train.out_dir)
    result = run_ablation(suite, episodes, out, progress=args.verbose)
    txt, _, complete = write_results_table(result, out)
    print(txt.read_text(), end="")
    return 0 if complete else EXIT_INCOMPLETE


def cmd_rollout(args) -> int:
    from .train import load_checkpoint, rollout, score_rollout

    model, epoch = load_checkpoint(args.ckpt)
    episode = None
    if args.mode == "open_loop":
        if not args.data:
            raise SystemExit("open_loop needs --data")
        matches = [ep for ep in _load_episodes(args.data) if ep.box_slot == args.slot]
        if not matches:
            raise SystemExit(f"no episode for slot {args.slot} in {args.data}")
        episode = matches[0]
    r = rollout(model, args.slot, args.mode, seed=args.seed, episode=episode, feedback=args.feedback)
    scores = score_rollout(r)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(out, **r._asdict())
    print("epoch\tslot\tmode\tsteps\tattention_success\tpick_success")
    print(f"{epoch}\t{args.slot}\t{args.mode}\t{len(r.joints)}\t"
          f"{int(scores['attention_success'])}\t{int(scores['pick_success'])}")
    return 0 if not r.failed else 1


def _grid_inputs(run_dir: Path):
    cfg = json.loads((run_dir / "config.json").read_text())
    epochs = sorted(set(cfg["train"]["checkpoint_epochs"]))
    found = sorted(run_dir.glob("checkpoint_*.pt"))
    wanted = [run_dir / f"checkpoint_{e:04d}.pt" for e in epochs]
    # the final checkpoint is always written even off-schedule
    extra = [p for p in found if p not in wanted]
    return wanted + extra[-1:]


def cmd_report(args) -> int:
    from . import report as R
    from .train import AblationResult

    src, out = Path(args.inp), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "grid":
        if args.data:
            episodes = [ep for ep in _load_episodes(args.data) if ep.box_slot == args.slot]
            episode = episodes[0]
        else:
            episode = E.generate_episode(args.slot, seed=0)
        ckpts = _grid_inputs(src)
        grid = R.render_attention_grid(ckpts, episode, out / "attention_grid.png",
                                       timesteps=tuple(args.timesteps))
        print("column\tcheckpoint\tstatus")
        for i, (path, col) in enumerate(zip(ckpts, grid.cells)):
            print(f"{i}\t{path.name}\t{col[0].missing or 'ok'}")
        return 0 if all(col[0].missing is None for col in grid.cells) else EXIT_INCOMPLETE
    if args.kind == "similarity":
        png, csv_path = R.plot_similarity_curves(src / "metrics.jsonl", out)
        print(csv_path.read_text(), end="")
        return 0
    result = AblationResult.from_json(json.loads((src / "results.json").read_text()))
    txt, _, complete = R.write_results_table(result, out)
    print(txt.read_text(), end="")
    return 0 if complete else EXIT_INCOMPLETE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="a3rnn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic pick dataset")
    g.add_argument("--slots", type=int, default=3)
    g.add_argument("--per-slot", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="dataset directory (overrides train.data_dir)")
    t.add_argument("--out", help="run directory (overrides train.out_dir)")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train and score every variant in a suite file")
    a.add_argument("--suite", required=True)
    a.add_argument("--data")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("rollout", help="run a checkpoint in the pick environment")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--slot", type=int, default=0)
    r.add_argument("--mode", choices=("closed_loop", "open_loop"), default="closed_loop")
    r.add_argument("--seed", type=int, default=0, help="start-pose jitter seed")
    r.add_argument("--feedback", choices=("encoder", "predicted"), default="encoder")
    r.add_argument("--data", help="dataset for open_loop")
    r.add_argument("--out", help="write traces to this .npz")
    r.set_defaults(func=cmd_rollout)

    rep = sub.add_parser("report", help="render figures and tables")
    rep.add_argument("kind", choices=("grid", "similarity", "table"))
    rep.add_argument("--in", dest="inp", required=True,
                     help="run directory (grid, similarity) or ablation directory (table)")
    rep.add_argument("--out", required=True)
    rep.add_argument("--slot", type=int, default=0)
    rep.add_argument("--data")
    rep.add_argument("--timesteps", type=int, nargs="+", default=[0, 30, 60, 90])
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, E.ConfigError, E.CorruptDatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
