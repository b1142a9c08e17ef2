"""``diffrl`` command line: gen-data, pretrain, finetune, evaluate, compare, plot."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baselines import train_baseline
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .evaluation import evaluate_all, evaluate_relative, read_eval, render_table, write_eval
from .metrics import MetricsRow, append_metrics, read_metrics
from .pretrain import pretrain_model
from .rl import TrainerState, TrainingDivergedError, train
from .tasks import PretrainData, gen_pretrain_dataset, read_dataset, write_dataset

log = logging.getLogger("diffrl")


# shared helpers ---------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("out_dir", args.out)
    cfg.validate()
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.toml").write_text(cfg.to_toml())
    return cfg


def pretrain_corpus(cfg: RunConfig, path: str | None = None) -> PretrainData:
    """Dataset written by gen-data if present, else regenerated from the config (same seed, same data)."""
    path = Path(path) if path else Path(cfg["out_dir"]) / "pretrain.dftd"
    if path.exists():
        data, _ = read_dataset(path)
        return data
    return gen_pretrain_dataset(cfg.world(), cfg["seed"])


def heldout_corpus(cfg: RunConfig) -> PretrainData:
    """Fresh draws from the pretraining distribution, disjoint in seed from the training corpus."""
    n = cfg["eval.n_heldout_pretrain"]
    world = replace(cfg.world(), n_composition=n // 3, n_portrait=n // 3, n_preference=n - 2 * (n // 3))
    return gen_pretrain_dataset(world, np.random.SeedSequence([cfg["eval.seed"], 7]))


# subcommands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg["out_dir"]) / "pretrain.dftd"
    write_dataset(out, gen_pretrain_dataset(cfg.world(), cfg["seed"]), cfg.world())
    print(f"wrote {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg["out_dir"])
    params, losses = pretrain_model(pretrain_corpus(cfg, args.data), cfg.world(), cfg.schedule(), cfg.pretrain_config())
    rows = [MetricsRow(i, "pretrain", None, loss_pretrain=float(np.mean(losses[i : i + 100])))
            for i in range(0, len(losses), 100)]
    path = out / "pretrain_metrics.csv"
    path.unlink(missing_ok=True)
    append_metrics(path, rows)
    save_checkpoint(out / "base.ckpt", Checkpoint(params, config_hash=cfg.hash(), kind="base", world=cfg.world().to_dict()))
    print(f"wrote {out / 'base.ckpt'} (final loss {np.mean(losses[-100:]):.4f})")
    return 0


def _rewrite_metrics(path: Path, keep_below: int) -> None:
    """Drop rows at or after ``keep_below`` so a resumed run appends a clean continuation."""
    rows = [r for r in read_metrics(path) if r.iteration < keep_below] if path.exists() else []
    path.unlink(missing_ok=True)
    if rows:
        append_metrics(path, rows)


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg["out_dir"])
    world, sampler, schedule = cfg.world(), cfg.sampler(), cfg.schedule()
    metrics_path = out / "metrics.csv"
    every = cfg["finetune.checkpoint_every"]
    method = cfg["finetune.method"]

    if args.resume:
        if method != "rl":
            raise ConfigError("--resume is supported for finetune.method = rl only")
        ckpt = load_checkpoint(args.resume, expected_hash=cfg.hash(), force=args.force)
        init: object = ckpt.to_state(cfg["seed"])
        _rewrite_metrics(metrics_path, ckpt.iteration)
    else:
        init = load_checkpoint(args.init or out / "base.ckpt").params
        metrics_path.unlink(missing_ok=True)

    def on_iteration(state: TrainerState, rows):
        append_metrics(metrics_path, rows)
        if every and state.iteration % every == 0:
            save_checkpoint(out / f"ckpt_{state.iteration:05d}.ckpt",
                            Checkpoint.from_state(state, cfg.hash(), method, world.to_dict()))

    if method == "rl":
        bindings = cfg.task_bindings()
        data = pretrain_corpus(cfg, args.data) if cfg["rl.beta_pretrain"] > 0 else None
        try:
            state, _ = train(cfg.train_config(), bindings, data, world, sampler, schedule, init, on_iteration)
        except TrainingDivergedError as e:
            log.error("%s", e)
            return 3
    else:
        bindings = cfg.task_bindings()
        if len(bindings) != 1:
            raise ConfigError(f"finetune.tasks: baselines train one task at a time, got {cfg['finetune.tasks']}")
        result = train_baseline(cfg.baseline_config(), bindings[0], world, sampler, schedule, init, on_iteration)
        state = result.state
        if result.divergence_flags:
            log.warning("divergence flagged at iterations %s", result.divergence_flags)
    save_checkpoint(out / "final.ckpt", Checkpoint.from_state(state, cfg.hash(), method, world.to_dict()))
    print(f"wrote {out / 'final.ckpt'} after {state.iteration} iterations")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    metrics = evaluate_all(ckpt.params, cfg.world(), cfg.sampler(), cfg.schedule(), cfg.splits(), heldout_corpus(cfg),
                           cfg["eval.n_prompts"], cfg["eval.samples_per_prompt"], cfg["eval.seed"])
    label = args.label or Path(args.checkpoint).stem
    path = Path(cfg["out_dir"]) / f"eval_{label}.json"
    write_eval(path, label, metrics, str(args.checkpoint))
    print(render_table([{"label": label, "metrics": metrics}]), end="")
    return 0


def cmd_compare(args) -> int:
    records = [read_eval(p) for p in args.evals]
    text = render_table(records)
    if args.relative:
        if args.base is None or args.joint is None or not args.specialist:
            raise ConfigError("--relative needs --base, --joint and at least one --specialist METRIC=PATH")
        base, joint = read_eval(args.base)["metrics"], read_eval(args.joint)["metrics"]
        spec_paths = dict(s.split("=", 1) for s in args.specialist)
        keys = list(spec_paths)
        rel = {}
        for k in keys:
            spec = read_eval(spec_paths[k])["metrics"]
            rel.update({k: evaluate_relative({k: joint[k]}, {k: spec[k]}, {k: base[k]})[k]})
        text += "\n" + render_table([{"label": "relative", "metrics": rel}], keys)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.txt").write_text(text)
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    rows = read_metrics(args.metrics)
    fig, ax = plt.subplots(figsize=(6, 4))
    for task in dict.fromkeys(r.task for r in rows):
        pts = [(r.iteration, r.mean_reward) for r in rows if r.task == task and r.mean_reward is not None]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=task)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean reward")
    ax.legend()
    out = Path(args.out or Path(args.metrics).parent)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "reward_curves.svg"
    plt.rcParams["svg.hashsalt"] = "diffrl"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {path}")
    return 0


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffrl", description="Toy-scale RL fine-tuning of diffusion samplers.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="TOML config with dotted keys")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "write the pretraining dataset")
    p = add("pretrain", cmd_pretrain, "train the base denoiser")
    p.add_argument("--data", help="dataset path (default OUT/pretrain.dftd, regenerated if missing)")
    p = add("finetune", cmd_finetune, "RL or baseline fine-tuning")
    p.add_argument("--init", help="starting checkpoint (default OUT/base.ckpt)")
    p.add_argument("--resume", help="resume from a fine-tuning checkpoint")
    p.add_argument("--force", action="store_true", help="resume despite a config-hash mismatch")
    p.add_argument("--data", help="pretraining dataset for the regularizer")
    p = add("evaluate", cmd_evaluate, "held-out metric suite for one checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label")
    p = add("compare", cmd_compare, "side-by-side table of evaluate outputs")
    p.add_argument("evals", nargs="+", help="eval_*.json files, one table row each")
    p.add_argument("--relative", action="store_true", help="also report joint-vs-specialist relative scores")
    p.add_argument("--base")
    p.add_argument("--joint")
    p.add_argument("--specialist", action="append", default=[], metavar="METRIC=PATH")
    p = add("plot", cmd_plot, "SVG chart of mean reward per task")
    p.add_argument("--metrics", required=True, help="metrics CSV")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"diffrl {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
