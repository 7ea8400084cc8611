"""Command-line entry point.

Subcommands cover the whole workflow: ``gen-data`` writes a synthetic corpus,
``train`` fits a model from a JSON run config (with flat flag overrides),
``eval`` and ``generate`` score a checkpoint, ``gradcheck`` verifies the
gradients of the tiny reference model, and ``ablate`` runs the tracker
on/off study grid.

Exit codes: 0 success, 1 missing files / I/O failure, 2 invalid arguments,
3 training aborted on a non-finite gradient, 4 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import checkpoint as ckpt
from .data import (
    CandidateSet,
    dataset_hash,
    decode_tokens,
    encode_tokens,
    generate_dataset,
    oracle_answer,
    read_dataset,
    write_dataset,
)
from .evaluation import (
    accuracy_by_category,
    config_hash,
    evaluate,
    run_ablation,
    tracker_grid,
    write_reports,
)
from .gradcheck import DEFAULT_TOL, model_gradient_check
from .model import ModelConfig, build_embedder, init_params
from .optim import (
    NanGradientError,
    OptimState,
    ScheduleConfig,
    TrainConfig,
    train_loop,
)

SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


def _coerce(value: str):
    lowered = value.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    return value


def _apply_overrides(tree: dict, overrides):
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _coerce(value)


def _build_section(cls, section: dict, name: str):
    known = set(cls.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**section)


def load_run_config(path: str | None, overrides=None, flag_overrides=None):
    """Resolve the run configuration: JSON file -> --set overrides -> explicit
    flags. Unknown keys anywhere are rejected."""
    tree: dict = {}
    if path is not None:
        tree = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(tree, dict):
            raise ConfigError("run config must be a JSON object")
    unknown = set(tree) - {"model", "schedule", "train", "seed"}
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    _apply_overrides(tree, overrides)
    for key, value in (flag_overrides or {}).items():
        if value is None:
            continue
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    seed = int(tree.get("seed", 0))
    model = ModelConfig.from_dict(tree.get("model", {}))
    schedule = _build_section(ScheduleConfig, tree.get("schedule", {}), "schedule")
    train_section = dict(tree.get("train", {}))
    train_section.setdefault("seed", seed)
    train = _build_section(TrainConfig, train_section, "train")
    return model, schedule, train, seed


def _echo_config(out_dir: Path, model, schedule, train, seed):
    resolved = {
        "model": model.to_dict(),
        "schedule": asdict(schedule),
        "train": asdict(train),
        "seed": seed,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(resolved, indent=1, sort_keys=True), encoding="utf-8"
    )
    return resolved


def _load_split(data_dir: Path, split: str):
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset split {path}")
    return read_dataset(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": (args.episodes, args.seed),
        "val": (args.val_episodes, args.seed + 1),
        "test": (args.test_episodes, args.seed + 2),
    }
    paths = []
    for split, (count, seed) in splits.items():
        episodes = generate_dataset(
            seed, count, args.turns, args.coref_rate,
            min_objects=args.min_objects, max_objects=args.max_objects,
            num_frames=args.frames,
        )
        path = out / f"{split}.jsonl"
        write_dataset(episodes, path)
        paths.append(path)
        print(f"wrote {len(episodes)} episodes to {path}")
    cand_path = out / "candidates.txt"
    CandidateSet().write(cand_path)
    paths.append(cand_path)
    print(f"dataset hash: {dataset_hash(paths)}")
    return 0


def cmd_train(args) -> int:
    flag_overrides = {
        "model.mode": {"disc": "discriminative", "gen": "generative"}.get(args.mode),
        "model.combiner": args.combiner,
        "train.steps": args.steps,
        "train.batch_size": args.batch_size,
        "seed": args.seed,
    }
    if args.no_ost:
        flag_overrides["model.use_ost"] = False
    if args.no_lst:
        flag_overrides["model.use_lst"] = False
    model, schedule, train, seed = load_run_config(
        args.config, args.set, flag_overrides
    )

    out = Path(args.out)
    _echo_config(out, model, schedule, train, seed)
    episodes = _load_split(Path(args.data), "train")

    if args.resume:
        params, model, step, optim, _ = ckpt.load_checkpoint(args.resume)
        if optim is None:
            raise FileNotFoundError("resume checkpoint has no optimizer state")
    else:
        params = init_params(model, seed)
        optim = OptimState.for_params(params)
    embedder = build_embedder(model)

    def on_checkpoint(step: int):
        ckpt.save_checkpoint(out / f"ckpt_{step}", params, model, step, optim)
        ckpt.save_checkpoint(out / "checkpoint", params, model, step, optim)

    try:
        rows = train_loop(episodes, params, optim, model, schedule, train,
                          embedder, metrics_path=out / "metrics.csv",
                          on_checkpoint=on_checkpoint)
    except NanGradientError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    if rows:
        print(f"finished at step {rows[-1][0]} with loss {rows[-1][2]:.6f}")
    print(f"final checkpoint: {out / 'checkpoint'}")
    return 0


def _oracle_predictions(episodes):
    preds = []
    for ep in episodes:
        context = []
        for turn in ep.turns:
            preds.append(oracle_answer(ep.scene, context, turn.question))
            context.append(turn.question)
    return preds


def cmd_eval(args) -> int:
    episodes = _load_split(Path(args.data), args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.oracle:
        report = accuracy_by_category(_oracle_predictions(episodes), episodes)
        report.manifest = {"model": "oracle", "split": args.split}
        stem = "eval_oracle"
    else:
        params, cfg, step, _, _ = ckpt.load_checkpoint(args.ckpt)
        report = evaluate(params, cfg, episodes,
                          manifest={"split": args.split, "step": step})
        stem = f"eval_{config_hash(cfg)}"
    payload = report.to_dict()
    (out / f"{stem}.json").write_text(json.dumps(payload, indent=1, sort_keys=True),
                                      encoding="utf-8")
    lines = [f"overall accuracy: {report.overall_accuracy:.4f}"]
    if report.bleu4 is not None:
        lines.append(f"BLEU-4: {report.bleu4:.4f}")
    for cat, stats in report.per_category.items():
        if stats["count"]:
            lines.append(f"  {cat}: {stats['accuracy']:.4f} ({stats['count']})")
    (out / f"{stem}.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_generate(args) -> int:
    from .model import run_dialog_generate

    params, cfg, _, _, _ = ckpt.load_checkpoint(args.ckpt)
    if cfg.mode != "generative":
        print("checkpoint is not a generative model", file=sys.stderr)
        return 2
    episodes = _load_split(Path(args.data), args.split)
    embedder = build_embedder(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "generated.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            decoded = run_dialog_generate(ep, params, cfg, embedder)
            for ti, (tokens, turn) in enumerate(zip(decoded, ep.turns)):
                fh.write(json.dumps({
                    "episode_id": ep.episode_id,
                    "turn": ti,
                    "question": " ".join(turn.question),
                    "generated": " ".join(decode_tokens(tokens)),
                    "reference": turn.answer,
                }, sort_keys=True))
                fh.write("\n")
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    failures = 0
    for mode in ("discriminative", "generative"):
        report = model_gradient_check(mode=mode, seed=args.seed)
        worst = max(report.values())
        for name in sorted(report):
            err = report[name]
            status = "PASS" if err <= DEFAULT_TOL else "FAIL"
            if status == "FAIL" or args.verbose:
                print(f"{status} {mode}/{name} max_rel_err={err:.3e}")
            failures += status == "FAIL"
        print(f"{mode}: {len(report)} parameters, worst max_rel_err={worst:.3e}")
    if failures:
        print(f"{failures} parameters failed the gradient check", file=sys.stderr)
        return 4
    print("gradient check passed")
    return 0


def cmd_ablate(args) -> int:
    flag_overrides = {"train.steps": args.steps,
                      "train.batch_size": args.batch_size,
                      "seed": args.seed}
    model, schedule, train, seed = load_run_config(args.config, args.set,
                                                   flag_overrides)
    data_dir = Path(args.data)
    train_eps = _load_split(data_dir, "train")
    val_eps = _load_split(data_dir, "val")
    if args.limit_train:
        train_eps = train_eps[: args.limit_train]
    if args.limit_val:
        val_eps = val_eps[: args.limit_val]
    rows = run_ablation(tracker_grid(model), train_eps, val_eps, schedule,
                        train, seed=seed)
    write_reports(rows, args.out, "ablation")
    from .evaluation import ablation_markdown

    print(ablation_markdown(rows))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _positive(value: str) -> int:
    n = int(value)
    if n <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vdtracker",
        description="video-dialog state-tracking model: data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dialog corpus")
    p.add_argument("--episodes", type=_positive, default=2000)
    p.add_argument("--val-episodes", type=_positive, default=400)
    p.add_argument("--test-episodes", type=_positive, default=400)
    p.add_argument("--turns", type=_positive, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coref-rate", type=float, default=0.5)
    p.add_argument("--frames", type=_positive, default=16)
    p.add_argument("--min-objects", type=_positive, default=3)
    p.add_argument("--max-objects", type=_positive, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=["disc", "gen"])
    p.add_argument("--combiner", choices=["A", "B", "C"])
    p.add_argument("--no-ost", action="store_true")
    p.add_argument("--no-lst", action="store_true")
    p.add_argument("--steps", type=_positive)
    p.add_argument("--batch-size", type=_positive)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. model.d=32")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the oracle)")
    p.add_argument("--ckpt")
    p.add_argument("--oracle", action="store_true",
                   help="score the symbolic oracle instead of a model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="greedy decoding over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="tracker on/off study grid")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=_positive, default=200)
    p.add_argument("--batch-size", type=_positive, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit-train", type=int, default=0)
    p.add_argument("--limit-val", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and not args.oracle and not args.ckpt:
        parser.error("eval needs --ckpt or --oracle")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
