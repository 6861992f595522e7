"""Command-line entry point: train / evaluate / ablate / export-vocab.

Flags override config-file values, which override built-in defaults.
The default output root comes from TAVAT_OUT_DIR when set.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import build_dataset, encode_examples, make_batches
from .model import load_checkpoint, save_checkpoint
from .train import (TrainConfig, config_from_dict, evaluate, format_ablation_table,
                    run_ablation, train)
from .vocab import apply_to_embedding, load_vocabulary


def _load_config(args) -> TrainConfig:
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    config = config_from_dict(raw)
    for name in ("epochs", "batch_size", "lr", "out_dir", "run_name", "optimizer"):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            setattr(config, name, value)
    if getattr(args, "mode", None):
        if args.mode == "clean":
            # plain fine-tuning: a single zero perturbation at the only step
            config.adv.mode = "freelb"
            config.adv.use_vocab = False
            config.adv.use_token_norm = False
            config.adv.sigma = 0.0
            config.adv.K = 1
        else:
            config.adv.mode = args.mode
            if args.mode in ("freelb", "pgd"):
                config.adv.use_vocab = False
                config.adv.use_token_norm = False
    if getattr(args, "save_ptb_vocab", False):
        config.save_ptb_vocab = True
    if getattr(args, "init_embedding_from_vocab", None):
        config.init_embedding_from_vocab = args.init_embedding_from_vocab
    return config


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--mode", choices=["tavat", "freelb", "pgd", "clean"])
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--run-name", dest="run_name")
    p.add_argument("--save-ptb-vocab", action="store_true", dest="save_ptb_vocab")
    p.add_argument("--init-embedding-from-vocab", dest="init_embedding_from_vocab")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tavat",
                                     description="Token-aware virtual adversarial training")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training job")
    _add_train_flags(p_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", help="JSON config file with the dataset spec")
    p_eval.add_argument("--split", choices=["train", "dev", "test"], default="dev")

    p_ablate = sub.add_parser("ablate", help="run a toggle-grid comparison")
    _add_train_flags(p_ablate)
    p_ablate.add_argument("--grid", choices=["table5", "table6"], default="table5")
    p_ablate.add_argument("--seeds", type=int, nargs="+")

    p_export = sub.add_parser("export-vocab",
                              help="fold a learned perturbation vocabulary into a checkpoint")
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--vocab", required=True)
    p_export.add_argument("--out", required=True)

    args = parser.parse_args(argv)

    if args.command == "train":
        config = _load_config(args)
        result = train(config)
        print(f"run {config.run_name}: dev metric {result.dev_metric}")
        if result.checkpoint_path:
            print(f"checkpoint: {result.checkpoint_path}")
        if result.vocab_path:
            print(f"perturbation vocabulary: {result.vocab_path}")
        if result.metrics_path:
            print(f"metrics: {result.metrics_path}")
        return 0

    if args.command == "evaluate":
        config = _load_config(args)
        model = load_checkpoint(args.checkpoint)
        tokenizer, train_ex, dev_ex, test_ex = build_dataset(
            config.dataset, seed=config.seeds.data)
        examples = {"train": train_ex, "dev": dev_ex, "test": test_ex}[args.split]
        batches = make_batches(encode_examples(tokenizer, examples, config.max_len),
                               config.batch_size)
        metrics = evaluate(model, batches)
        print(json.dumps(metrics, sort_keys=True))
        return 0

    if args.command == "ablate":
        config = _load_config(args)
        rows = run_ablation(config, grid=args.grid, seeds=args.seeds)
        print(format_ablation_table(rows))
        out_dir = config.resolved_out_dir()
        out_dir.mkdir(parents=True, exist_ok=True)
        table_path = out_dir / f"ablation-{args.grid}.json"
        table_path.write_text(json.dumps(rows, indent=2), encoding="utf-8")
        print(f"table written to {table_path}")
        return 0

    if args.command == "export-vocab":
        model = load_checkpoint(args.checkpoint)
        learned = load_vocabulary(args.vocab, expect_dim=model.config.dim)
        model.set_embedding(apply_to_embedding(model.embedding_table, learned))
        save_checkpoint(model, args.out)
        print(f"embedding updated with perturbation vocabulary: {args.out}")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
