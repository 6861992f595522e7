"""Training orchestration: epochs, optimizers, evaluation, ablations, metrics.

One process runs one training job. Seeds are split by role (parameter
init, data order, adversarial draws) so ablation arms can share data
order while varying only the adversarial behavior. Every run writes a
line-delimited metrics stream plus a checkpoint, and identical configs
with identical seeds reproduce both bit for bit.
"""
from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .adv import AdvConfig, SpecialTokenPolicy, tavat_batch_step
from .data import (CLS, SEP, UNK, DatasetSpec, build_dataset, encode_examples,
                   label_histogram, make_batches, span_f1)
from .model import ModelConfig, TextModel, save_checkpoint
from .tensor import Tensor
from .vocab import (PerturbationVocabulary, apply_to_embedding, init_vocabulary,
                    load_vocabulary, save_vocabulary)

METRICS_SCHEMA = 1


class SGD:
    """Plain SGD with optional decoupled weight decay."""

    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.data = p.data - self.lr * g


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m.get(name, 0.0)
            v = self.v.get(name, 0.0)
            self.m[name] = m = self.beta1 * m + (1 - self.beta1) * g
            self.v[name] = v = self.beta2 * v + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0):
    if kind == "sgd":
        return SGD(lr, weight_decay)
    if kind == "adam":
        return Adam(lr, weight_decay)
    raise ValueError(f"unknown optimizer kind {kind!r}")


@dataclass
class Seeds:
    init: int = 1
    data: int = 2
    adversarial: int = 3


@dataclass
class TrainConfig:
    model: ModelConfig | None = None
    adv: AdvConfig = field(default_factory=AdvConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seeds: Seeds = field(default_factory=Seeds)
    optimizer: str = "sgd"
    lr: float = 0.05
    weight_decay: float = 0.0
    epochs: int = 3
    batch_size: int = 32
    max_len: int = 32
    out_dir: str | None = None
    run_name: str = "run"
    save_ptb_vocab: bool = True        # written only when the vocabulary is in use
    init_embedding_from_vocab: str | None = None
    emit_metrics: bool = True
    eval_train: bool = False           # also score the train split at each eval

    def resolved_out_dir(self) -> Path:
        root = self.out_dir or os.environ.get("TAVAT_OUT_DIR", "runs")
        return Path(root) / self.run_name

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adv"]["special_token_policy"]["ids"] = sorted(
            d["adv"]["special_token_policy"]["ids"])
        return d


def config_from_dict(raw: dict) -> TrainConfig:
    """Build a TrainConfig from plain JSON-ish data (config files, CLI)."""
    raw = dict(raw)
    kwargs: dict = {}
    if "model" in raw and raw["model"] is not None:
        kwargs["model"] = ModelConfig(**raw.pop("model"))
    else:
        raw.pop("model", None)
    if "adv" in raw:
        adv = dict(raw.pop("adv"))
        if "special_token_policy" in adv and not isinstance(
                adv["special_token_policy"], SpecialTokenPolicy):
            pol = dict(adv["special_token_policy"])
            pol["ids"] = frozenset(pol.get("ids", ()))
            adv["special_token_policy"] = SpecialTokenPolicy(**pol)
        kwargs["adv"] = AdvConfig(**adv)
    if "dataset" in raw:
        kwargs["dataset"] = DatasetSpec(**raw.pop("dataset"))
    if "seeds" in raw:
        kwargs["seeds"] = Seeds(**raw.pop("seeds"))
    kwargs.update(raw)
    return TrainConfig(**kwargs)


class MetricsWriter:
    """Append-only line-delimited records, flushed as they happen."""

    def __init__(self, path: Path | None):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self.records: list[dict] = []

    def emit(self, record: dict) -> None:
        record = {"schema": METRICS_SCHEMA, **record}
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def parse_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summarize_records(records: list[dict]) -> dict:
    """Aggregate a metrics stream back into its end-of-run summary fields."""
    steps = [r for r in records if r.get("kind") == "step"]
    evals = [r for r in records if r.get("kind") == "eval"]
    summary = {
        "kind": "summary",
        "steps": len(steps),
        "evaluations": len(evals),
        "final_loss": steps[-1]["losses"][-1] if steps else None,
        "final_dev_metric": evals[-1]["metric"] if evals else None,
    }
    return summary


@dataclass
class TrainResult:
    config: TrainConfig
    model: TextModel
    vocab: PerturbationVocabulary | None
    dev_metric: float | None
    history: list[dict]
    checkpoint_path: Path | None
    vocab_path: Path | None
    metrics_path: Path | None
    tokenizer_fingerprint: str


def _dev_metric(model: TextModel, batches) -> float:
    """Accuracy for classification, span F1 for tagging."""
    metrics = evaluate(model, batches)
    return metrics["f1"] if model.config.head == "tagging" else metrics["accuracy"]


def evaluate(model: TextModel, batches) -> dict:
    """Deterministic metrics on pre-built batches."""
    if not batches:
        raise ValueError("evaluate: no batches (is the requested split empty?)")
    if model.config.head == "tagging":
        gold, pred = [], []
        for b in batches:
            p = model.predict(b)
            for row in range(b.size):
                keep = b.mask[row]
                gold.append(b.labels[row][keep])
                pred.append(p[row][keep])
        precision, recall, f1 = span_f1(gold, pred)
        return {"precision": precision, "recall": recall, "f1": f1}
    correct = total = 0
    for b in batches:
        correct += int((model.predict(b) == b.labels).sum())
        total += b.size
    return {"accuracy": correct / total}


def train(config: TrainConfig) -> TrainResult:
    """Run a full training job as configured; everything is seed-determined."""
    cfg = config
    cfg.adv.validate()
    out_dir = cfg.resolved_out_dir() if (cfg.out_dir or cfg.emit_metrics
                                         or cfg.save_ptb_vocab) else None
    metrics_path = checkpoint_path = vocab_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl" if cfg.emit_metrics else None
        checkpoint_path = out_dir / "checkpoint.bin"

    tokenizer, train_ex, dev_ex, _ = build_dataset(cfg.dataset, seed=cfg.seeds.data)
    fingerprint = tokenizer.fingerprint()
    tagging = cfg.dataset.source == "synthetic-tagging"

    model_cfg = cfg.model
    if model_cfg is None:
        model_cfg = ModelConfig(vocab_size=tokenizer.vocab_size,
                                classes=5 if tagging else cfg.dataset.classes,
                                head="tagging" if tagging else "classification",
                                max_len=cfg.max_len)
    if model_cfg.vocab_size != tokenizer.vocab_size:
        raise ValueError(
            f"model vocab_size {model_cfg.vocab_size} != tokenizer {tokenizer.vocab_size}")

    rng_init = np.random.default_rng(cfg.seeds.init)
    rng_adv = np.random.default_rng(cfg.seeds.adversarial)
    model = TextModel(model_cfg, rng=rng_init)

    if cfg.init_embedding_from_vocab:
        learned = load_vocabulary(cfg.init_embedding_from_vocab,
                                  expect_dim=model_cfg.dim,
                                  expect_fingerprint=fingerprint)
        model.set_embedding(apply_to_embedding(model.embedding_table, learned))

    vocab = None
    if cfg.adv.use_vocab:
        vocab = init_vocabulary(model_cfg.vocab_size, model_cfg.dim, cfg.adv.sigma,
                                rng_adv, meta={"task": cfg.dataset.source,
                                               "epsilon": cfg.adv.eta_bound,
                                               "fingerprint": fingerprint})

    optimizer = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)
    encoded_train = encode_examples(tokenizer, train_ex, cfg.max_len)
    encoded_dev = encode_examples(tokenizer, dev_ex, cfg.max_len)
    dev_batches = make_batches(encoded_dev, cfg.batch_size) if encoded_dev else []

    writer = MetricsWriter(metrics_path)
    history: list[dict] = []
    started = time.time()
    writer.emit({"kind": "config", "config": cfg.to_dict(),
                 "train_examples": len(train_ex),
                 "label_histogram": {str(k): v for k, v in
                                     sorted(label_histogram(train_ex).items())},
                 "tokenizer_fingerprint": fingerprint})
    try:
        dev_metric = None
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path)   # last-good from step zero
        for epoch in range(cfg.epochs):
            batches = make_batches(encoded_train, cfg.batch_size,
                                   seed=cfg.seeds.data + epoch, shuffle=True)
            for b_index, batch in enumerate(batches):
                report = tavat_batch_step(model, batch, vocab, cfg.adv,
                                          optimizer, rng_adv)
                record = {
                    "kind": "step", "epoch": epoch, "batch": b_index,
                    "losses": [round(v, 10) for v in report.losses],
                    "wall_time": time.time() - started,
                }
                if report.final_delta_norms is not None:
                    record["delta_norm_max"] = float(report.final_delta_norms.max())
                    record["delta_norm_mean"] = float(report.final_delta_norms.mean())
                if report.final_eta_norms is not None:
                    record["eta_norm_max"] = float(report.final_eta_norms.max())
                    record["eta_norm_mean"] = float(report.final_eta_norms.mean())
                writer.emit(record)
            if dev_batches:
                dev_metric = _dev_metric(model, dev_batches)
                record = {"kind": "eval", "epoch": epoch, "metric": dev_metric,
                          "wall_time": time.time() - started}
                if cfg.eval_train:
                    record["train_metric"] = _dev_metric(
                        model, make_batches(encoded_train, cfg.batch_size))
                writer.emit(record)
                history.append({"epoch": epoch, "dev_metric": dev_metric})
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
        if cfg.epochs == 0 and dev_batches:
            dev_metric = _dev_metric(model, dev_batches)
            writer.emit({"kind": "eval", "epoch": -1, "metric": dev_metric,
                         "wall_time": time.time() - started})
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path)
        if cfg.save_ptb_vocab and vocab is not None and out_dir is not None:
            vocab_path = out_dir / "ptb_vocab.bin"
            save_vocabulary(vocab, vocab_path)
        writer.emit(summarize_records(writer.records))
    finally:
        writer.close()

    return TrainResult(config=cfg, model=model, vocab=vocab, dev_metric=dev_metric,
                       history=history, checkpoint_path=checkpoint_path,
                       vocab_path=vocab_path, metrics_path=metrics_path,
                       tokenizer_fingerprint=fingerprint)


# ---------------------------------------------------------------------------
# ablations

TABLE5_GRID = [  # (use_vocab, use_token_norm)
    (True, True), (False, True), (True, False), (False, False),
]
TABLE6_GRID = [  # (include special tokens, include normal tokens)
    (True, True), (False, True), (True, False),
]


def _with_toggles(config: TrainConfig, ptb_vocab: bool | None = None,
                  tok_norm: bool | None = None,
                  special_tokens: tuple[bool, bool] | None = None) -> TrainConfig:
    cfg = dataclasses.replace(config)
    adv = dataclasses.replace(config.adv)
    if ptb_vocab is not None:
        adv.use_vocab = ptb_vocab
    if tok_norm is not None:
        adv.use_token_norm = tok_norm
    if special_tokens is not None:
        include_special, include_normal = special_tokens
        specials = frozenset({CLS, SEP, UNK})
        if include_special and include_normal:
            adv.special_token_policy = SpecialTokenPolicy("exclude", frozenset())
        elif include_normal:
            adv.special_token_policy = SpecialTokenPolicy("exclude", specials)
        elif include_special:
            adv.special_token_policy = SpecialTokenPolicy("include", specials)
        else:
            raise ValueError("at least one token group must participate")
    cfg.adv = adv
    return cfg


def run_ablation(config: TrainConfig, grid: str | dict = "table5",
                 seeds: list[int] | None = None) -> list[dict]:
    """One run per toggle combination and seed, joined into one table.

    ``grid`` is a preset name or a dict of toggle-name -> list of values
    (supported toggles: ptb_vocab, tok_norm, special_tokens); the cross
    product defines the rows. All arms share the data seed so they see
    identical batches; the init and adversarial seeds vary only across
    replication seeds, never across arms.
    """
    seeds = seeds or [1, 2, 3]
    rows = []
    if grid == "table5":
        combos = [{"ptb_vocab": v, "tok_norm": t} for v, t in TABLE5_GRID]
    elif grid == "table6":
        combos = [{"special_tokens": st} for st in TABLE6_GRID]
    elif isinstance(grid, dict):
        unsupported = set(grid) - {"ptb_vocab", "tok_norm", "special_tokens"}
        if unsupported:
            raise ValueError(f"unsupported ablation toggles: {sorted(unsupported)}")
        names = list(grid)
        combos = [dict(zip(names, values)) for values in product(*grid.values())]
    else:
        raise ValueError(f"unknown ablation grid {grid!r}")

    for combo in combos:
        metrics = []
        for s in seeds:
            arm = _with_toggles(config, **combo)
            arm.seeds = Seeds(init=s, data=config.seeds.data, adversarial=s + 1000)
            arm.run_name = f"{config.run_name}-ablate-" + "-".join(
                f"{k}{v}" for k, v in combo.items()) + f"-s{s}"
            arm.emit_metrics = False
            arm.save_ptb_vocab = False
            result = train(arm)
            metrics.append(result.dev_metric)
        rows.append({
            **{k: (list(v) if isinstance(v, tuple) else v) for k, v in combo.items()},
            "per_seed": metrics,
            "mean": float(np.mean(metrics)),
            "std": float(np.std(metrics)),
        })
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    lines = []
    keys = [k for k in rows[0] if k not in ("per_seed", "mean", "std")]
    header = " | ".join(keys + ["mean", "std", "per-seed"])
    lines.append(header)
    lines.append("-" * len(header))
    for row in rows:
        cells = [str(row[k]) for k in keys]
        cells.append(f"{row['mean']:.4f}")
        cells.append(f"{row['std']:.4f}")
        cells.append(",".join(f"{m:.4f}" for m in row["per_seed"]))
        lines.append(" | ".join(cells))
    return "\n".join(lines)
