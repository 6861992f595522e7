"""Tokenization, synthetic corpora, delimited ingestion, batching.

Word-level whitespace tokenization keeps the pipeline simple: the
training algorithm only needs a stable token inventory. Every sequence
is wrapped in cls/sep so the special-token experiments have real
structure to act on. All randomness flows through explicit seeds.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

PAD, CLS, SEP, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<cls>", "<sep>", "<unk>")


@dataclass
class Tokenizer:
    token_to_id: dict[str, int]
    lowercase: bool = False

    @property
    def vocab_size(self) -> int:
        return len(self.token_to_id)

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (PAD, CLS, SEP, UNK)

    def fingerprint(self) -> str:
        ordered = sorted(self.token_to_id.items(), key=lambda kv: kv[1])
        blob = "\n".join(f"{tok}\t{idx}" for tok, idx in ordered)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def encode(self, text_or_tokens, max_len: int | None = None) -> list[int]:
        """cls + word ids + sep, truncated in the middle so sep stays last."""
        if isinstance(text_or_tokens, str):
            tokens = text_or_tokens.split()
        else:
            tokens = list(text_or_tokens)
        if self.lowercase:
            tokens = [t.lower() for t in tokens]
        ids = [self.token_to_id.get(t, UNK) for t in tokens]
        if max_len is not None:
            if max_len < 2:
                raise ValueError("max_len must leave room for cls and sep")
            ids = ids[: max_len - 2]
        return [CLS] + ids + [SEP]


def build_tokenizer(corpus_or_tokens, lowercase: bool = False) -> Tokenizer:
    """Word-level tokenizer from raw text lines or an explicit token list.

    Non-special ids follow first-occurrence order, which makes the
    fingerprint stable for a fixed source.
    """
    if isinstance(corpus_or_tokens, str):
        words = corpus_or_tokens.split()
    else:
        words = []
        for item in corpus_or_tokens:
            words.extend(item.split() if " " in item else [item])
    if lowercase:
        words = [w.lower() for w in words]
    if not words:
        raise ValueError("cannot build a tokenizer from an empty corpus")
    mapping = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for w in words:
        if w not in mapping:
            mapping[w] = len(mapping)
    return Tokenizer(mapping, lowercase=lowercase)


@dataclass
class Example:
    tokens: list[str]
    label: int | None = None
    tags: list[int] | None = None


@dataclass
class Batch:
    """Padded id matrix with its mask; mask is true exactly off-padding."""

    token_ids: np.ndarray              # (batch, length) int64
    mask: np.ndarray                   # (batch, length) bool
    labels: np.ndarray                 # (batch,) or (batch, length) int64

    def __post_init__(self):
        if not (self.mask == (self.token_ids != PAD)).all():
            raise ValueError("mask must be true exactly where token_id != pad")
        if not self.mask.any(axis=1).all():
            raise ValueError("every example needs at least one real token")

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


# ---------------------------------------------------------------------------
# synthetic tasks

CUES_PER_CLASS = 6
FILLER_COUNT = 40


def synthetic_vocabulary(classes: int = 2) -> list[str]:
    cues = [f"cue{c}_{i}" for c in range(classes) for i in range(CUES_PER_CLASS)]
    fillers = [f"filler{i}" for i in range(FILLER_COUNT)]
    return cues + fillers


def generate_synthetic_classification(n: int, seed: int, noise: float,
                                      classes: int = 2,
                                      min_len: int = 6, max_len: int = 12) -> list[Example]:
    """Filler sequences with planted cue tokens; label = cue-class majority.

    The planted majority is strict, so with noise 0 a bag-of-cues counter
    classifies the set perfectly; labels are flipped to a different class
    with probability ``noise``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.0 <= noise < 0.5:
        raise ValueError("noise must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(n):
        true_class = int(rng.integers(classes))
        majority = int(rng.integers(2, 5))
        counts = [int(rng.integers(0, majority)) for _ in range(classes)]
        counts[true_class] = majority
        cues = [f"cue{c}_{int(rng.integers(CUES_PER_CLASS))}"
                for c in range(classes) for _ in range(counts[c])]
        length = max(int(rng.integers(min_len, max_len + 1)), len(cues))
        fillers = [f"filler{int(rng.integers(FILLER_COUNT))}" for _ in range(length - len(cues))]
        tokens = cues + fillers
        rng.shuffle(tokens)
        label = true_class
        if noise > 0 and rng.random() < noise:
            label = int((true_class + 1 + rng.integers(classes - 1)) % classes)
        examples.append(Example(tokens=tokens, label=label))
    return examples


def cue_majority_oracle(tokens: list[str], classes: int = 2) -> int:
    """Bag-of-cue-words classifier used to sanity-check generated data."""
    counts = [0] * classes
    for t in tokens:
        if t.startswith("cue"):
            counts[int(t[3: t.index("_")])] += 1
    return int(np.argmax(counts))


TAG_TYPES = ("T0", "T1")
ENTITY_WORDS_PER_TYPE = 5


def tagging_tag_names() -> list[str]:
    names = ["O"]
    for t in TAG_TYPES:
        names.extend([f"B-{t}", f"I-{t}"])
    return names


def tagging_vocabulary() -> list[str]:
    ents = [f"ent{t}_{i}" for t in TAG_TYPES for i in range(ENTITY_WORDS_PER_TYPE)]
    return ents + [f"filler{i}" for i in range(FILLER_COUNT)]


def generate_synthetic_tagging(n: int, seed: int,
                               min_len: int = 8, max_len: int = 14) -> list[Example]:
    """Filler sequences with planted entity spans carrying BIO tags.

    Entity words are type-distinctive and spans are separated by at least
    one filler, so spans can be recovered from the surface tokens alone.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    names = tagging_tag_names()
    tag_id = {name: i for i, name in enumerate(names)}
    examples = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        tokens = [f"filler{int(rng.integers(FILLER_COUNT))}" for _ in range(length)]
        tags = [tag_id["O"]] * length
        spans = int(rng.integers(0, 3))
        cursor = 0
        for _ in range(spans):
            span_len = int(rng.integers(1, 3))
            if cursor + span_len + 1 > length:
                break
            start = cursor + int(rng.integers(0, max(length - cursor - span_len, 1)))
            if start + span_len >= length:
                start = length - span_len - 1
            if start < cursor:
                break
            t = TAG_TYPES[int(rng.integers(len(TAG_TYPES)))]
            for j in range(span_len):
                word = f"ent{t}_{int(rng.integers(ENTITY_WORDS_PER_TYPE))}"
                tokens[start + j] = word
                tags[start + j] = tag_id[f"B-{t}"] if j == 0 else tag_id[f"I-{t}"]
            cursor = start + span_len + 1
        examples.append(Example(tokens=tokens, tags=tags))
    return examples


def spans_from_tags(tags, names: list[str] | None = None) -> set[tuple[int, int, str]]:
    """(start, end, type) spans from BIO ids; stray I- starts a new span."""
    names = names or tagging_tag_names()
    spans = set()
    start, kind = None, None
    for i, t in enumerate(list(tags) + [0]):
        label = names[t] if t < len(names) else "O"
        if label.startswith("B-") or (label.startswith("I-") and kind != label[2:]):
            if start is not None:
                spans.add((start, i, kind))
            start, kind = i, label[2:]
        elif label == "O" and start is not None:
            spans.add((start, i, kind))
            start, kind = None, None
    return spans


def span_f1(gold_seqs, pred_seqs) -> tuple[float, float, float]:
    """Exact-match span precision/recall/F1 over aligned tag sequences."""
    tp = fp = fn = 0
    for gold, pred in zip(gold_seqs, pred_seqs):
        g, p = spans_from_tags(gold), spans_from_tags(pred)
        tp += len(g & p)
        fp += len(p - g)
        fn += len(g - p)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# ---------------------------------------------------------------------------
# file ingestion

def load_delimited(path, column_map: dict[str, int | str], delimiter: str = "\t",
                   has_header: bool = False, label_map: dict[str, int] | None = None) -> list[Example]:
    """UTF-8 delimited rows -> examples; malformed rows report line numbers."""
    text_col, label_col = column_map["text"], column_map["label"]
    examples = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = None
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and has_header:
                header = row
                continue
            if not row:
                continue
            try:
                tc = header.index(text_col) if isinstance(text_col, str) else text_col
                lc = header.index(label_col) if isinstance(label_col, str) else label_col
                text, raw_label = row[tc], row[lc]
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: missing required columns in {row!r}")
            if label_map is not None:
                if raw_label not in label_map:
                    raise ValueError(f"{path}:{lineno}: unknown label {raw_label!r}")
                label = label_map[raw_label]
            else:
                try:
                    label = int(raw_label)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: unknown label {raw_label!r}")
            examples.append(Example(tokens=text.split(), label=label))
    return examples


# ---------------------------------------------------------------------------
# batching

@dataclass
class EncodedExample:
    ids: list[int]
    label: int | None = None
    tags: list[int] | None = None


def encode_examples(tokenizer: Tokenizer, examples, max_len: int) -> list[EncodedExample]:
    out = []
    for ex in examples:
        ids = tokenizer.encode(ex.tokens, max_len=max_len)
        if ex.tags is not None:
            tags = [0] + list(ex.tags)[: max_len - 2] + [0]   # cls/sep tagged O
            out.append(EncodedExample(ids=ids, tags=tags))
        else:
            out.append(EncodedExample(ids=ids, label=ex.label))
    return out


def make_batches(encoded, batch_size: int, seed: int | None = None,
                 shuffle: bool = False) -> list[Batch]:
    """Pad to the per-batch max length; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.arange(len(encoded))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    batches = []
    for start in range(0, len(encoded), batch_size):
        chunk = [encoded[i] for i in order[start:start + batch_size]]
        width = max(len(ex.ids) for ex in chunk)
        ids = np.full((len(chunk), width), PAD, dtype=np.int64)
        tagging = chunk[0].tags is not None
        labels = (np.zeros((len(chunk), width), dtype=np.int64) if tagging
                  else np.zeros(len(chunk), dtype=np.int64))
        for r, ex in enumerate(chunk):
            ids[r, : len(ex.ids)] = ex.ids
            if tagging:
                labels[r, : len(ex.tags)] = ex.tags
            else:
                labels[r] = ex.label
        batches.append(Batch(token_ids=ids, mask=ids != PAD, labels=labels))
    return batches


def subsample(examples, count: int | None = None, fraction: float | None = None,
              seed: int = 0):
    """Uniform sample without replacement, preserving original order."""
    if (count is None) == (fraction is None):
        raise ValueError("specify exactly one of count or fraction")
    n = len(examples)
    k = count if count is not None else int(round(fraction * n))
    if k > n:
        raise ValueError(f"cannot subsample {k} from population of {n}")
    if k == n:
        return list(examples)
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return [examples[i] for i in idx]


def label_histogram(examples) -> dict[int, int]:
    hist: dict[int, int] = {}
    for ex in examples:
        if ex.label is not None:
            hist[ex.label] = hist.get(ex.label, 0) + 1
    return hist


# ---------------------------------------------------------------------------
# dataset assembly

@dataclass
class DatasetSpec:
    """What data to run on and how to split it, fully seed-determined."""

    source: str = "synthetic-classification"   # | "synthetic-tagging" | "delimited"
    n: int = 2000
    noise: float = 0.2
    classes: int = 2
    path: str | None = None
    column_map: dict = field(default_factory=lambda: {"text": 0, "label": 1})
    delimiter: str = "\t"
    has_header: bool = False
    dev_fraction: float = 0.2
    test_fraction: float = 0.0
    split_seed: int = 13
    subsample_count: int | None = None
    subsample_fraction: float | None = None


def build_dataset(spec: DatasetSpec, seed: int, tokenizer: Tokenizer | None = None):
    """Returns (tokenizer, train, dev, test) example lists, splits disjoint."""
    if spec.source == "synthetic-classification":
        examples = generate_synthetic_classification(
            spec.n, seed=seed, noise=spec.noise, classes=spec.classes)
        vocab = synthetic_vocabulary(spec.classes)
    elif spec.source == "synthetic-tagging":
        examples = generate_synthetic_tagging(spec.n, seed=seed)
        vocab = tagging_vocabulary()
    elif spec.source == "delimited":
        if spec.path is None:
            raise ValueError("delimited source needs a path")
        examples = load_delimited(spec.path, spec.column_map,
                                  delimiter=spec.delimiter, has_header=spec.has_header)
        vocab = sorted({t for ex in examples for t in ex.tokens})
    else:
        raise ValueError(f"unknown dataset source {spec.source!r}")

    if tokenizer is None:
        tokenizer = build_tokenizer(vocab)

    order = np.arange(len(examples))
    np.random.default_rng(spec.split_seed).shuffle(order)
    n_test = int(round(spec.test_fraction * len(examples)))
    n_dev = int(round(spec.dev_fraction * len(examples)))
    test = [examples[i] for i in order[:n_test]]
    dev = [examples[i] for i in order[n_test:n_test + n_dev]]
    train = [examples[i] for i in order[n_test + n_dev:]]

    if spec.subsample_count is not None or spec.subsample_fraction is not None:
        train = subsample(train, count=spec.subsample_count,
                          fraction=spec.subsample_fraction, seed=spec.split_seed + 1)
    return tokenizer, train, dev, test
