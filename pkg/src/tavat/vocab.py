"""Global accumulated perturbation table: one row per vocabulary token.

Rows are written back from the final token-level perturbations of each
batch (colliding occurrences are averaged so the result is independent
of position order) and read out to initialize the next batch. The table
persists to a small binary format and can be folded into an embedding
table to warm-start ordinary fine-tuning.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import EmbeddingTable
from .tensor import Tensor

VOCAB_MAGIC = b"TAVV"
VOCAB_VERSION = 1
PAD_ID = 0


class VocabularyFormatError(ValueError):
    """Corrupt, mis-versioned, or mismatched vocabulary file."""


class FingerprintMismatch(VocabularyFormatError):
    """Vocabulary was built against a different tokenizer."""


@dataclass
class PerturbationVocabulary:
    table: np.ndarray                       # (N, D) float64
    meta: dict = field(default_factory=dict)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]


def init_vocabulary(n: int, d: int, sigma: float, rng: np.random.Generator,
                    meta: dict | None = None) -> PerturbationVocabulary:
    """Uniform(-sigma, sigma)/sqrt(D) table with the padding row zeroed."""
    if n <= 0 or d <= 0:
        raise ValueError("vocabulary dimensions must be positive")
    table = rng.uniform(-sigma, sigma, size=(n, d)) / math.sqrt(d)
    table[PAD_ID] = 0.0
    full_meta = {"sigma": sigma, "steps_seen": 0}
    if meta:
        full_meta.update(meta)
    return PerturbationVocabulary(table=table, meta=full_meta)


def gather(vocab: PerturbationVocabulary, token_ids: np.ndarray,
           mask: np.ndarray) -> np.ndarray:
    """Per-position rows of the table; padded positions come back zero."""
    ids = np.asarray(token_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab.vocab_size):
        raise IndexError(
            f"gather: token id out of range [0, {vocab.vocab_size}): max={ids.max()}")
    out = vocab.table[ids].copy()
    out[~np.asarray(mask, dtype=bool)] = 0.0
    return out


def scatter(vocab: PerturbationVocabulary, token_ids: np.ndarray, mask: np.ndarray,
            eta_final: np.ndarray, special_token_policy=None,
            epsilon: float | None = None) -> PerturbationVocabulary:
    """Write final perturbation slices back by token id.

    Repeated ids within the batch are averaged; the padding row and any
    policy-excluded ids are never touched. Row norms are clamped to the
    perturbation bound when one is known.
    """
    ids = np.asarray(token_ids).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    slices = np.asarray(eta_final).reshape(-1, vocab.dim)

    keep = mask & (ids != PAD_ID)
    if special_token_policy is not None:
        keep &= np.fromiter((special_token_policy.permits(int(i)) for i in ids),
                            dtype=bool, count=len(ids))
    if not keep.any():
        return vocab

    sums = np.zeros_like(vocab.table)
    counts = np.zeros(vocab.vocab_size)
    np.add.at(sums, ids[keep], slices[keep])
    np.add.at(counts, ids[keep], 1.0)
    written = counts > 0
    vocab.table[written] = sums[written] / counts[written, None]

    bound = epsilon if epsilon is not None else vocab.meta.get("epsilon")
    if bound is not None:
        norms = np.sqrt((vocab.table[written] ** 2).sum(axis=1, keepdims=True))
        over = norms > bound * (1.0 + 1e-12)
        if over.any():
            rows = vocab.table[written]
            rows = np.where(over, rows * (bound / np.maximum(norms, 1e-300)), rows)
            vocab.table[written] = rows
    vocab.meta["steps_seen"] = vocab.meta.get("steps_seen", 0) + 1
    return vocab


def save_vocabulary(vocab: PerturbationVocabulary, path) -> None:
    """magic + version + dims + little-endian float64 rows + JSON trailer."""
    buf = io.BytesIO()
    buf.write(VOCAB_MAGIC)
    buf.write(struct.pack("<III", VOCAB_VERSION, vocab.vocab_size, vocab.dim))
    buf.write(vocab.table.astype("<f8").tobytes())
    trailer = json.dumps(vocab.meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(trailer)))
    buf.write(trailer)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_vocabulary(path, expect_dim: int | None = None,
                    expect_fingerprint: str | None = None) -> PerturbationVocabulary:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = io.BytesIO(raw)
    if view.read(4) != VOCAB_MAGIC:
        raise VocabularyFormatError(f"{path}: not a perturbation vocabulary (bad magic)")
    try:
        version, n, d = struct.unpack("<III", view.read(12))
        table = np.frombuffer(view.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        (tlen,) = struct.unpack("<I", view.read(4))
        meta = json.loads(view.read(tlen).decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise VocabularyFormatError(f"{path}: truncated or corrupt vocabulary") from exc
    if version != VOCAB_VERSION:
        raise VocabularyFormatError(f"{path}: unsupported vocabulary version {version}")
    if expect_fingerprint is not None and meta.get("fingerprint") != expect_fingerprint:
        raise FingerprintMismatch(
            f"{path}: tokenizer fingerprint {meta.get('fingerprint')!r} "
            f"does not match expected {expect_fingerprint!r}")
    if expect_dim is not None and d != expect_dim:
        raise VocabularyFormatError(
            f"{path}: dimension mismatch, file has D={d}, expected D={expect_dim}")
    return PerturbationVocabulary(table=table, meta=meta)


def apply_to_embedding(embedding: EmbeddingTable,
                       vocab: PerturbationVocabulary) -> EmbeddingTable:
    """New embedding table with the learned perturbations added on."""
    if embedding.weights.shape != vocab.table.shape:
        raise ValueError(
            f"apply_to_embedding: embedding {embedding.weights.shape} vs "
            f"vocabulary {vocab.table.shape}")
    return EmbeddingTable(Tensor(embedding.weights.data + vocab.table, requires_grad=True))
