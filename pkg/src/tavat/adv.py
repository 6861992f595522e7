"""Perturbation algebra and the adversarial inner loop.

Two perturbations ride on the embedding output: an instance-level one
bounded by a per-example Frobenius ball, and a token-level one whose
ascent direction is normalized per token and re-scaled by each token's
share of the largest accumulated perturbation in its sequence. The
token-level table persists across batches through the perturbation
vocabulary. PGD and the single-perturbation accumulate-K baseline fall
out of the same loop as configuration reductions.

All update arithmetic here is plain float64 ndarray math; gradients
come from one tape replay per inner step, which yields the parameter,
instance, and token gradients simultaneously at the same evaluation
point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward
from .vocab import PerturbationVocabulary, gather, scatter

NORM_FLOOR = 1e-12
PROJECT_SLACK = 1e-12


class ConfigError(ValueError):
    """Inconsistent adversarial configuration."""


class NonFiniteGradient(FloatingPointError):
    """An inner step saw NaN/Inf; the step aborts before any state changes."""


@dataclass(frozen=True)
class SpecialTokenPolicy:
    """Which token ids may participate in the perturbation vocabulary.

    mode "exclude": listed ids are kept out (empty set means everyone
    participates); mode "include": only listed ids participate.
    """

    mode: str = "exclude"
    ids: frozenset = frozenset()

    def __post_init__(self):
        if self.mode not in ("exclude", "include"):
            raise ConfigError(f"unknown special-token policy mode {self.mode!r}")
        object.__setattr__(self, "ids", frozenset(self.ids))

    def permits(self, token_id: int) -> bool:
        if self.mode == "exclude":
            return token_id not in self.ids
        return token_id in self.ids


@dataclass
class AdvConfig:
    """Knobs of the adversarial loop; ablation switches included."""

    epsilon: float = 1.0
    sigma: float = 0.08            # 1e-2 * sqrt(default embedding dim)
    alpha: float = 0.3
    K: int = 3
    use_vocab: bool = True
    use_token_norm: bool = True
    use_instance_delta: bool = True
    special_token_policy: SpecialTokenPolicy = field(default_factory=SpecialTokenPolicy)
    mode: str = "tavat"                    # "tavat" | "freelb" | "pgd"
    eta_epsilon: float | None = None       # optional separate bound for the token perturbation
    scale_from_ascended: bool = False      # alternative scaling-index reading

    def validate(self) -> None:
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not isinstance(self.K, int) or self.K < 1:
            raise ConfigError(f"K must be a positive integer, got {self.K}")
        if self.mode not in ("tavat", "freelb", "pgd"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode in ("freelb", "pgd") and (self.use_vocab or self.use_token_norm):
            raise ConfigError(f"mode={self.mode} requires use_vocab=False and use_token_norm=False")
        if self.eta_epsilon is not None and self.eta_epsilon <= 0:
            raise ConfigError(f"eta_epsilon must be positive, got {self.eta_epsilon}")

    @property
    def eta_bound(self) -> float:
        return self.epsilon if self.eta_epsilon is None else self.eta_epsilon

    @property
    def eta_active(self) -> bool:
        # With both token-level features off the loop collapses to the
        # single-perturbation baseline: only one perturbation remains.
        return self.mode == "tavat" and (self.use_vocab or self.use_token_norm)

    @property
    def delta_active(self) -> bool:
        return self.use_instance_delta or not self.eta_active


@dataclass
class PerturbationPair:
    """Instance- and token-level perturbations for one batch."""

    delta: np.ndarray | None
    eta: np.ndarray | None
    token_ids: np.ndarray
    mask: np.ndarray


@dataclass
class AccumulatedGradient:
    """Running parameter-gradient sum over the inner steps."""

    sums: dict = field(default_factory=dict)
    steps: int = 0

    def add(self, named_grads, weight: float) -> None:
        for name, g in named_grads:
            self.sums[name] = self.sums.get(name, 0.0) + weight * g
        self.steps += 1

    def replace(self, named_grads) -> None:
        self.sums = {name: g.copy() for name, g in named_grads}
        self.steps += 1


@dataclass
class StepReport:
    """What one batch step did: losses, norms, gradient, instrumentation."""

    losses: list
    delta_norm_trace: list
    eta_norm_trace: list
    grad: AccumulatedGradient
    counters: dict
    recorded: list

    @property
    def final_delta_norms(self):
        return self.delta_norm_trace[-1] if self.delta_norm_trace else None

    @property
    def final_eta_norms(self):
        return self.eta_norm_trace[-1] if self.eta_norm_trace else None


def example_norms(p: np.ndarray) -> np.ndarray:
    """Per-example Frobenius norm over the trailing (length, dim) axes."""
    return np.sqrt(np.sum(p * p, axis=(1, 2)))


def init_delta(shape, sigma: float, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-sigma, sigma)/sqrt(dim) draw with padded rows zeroed."""
    if sigma < 0:
        raise ConfigError(f"sigma must be non-negative, got {sigma}")
    dim = shape[-1]
    out = rng.uniform(-sigma, sigma, size=tuple(shape)) / math.sqrt(dim)
    out[~np.asarray(mask, dtype=bool)] = 0.0
    return out


def project_frobenius(p: np.ndarray, epsilon: float) -> np.ndarray:
    """Scale onto the epsilon ball; interior points come back untouched."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    norm = math.sqrt(float(np.sum(p * p)))
    if norm <= epsilon * (1.0 + PROJECT_SLACK):
        return p
    return p * (epsilon / norm)


def project_frobenius_batch(p: np.ndarray, epsilon: float) -> np.ndarray:
    """Per-example projection over the trailing (length, dim) axes."""
    norms = np.sqrt(np.sum(p * p, axis=(1, 2), keepdims=True))
    factor = np.where(norms > epsilon * (1.0 + PROJECT_SLACK),
                      epsilon / np.maximum(norms, NORM_FLOOR), 1.0)
    return p * factor


def scaling_index(eta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Each token's perturbation norm over the sequence maximum.

    Padded positions get 0. When every norm sits below the floor the
    unpadded indices all get 1, so a cold-start ascent step survives
    the rescale.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("scaling_index: sequence has no unpadded tokens")
    norms = np.sqrt(np.sum(eta * eta, axis=-1))
    peak = float(np.max(np.where(mask, norms, 0.0)))
    if peak < NORM_FLOOR:
        return mask.astype(np.float64)
    return np.where(mask, norms / peak, 0.0)


def scaling_index_batch(eta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    norms = np.sqrt(np.sum(eta * eta, axis=-1))
    peak = np.max(np.where(mask, norms, 0.0), axis=-1, keepdims=True)
    cold = peak < NORM_FLOOR
    n = np.where(cold, 1.0, norms / np.maximum(peak, NORM_FLOOR))
    return np.where(mask, n, 0.0)


def _check_finite(name: str, arr: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(arr.size - np.isfinite(arr).sum())
        raise NonFiniteGradient(
            f"{name} has {bad} non-finite entries at inner step {step}; aborting")


def token_step(eta: np.ndarray, grad_eta: np.ndarray, alpha: float, epsilon: float,
               mask: np.ndarray, use_token_norm: bool = True,
               scale_from_ascended: bool = False, _step: int = 0) -> np.ndarray:
    """One ascent step of the token-level perturbation.

    Per-token normalized gradient step, rescale by the scaling index
    computed from the pre-step perturbation, then whole-sequence ball
    projection. With use_token_norm off the gradient is normalized over
    the whole sequence and no rescale happens.
    """
    mask = np.asarray(mask, dtype=bool)
    _check_finite("grad_eta", grad_eta, _step)
    mask3 = mask[:, :, None]
    g = np.where(mask3, grad_eta, 0.0)

    if use_token_norm:
        gnorm = np.sqrt(np.sum(g * g, axis=2, keepdims=True))
        step = np.where(gnorm >= NORM_FLOOR, alpha * g / np.maximum(gnorm, NORM_FLOOR), 0.0)
        ascended = eta + step
        basis = ascended if scale_from_ascended else eta
        n = scaling_index_batch(basis, mask)
        new = n[:, :, None] * ascended
    else:
        gnorm = np.sqrt(np.sum(g * g, axis=(1, 2), keepdims=True))
        step = np.where(gnorm >= NORM_FLOOR, alpha * g / np.maximum(gnorm, NORM_FLOOR), 0.0)
        new = eta + step

    new = project_frobenius_batch(new, epsilon)
    new[~mask] = 0.0
    return new


def instance_step(delta: np.ndarray, grad_delta: np.ndarray, alpha: float,
                  epsilon: float, mask: np.ndarray, _step: int = 0) -> np.ndarray:
    """One whole-sequence-normalized ascent step with ball projection."""
    mask = np.asarray(mask, dtype=bool)
    _check_finite("grad_delta", grad_delta, _step)
    g = np.where(mask[:, :, None], grad_delta, 0.0)
    gnorm = np.sqrt(np.sum(g * g, axis=(1, 2), keepdims=True))
    step = np.where(gnorm >= NORM_FLOOR, alpha * g / np.maximum(gnorm, NORM_FLOOR), 0.0)
    new = delta + step
    new = project_frobenius_batch(new, epsilon)
    new[~mask] = 0.0
    return new


def tavat_batch_step(model, batch, vocab: PerturbationVocabulary | None,
                     cfg: AdvConfig, optimizer, rng: np.random.Generator,
                     record: bool = False) -> StepReport:
    """One full batch step: init, K ascent steps, vocabulary and parameter update.

    Parameters and vocabulary are only mutated after the whole inner loop
    has completed, so a non-finite abort leaves both untouched.
    """
    cfg.validate()
    if batch.size == 0:
        raise ValueError("empty batch")
    if cfg.use_vocab and vocab is None:
        raise ConfigError("use_vocab=True needs a perturbation vocabulary")

    ids = batch.token_ids
    mask = batch.mask
    bsz, length = ids.shape
    dim = model.config.dim
    shape = (bsz, length, dim)

    delta = init_delta(shape, cfg.sigma, mask, rng) if cfg.delta_active else None
    eta = None
    counters = {
        "eta_vocab_init": 0, "eta_random_init": 0,
        "token_norm_steps": 0, "whole_seq_eta_steps": 0,
        "delta_steps": 0, "vocab_scatters": 0,
    }
    if cfg.eta_active:
        if cfg.use_vocab:
            eta = gather(vocab, ids, mask)
            counters["eta_vocab_init"] += 1
        else:
            eta = init_delta(shape, cfg.sigma, mask, rng)
            counters["eta_random_init"] += 1

    accum = AccumulatedGradient()
    inv_k = 1.0 / cfg.K
    losses: list[float] = []
    delta_trace: list[np.ndarray] = []
    eta_trace: list[np.ndarray] = []
    recorded: list[tuple] = []

    for t in range(cfg.K):
        x = model.embed(batch)
        perturbed = x
        dt = et = None
        if cfg.delta_active:
            dt = Tensor(delta, requires_grad=True)
            perturbed = T.add(perturbed, dt)
        if cfg.eta_active:
            et = Tensor(eta, requires_grad=True)
            perturbed = T.add(perturbed, et)
        if record:
            recorded.append(PerturbationPair(
                delta=delta.copy() if delta is not None else None,
                eta=eta.copy() if eta is not None else None,
                token_ids=ids, mask=mask))

        logits = model.forward_from_embeddings(perturbed, mask, train=True)
        loss = model.loss(logits, batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteGradient(f"loss is non-finite at inner step {t}; aborting")
        grads = backward(loss)
        losses.append(value)

        named = ((name, grads[p]) for name, p in model.params.items())
        if cfg.mode == "pgd":
            accum.replace(named)
        else:
            accum.add(named, inv_k)
        for p in model.params.values():
            p.grad = None

        if cfg.eta_active:
            eta = token_step(eta, grads[et], cfg.alpha, cfg.eta_bound, mask,
                             use_token_norm=cfg.use_token_norm,
                             scale_from_ascended=cfg.scale_from_ascended, _step=t)
            if cfg.use_token_norm:
                counters["token_norm_steps"] += 1
            else:
                counters["whole_seq_eta_steps"] += 1
            eta_trace.append(example_norms(eta))
        if cfg.delta_active:
            delta = instance_step(delta, grads[dt], cfg.alpha, cfg.epsilon, mask, _step=t)
            counters["delta_steps"] += 1
            delta_trace.append(example_norms(delta))

    if cfg.eta_active and cfg.use_vocab:
        scatter(vocab, ids, mask, eta, special_token_policy=cfg.special_token_policy,
                epsilon=cfg.eta_bound)
        counters["vocab_scatters"] += 1
    optimizer.step(model.params, accum.sums)

    return StepReport(losses=losses, delta_norm_trace=delta_trace,
                      eta_norm_trace=eta_trace, grad=accum,
                      counters=counters, recorded=recorded)
