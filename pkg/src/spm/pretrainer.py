"""Field-aware masked language model pretraining.

Each field gets its own masking policy.  The name field samples positions in
proportion to term weight; other fields (and the query block) sample
uniformly.  All selected positions of an example are corrupted jointly.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .corpus import (
    MASK,
    N_RESERVED,
    QUERY_SEGMENT,
    SEGMENT_OF,
    EncoderInput,
    StructuredDocument,
    Vocab,
    assemble_pretrain_input,
    build_vocab,
)
from .encoder import EncoderConfig, EncoderParams, collate, encoder_forward, mlm_logits

log = logging.getLogger(__name__)

ACTION_MASK, ACTION_RANDOM, ACTION_KEEP = 0, 1, 2
ACTION_PROBS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class Policy:
    kind: str  # "uniform" | "term_weighted"
    rate: float = 0.15

    def __post_init__(self):
        if self.kind not in ("uniform", "term_weighted"):
            raise ValueError(f"unknown mask policy {self.kind!r}")
        if not 0.0 < self.rate < 1.0:
            raise ValueError("mask rate must lie in (0, 1)")


@dataclass(frozen=True)
class MaskStrategy:
    """Policy per segment id; segments without an entry use ``default``."""

    per_segment: dict[int, Policy] = field(default_factory=dict)
    default: Policy = Policy("uniform", 0.15)

    @classmethod
    def standard(cls, rate: float = 0.15) -> MaskStrategy:
        return cls({SEGMENT_OF["name"]: Policy("term_weighted", rate)}, Policy("uniform", rate))

    @classmethod
    def uniform(cls, rate: float = 0.15) -> MaskStrategy:
        return cls({}, Policy("uniform", rate))

    def policy(self, segment: int) -> Policy:
        return self.per_segment.get(segment, self.default)


@dataclass(frozen=True)
class MaskPlan:
    positions: np.ndarray  # sorted indices into the input
    weights: np.ndarray  # m per position; 1.0 here
    actions: np.ndarray  # ACTION_* codes
    replacements: np.ndarray  # token id written at each position (original id for KEEP)


def capped_proportional(weights: np.ndarray, expected: float) -> np.ndarray:
    """Inclusion probabilities proportional to ``weights``, capped at 1, summing to ``expected``."""
    n = len(weights)
    expected = min(expected, float(n))
    p = np.zeros(n)
    capped = np.zeros(n, dtype=bool)
    w = np.asarray(weights, dtype=np.float64)
    while True:
        free = ~capped
        budget = expected - capped.sum()
        total = w[free].sum()
        if budget <= 0 or total <= 0:
            break
        p[free] = budget * w[free] / total
        over = free & (p >= 1.0)
        if not over.any():
            break
        capped |= over
        p[capped] = 1.0
    return np.clip(p, 0.0, 1.0)


def sample_masks(inp: EncoderInput, strategy: MaskStrategy, vocab: Vocab, rng: np.random.Generator) -> MaskPlan:
    content = np.flatnonzero(inp.content_mask)
    if content.size == 0:
        raise ValueError("input has no content tokens to mask")
    selected = np.zeros(len(inp), dtype=bool)
    segs = inp.segment_ids[content]
    for seg in np.unique(segs):
        pos = content[segs == seg]
        pol = strategy.policy(int(seg))
        if pol.kind == "uniform":
            probs = np.full(pos.size, pol.rate)
        else:
            w = vocab.term_weight[inp.token_ids[pos]]
            probs = capped_proportional(np.maximum(w, 1e-12), pol.rate * pos.size)
        selected[pos] = rng.random(pos.size) < probs
    if not selected.any():
        selected[content[rng.integers(content.size)]] = True
    positions = np.flatnonzero(selected)
    actions = rng.choice(3, size=positions.size, p=ACTION_PROBS)
    original = inp.token_ids[positions]
    replacements = original.copy()
    replacements[actions == ACTION_MASK] = MASK
    rand = np.flatnonzero(actions == ACTION_RANDOM)
    if rand.size:
        # draw from non-reserved ids other than the original
        n_choices = len(vocab) - N_RESERVED - 1
        if n_choices < 1:
            actions[rand] = ACTION_KEEP
        else:
            draw = N_RESERVED + rng.integers(n_choices, size=rand.size)
            draw = draw + (draw >= original[rand])
            replacements[rand] = draw
    return MaskPlan(positions, np.ones(positions.size), actions, replacements)


def apply_masks(inp: EncoderInput, plan: MaskPlan) -> tuple[EncoderInput, np.ndarray, np.ndarray]:
    """Corrupted input, original ids at the selected positions, and their m-weights."""
    if plan.positions.size and (plan.positions.min() < 0 or plan.positions.max() >= len(inp)):
        raise IndexError("mask position outside the input")
    tokens = inp.token_ids.copy()
    tokens[plan.positions] = plan.replacements
    corrupted = EncoderInput(tokens, inp.segment_ids, inp.position_ids, inp.attention_mask)
    return corrupted, inp.token_ids[plan.positions].copy(), plan.weights.copy()


@dataclass(frozen=True)
class PretrainConfig:
    rate: float = 0.15
    epochs: int = 10
    lr: float = 1e-3
    warmup: float = 0.1
    batch_size: int = 32
    seed: int = 0
    max_steps: int | None = None


def mlm_loss(inputs: Sequence[EncoderInput], params: EncoderParams, strategy: MaskStrategy, vocab: Vocab, rng: np.random.Generator, train: bool = True) -> tuple[nk.Tensor, int, int]:
    """Masked LM loss over one batch; also returns (selected, content) token counts."""
    corrupted, targets, weights, flat = [], [], [], []
    n_sel = n_content = 0
    width = max(len(x) for x in inputs)
    for row, inp in enumerate(inputs):
        plan = sample_masks(inp, strategy, vocab, rng)
        c, t, w = apply_masks(inp, plan)
        corrupted.append(c)
        targets.append(t)
        weights.append(w)
        flat.append(row * width + plan.positions)
        n_sel += plan.positions.size
        n_content += int(inp.content_mask.sum())
    batch = collate(corrupted)
    hidden = encoder_forward(batch, params, rng if train else None)
    rows = nk.take(hidden.reshape(-1, params.config.d), np.concatenate(flat))
    logits = mlm_logits(rows, params)
    loss = nk.masked_cross_entropy(logits, np.concatenate(targets), np.concatenate(weights))
    return loss, n_sel, n_content


def mlm_step(inputs: Sequence[EncoderInput], params: EncoderParams, optimizer: nk.Adam, strategy: MaskStrategy, vocab: Vocab, rng: np.random.Generator, lr: float | None = None) -> float:
    optimizer.zero_grad()
    loss, _, _ = mlm_loss(inputs, params, strategy, vocab, rng)
    loss.backward()
    optimizer.step(lr)
    return loss.item()


@dataclass
class PretrainResult:
    params: EncoderParams
    vocab: Vocab
    losses: list[float]
    masked_fraction: float


def pretrain_examples(corpus: Sequence[StructuredDocument], vocab: Vocab, fields=None) -> list[EncoderInput]:
    """Assembled inputs for documents carrying a top query; others are skipped."""
    kw = {} if fields is None else {"fields": fields}
    return [assemble_pretrain_input(doc, vocab, **kw) for doc in corpus if doc.get("top_query")]


def pretrain(
    corpus: Sequence[StructuredDocument],
    encoder_config: EncoderConfig | None = None,
    strategy: MaskStrategy | None = None,
    config: PretrainConfig = PretrainConfig(),
    vocab: Vocab | None = None,
    checkpoint_path: str | Path | None = None,
    loss_path: str | Path | None = None,
) -> PretrainResult:
    if not corpus:
        raise ValueError("empty corpus")
    vocab = vocab or build_vocab(corpus)
    strategy = strategy or MaskStrategy.standard(config.rate)
    if encoder_config is None:
        encoder_config = EncoderConfig(vocab_size=len(vocab))
    rng = np.random.default_rng(config.seed)
    params = EncoderParams.init(encoder_config, rng)
    examples = pretrain_examples(corpus, vocab)
    if not examples:
        raise ValueError("no document carries a top query")
    steps_per_epoch = -(-len(examples) // config.batch_size)
    total = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    opt = nk.Adam(params.parameters(), lr=config.lr)
    losses: list[float] = []
    n_sel = n_content = 0
    step = 0
    while step < total:
        order = rng.permutation(len(examples))
        for start in range(0, len(order), config.batch_size):
            if step >= total:
                break
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            lr = nk.linear_warmup_decay(step, total, config.lr, config.warmup)
            opt.zero_grad()
            loss, s, c = mlm_loss(batch, params, strategy, vocab, rng)
            loss.backward()
            opt.step(lr)
            losses.append(loss.item())
            n_sel += s
            n_content += c
            step += 1
            if step % 100 == 0:
                log.info("pretrain step %d/%d loss %.4f", step, total, np.mean(losses[-100:]))
    result = PretrainResult(params, vocab, losses, n_sel / max(1, n_content))
    if checkpoint_path is not None:
        save_pretrained(checkpoint_path, result)
    if loss_path is not None:
        write_loss_curve(loss_path, losses)
    return result


def save_pretrained(path: str | Path, result: PretrainResult) -> None:
    result.params.save(path, meta={"vocab": result.vocab.to_json()})


def write_loss_curve(path: str | Path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])
