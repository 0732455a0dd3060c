"""Intent-guided extractor bi-encoder: extraction, compression, selection, scoring.

A document is summarised by a bank of learned extractor vectors that attend
over its content-token states with unscaled dot-product attention.  The bank
holds one hit/not-hit pair per query intent plus ``T`` global extractors.
All extracted vectors pass through one shared affine compression layer.  At
match time the query's intent bits pick one member of each pair, the query
attends over the picked vectors plus the globals, and the score is the cosine
between the query and that aggregate.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .corpus import (
    DOC_FIELDS,
    LabeledPair,
    StructuredDocument,
    Vocab,
    assemble_doc_input,
)
from .encoder import EncoderParams, collate, encode_queries, encoder_forward
from .numkernel import Tensor

log = logging.getLogger(__name__)

MODES = ("ige", "global", "meanpool")


@dataclass(frozen=True)
class MatchConfig:
    mode: str = "ige"
    M: int = 3
    T: int = 5
    c: int = 32
    epsilon: float = 0.01
    batch: int = 64
    patience: int = 5
    max_epochs: int = 20
    lr: float = 5e-4
    warmup: float = 0.1
    seed: int = 0
    bank_init_std: float = 0.125

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown match mode {self.mode!r}")
        if self.mode == "global" and self.M != 0:
            raise ValueError("global-only matching requires M = 0")
        if self.mode == "meanpool" and (self.M, self.T) != (0, 1):
            raise ValueError("mean-pool matching caches one vector: use M = 0, T = 1")
        if self.M < 0 or self.T < 0 or self.c < 1:
            raise ValueError("M, T must be nonnegative and c positive")
        if self.mode != "meanpool" and self.M + self.T < 1:
            raise ValueError("need at least one extractor")

    @property
    def n_cached(self) -> int:
        """Vectors stored per document."""
        return 1 if self.mode == "meanpool" else 2 * self.M + self.T

    @property
    def n_matched(self) -> int:
        """Vectors taking part in matching."""
        return 1 if self.mode == "meanpool" else self.M + self.T

    @classmethod
    def for_mode(cls, mode: str, **kw) -> MatchConfig:
        if mode == "global":
            kw.setdefault("T", 8)
            kw["M"] = 0
        elif mode == "meanpool":
            kw["M"], kw["T"] = 0, 1
        return cls(mode=mode, **kw)


# -- core operations -----------------------------------------------------------------
def attention_pool(X: Tensor, Y: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(X Y^T) Y with a row-wise, unscaled softmax.

    ``X`` is [..., r, d], ``Y`` is [..., n, d]; ``mask`` [..., n] restricts the
    softmax to the rows of ``Y`` marked True.
    """
    if Y.shape[-2] == 0:
        raise ValueError("attention over zero rows")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("attention over zero content rows")
        mask = mask[..., None, :]
    scores = X @ nk.swapaxes(Y, -1, -2)
    return nk.row_softmax(scores, mask) @ Y


def extract_document(doc_hiddens: Tensor, bank: Tensor, content_mask: np.ndarray | None = None) -> Tensor:
    """All extractors attend over the content rows at once: [..., n, d] -> [..., E, d]."""
    return attention_pool(bank, doc_hiddens, content_mask)


def compress(v: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if v.shape[-1] != weight.shape[0]:
        raise ValueError(f"compression expects dimension {weight.shape[0]}, got {v.shape[-1]}")
    if v.ndim == 1:
        return nk.reshape(nk.reshape(v, (1, v.shape[0])) @ weight + bias, (weight.shape[1],))
    return v @ weight + bias


def selection_index(bits: Sequence[int], M: int, T: int) -> np.ndarray:
    """Rows of the cached [I_1..I_M, I'_1..I'_M, G_1..G_T] set used for matching."""
    if len(bits) != M:
        raise ValueError(f"expected {M} intent bits, got {len(bits)}")
    intents = [i if b else M + i for i, b in enumerate(bits)]
    return np.array(intents + list(range(2 * M, 2 * M + T)), dtype=np.int64)


def select_intent_embeddings(vectors, bits: Sequence[int], M: int, T: int):
    """Pick the hit/not-hit member per intent and append the globals."""
    idx = selection_index(bits, M, T)
    if isinstance(vectors, Tensor):
        return nk.take(vectors, idx, axis=-2)
    return np.take(np.asarray(vectors), idx, axis=-2)


def match_score(hq: Tensor, selected: Tensor) -> Tensor:
    """cosine(h^q, attention([h^q], selected)); batched over leading axes.

    ``hq`` is [..., c], ``selected`` is [..., K, c].
    """
    q = nk.reshape(hq, hq.shape[:-1] + (1, hq.shape[-1]))
    agg = attention_pool(q, selected)
    return nk.cosine(hq, nk.reshape(agg, hq.shape))


def relevance_loss(s, y, epsilon: float = 0.01) -> Tensor:
    """max(0, (s - y)^2 - epsilon), elementwise."""
    s = nk.as_tensor(s)
    diff = s - np.asarray(y, dtype=s.dtype)
    return nk.relu(diff * diff - epsilon)


def mean_pool(doc_hiddens: Tensor, content_mask: np.ndarray) -> Tensor:
    mask = np.asarray(content_mask, dtype=doc_hiddens.dtype)
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("mean pooling over zero content rows")
    return (doc_hiddens * mask[..., None]).sum(axis=-2) * (1.0 / counts)


def mean_pool_score(doc_hiddens: Tensor, content_mask: np.ndarray, hq_raw: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    doc = compress(mean_pool(doc_hiddens, content_mask), weight, bias)
    return nk.cosine(compress(hq_raw, weight, bias), doc)


def match_scores_np(hq: np.ndarray, selected: np.ndarray) -> np.ndarray:
    """Numpy form of :func:`match_score` for the cached serving path.

    ``hq`` is [c] or [B, c]; ``selected`` is [B, K, c].  Computed in float64.
    """
    hq = np.asarray(hq, dtype=np.float64)
    sel = np.asarray(selected, dtype=np.float64)
    q = np.broadcast_to(hq, sel.shape[:1] + hq.shape[-1:])
    logits = np.einsum("bkc,bc->bk", sel, q)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    agg = np.einsum("bk,bkc->bc", p, sel)
    na = np.linalg.norm(q, axis=-1)
    nb = np.linalg.norm(agg, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine of a zero-norm vector")
    return (q * agg).sum(axis=-1) / (na * nb)


# -- model ----------------------------------------------------------------------------
class Matcher:
    """Shared encoder plus extractor bank and compression layer."""

    def __init__(self, encoder: EncoderParams, vocab: Vocab, config: MatchConfig, bank: Tensor | None, comp_w: Tensor, comp_b: Tensor, fields: Sequence[str] = DOC_FIELDS):
        self.encoder = encoder
        self.vocab = vocab
        self.config = config
        self.bank = bank
        self.comp_w = comp_w
        self.comp_b = comp_b
        self.fields = tuple(fields)
        self._inputs: dict[int, object] = {}

    @classmethod
    def init(cls, encoder: EncoderParams, vocab: Vocab, config: MatchConfig, rng: np.random.Generator, fields: Sequence[str] = DOC_FIELDS) -> Matcher:
        d = encoder.config.d
        bank = None
        if config.mode != "meanpool":
            bank = Tensor(rng.normal(0.0, config.bank_init_std, size=(config.n_cached, d)), requires_grad=True)
        comp_w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, config.c)), requires_grad=True)
        comp_b = Tensor(np.zeros(config.c), requires_grad=True)
        return cls(encoder, vocab, config, bank, comp_w, comp_b, fields)

    def parameters(self) -> list[Tensor]:
        extra = [self.comp_w, self.comp_b] + ([self.bank] if self.bank is not None else [])
        return self.encoder.parameters() + extra

    def head_state(self) -> dict[str, np.ndarray]:
        out = {"match.comp.w": self.comp_w.data, "match.comp.b": self.comp_b.data}
        if self.bank is not None:
            out["match.bank"] = self.bank.data
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), snap):
            p.data[...] = v

    # -- inputs
    def doc_input(self, doc: StructuredDocument):
        inp = self._inputs.get(doc.doc_id)
        if inp is None:
            inp = assemble_doc_input(doc, self.vocab, fields=self.fields)
            self._inputs[doc.doc_id] = inp
        return inp

    # -- forward pieces
    def query_vectors(self, queries: Sequence[Sequence[str]], rng=None) -> Tensor:
        """Compressed query representations [B, c]."""
        return compress(encode_queries(queries, self.encoder, self.vocab, rng), self.comp_w, self.comp_b)

    def doc_vectors(self, docs: Sequence[StructuredDocument], rng=None) -> Tensor:
        """Compressed cached-form document vectors [B, n_cached, c]."""
        batch = collate([self.doc_input(doc) for doc in docs])
        hidden = encoder_forward(batch, self.encoder, rng)
        mask = batch.content_mask
        if self.config.mode == "meanpool":
            pooled = mean_pool(hidden, mask)
            return compress(nk.reshape(pooled, (pooled.shape[0], 1, pooled.shape[1])), self.comp_w, self.comp_b)
        return compress(extract_document(hidden, self.bank, mask), self.comp_w, self.comp_b)

    def select(self, vectors: Tensor, bits: Sequence[Sequence[int]]) -> Tensor:
        cfg = self.config
        if cfg.mode == "meanpool":
            return vectors
        idx = np.stack([selection_index(b[: cfg.M] if cfg.M else (), cfg.M, cfg.T) for b in bits])
        return nk.take_along(vectors, idx)

    def score(self, queries: Sequence[Sequence[str]], docs: Sequence[StructuredDocument], bits: Sequence[Sequence[int]], rng=None) -> Tensor:
        """End-to-end relevance scores [B] for aligned (query, doc, bits) triples."""
        hq = self.query_vectors(queries, rng)
        selected = self.select(self.doc_vectors(docs, rng), bits)
        if self.config.mode == "meanpool":
            return nk.cosine(hq, nk.reshape(selected, hq.shape))
        return match_score(hq, selected)

    def score_pairs(self, pairs: Sequence[LabeledPair], docs: dict[int, StructuredDocument], batch: int = 256) -> np.ndarray:
        out = []
        with nk.no_grad():
            for start in range(0, len(pairs), batch):
                chunk = pairs[start : start + batch]
                s = self.score([p.query.tokens for p in chunk], [docs[p.doc_id] for p in chunk], [p.query.intent_bits for p in chunk])
                out.append(s.data)
        return np.concatenate(out) if out else np.zeros(0)

    # -- persistence
    def save(self, path: str | Path, meta: dict | None = None) -> None:
        side = {"vocab": self.vocab.to_json(), "match": dataclasses.asdict(self.config), "fields": list(self.fields)}
        side.update(meta or {})
        self.encoder.save(path, extra=self.head_state(), meta=side)

    @classmethod
    def load(cls, path: str | Path) -> Matcher:
        encoder, rest, meta = EncoderParams.load(path)
        if "match" not in meta:
            raise nk.CheckpointError(f"{path} is not a matcher checkpoint")
        config = MatchConfig(**meta["match"])
        vocab = Vocab.from_json(meta["vocab"])
        bank = Tensor(rest["match.bank"], requires_grad=True) if "match.bank" in rest else None
        return cls(
            encoder,
            vocab,
            config,
            bank,
            Tensor(rest["match.comp.w"], requires_grad=True),
            Tensor(rest["match.comp.b"], requires_grad=True),
            meta.get("fields", DOC_FIELDS),
        )


def load_pretrained(path: str | Path) -> tuple[EncoderParams, Vocab]:
    encoder, _, meta = EncoderParams.load(path)
    return encoder, Vocab.from_json(meta["vocab"])


# -- finetuning ---------------------------------------------------------------------------
@dataclass
class FinetuneResult:
    matcher: Matcher
    history: list[dict]
    best_epoch: int
    best_dev_auc: float


def finetune(
    train: Sequence[LabeledPair],
    dev: Sequence[LabeledPair],
    corpus: Sequence[StructuredDocument] | dict[int, StructuredDocument],
    encoder: EncoderParams,
    vocab: Vocab,
    config: MatchConfig,
    fields: Sequence[str] = DOC_FIELDS,
) -> FinetuneResult:
    """Train encoder, bank and compression end to end; early-stop on dev AUC."""
    from .metrics import group_pairs, multiclass_auc

    docs = corpus if isinstance(corpus, dict) else {d.doc_id: d for d in corpus}
    rng = np.random.default_rng(config.seed)
    matcher = Matcher.init(encoder.copy(), vocab, config, rng, fields)
    opt = nk.Adam(matcher.parameters(), lr=config.lr)
    steps_per_epoch = -(-len(train) // config.batch)
    total = steps_per_epoch * config.max_epochs

    def dev_auc() -> float:
        if not dev:
            return float("nan")
        scores = matcher.score_pairs(dev, docs)
        return multiclass_auc(group_pairs(dev, scores))

    best = dev_auc()
    best_epoch = 0
    best_state = matcher.snapshot()
    history = [{"epoch": 0, "loss": float("nan"), "dev_auc": best}]
    stale = 0
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch):
            chunk = [train[i] for i in order[start : start + config.batch]]
            lr = nk.linear_warmup_decay(step, total, config.lr, config.warmup)
            opt.zero_grad()
            s = matcher.score([p.query.tokens for p in chunk], [docs[p.doc_id] for p in chunk], [p.query.intent_bits for p in chunk], rng)
            loss = relevance_loss(s, [p.y for p in chunk], config.epsilon).mean()
            loss.backward()
            opt.step(lr)
            losses.append(loss.item())
            step += 1
        auc = dev_auc()
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "dev_auc": auc})
        log.info("finetune epoch %d loss %.5f dev auc %.4f", epoch, np.mean(losses), auc)
        if auc > best or not dev:
            best, best_epoch, stale = auc, epoch, 0
            best_state = matcher.snapshot()
        else:
            stale += 1
            if stale >= config.patience:
                break
    matcher.restore(best_state)
    return FinetuneResult(matcher, history, best_epoch, best)
