"""Micro transformer encoder with token, segment, and position embeddings."""

from __future__ import annotations

import dataclasses
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .corpus import (
    DOC_FIELDS,
    MAX_QUERY_LEN,
    N_SEGMENTS,
    PAD,
    EncoderInput,
    StructuredDocument,
    Vocab,
    assemble_doc_input,
    assemble_query_input,
)
from .numkernel import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    d: int = 64
    d_ff: int = 256
    max_positions: int = 160
    n_segments: int = N_SEGMENTS
    dropout: float = 0.1
    ln_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("hidden size must be divisible by the head count")
        if self.n_segments < 2:
            raise ValueError("need at least two segments")
        if self.vocab_size < 6:
            raise ValueError("vocabulary too small")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


class _Counter:
    """Thread-safe count of transformer layer evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._n = 0

    def add(self, k: int = 1) -> None:
        with self._lock:
            self._n += k

    @property
    def value(self) -> int:
        with self._lock:
            return self._n


LAYER_CALLS = _Counter()


@dataclass(frozen=True)
class Batch:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    attention_mask: np.ndarray

    @property
    def content_mask(self) -> np.ndarray:
        from .corpus import CLS, SEP

        t = self.token_ids
        return (t != PAD) & (t != CLS) & (t != SEP) & self.attention_mask.astype(bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape


def collate(inputs: Sequence[EncoderInput]) -> Batch:
    if not inputs:
        raise ValueError("empty batch")
    n = max(len(x) for x in inputs)
    if n == 0:
        raise ValueError("zero-length input")
    arrays = [np.zeros((len(inputs), n), dtype=np.int64) for _ in range(4)]
    for row, x in enumerate(inputs):
        k = len(x)
        for arr, src in zip(arrays, (x.token_ids, x.segment_ids, x.position_ids, x.attention_mask)):
            arr[row, :k] = src
    return Batch(*arrays)


def as_batch(x: EncoderInput | Batch) -> Batch:
    return collate([x]) if isinstance(x, EncoderInput) else x


class EncoderParams:
    """All trainable encoder tensors, addressed by name."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> EncoderParams:
        return EncoderParams(self.config, {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()})

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
        tensors = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".g"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, config.init_std, size=shape)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def save(self, path: str | Path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
        tensors = dict(self.state_dict())
        tensors.update(extra or {})
        sidecar = {"encoder": dataclasses.asdict(self.config)}
        sidecar.update(meta or {})
        nk.save_checkpoint(path, tensors, sidecar)

    @classmethod
    def load(cls, path: str | Path) -> tuple[EncoderParams, dict[str, np.ndarray], dict]:
        """Returns (encoder params, remaining tensors, sidecar metadata)."""
        tensors, meta = nk.load_checkpoint(path)
        config = EncoderConfig(**meta["encoder"])
        names = set(param_shapes(config))
        own = {k: Tensor(v, requires_grad=True) for k, v in tensors.items() if k in names}
        missing = names - set(own)
        if missing:
            raise nk.CheckpointError(f"checkpoint lacks encoder tensors {sorted(missing)[:3]}")
        rest = {k: v for k, v in tensors.items() if k not in names}
        return cls(config, own), rest, meta


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d, config.d_ff
    shapes = {
        "emb.token": (config.vocab_size, d),
        "emb.segment": (config.n_segments, d),
        "emb.position": (config.max_positions, d),
        "emb.ln.g": (d,),
        "emb.ln.b": (d,),
    }
    for layer in range(config.layers):
        p = f"layer{layer}."
        for w in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{w}"] = (d, d)
            shapes[p + f"attn.b{w}"] = (d,)
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
        })
    shapes.update({"mlm.w": (d, d), "mlm.b": (d,), "mlm.ln.g": (d,), "mlm.ln.b": (d,), "mlm.out_bias": (config.vocab_size,)})
    return shapes


# -- forward -------------------------------------------------------------------
def embed(batch: EncoderInput | Batch, params: EncoderParams, rng: np.random.Generator | None = None) -> Tensor:
    batch = as_batch(batch)
    cfg = params.config
    if batch.token_ids.size == 0 or batch.shape[1] == 0:
        raise ValueError("zero-length input")
    for ids, bound, what in (
        (batch.token_ids, cfg.vocab_size, "token"),
        (batch.segment_ids, cfg.n_segments, "segment"),
        (batch.position_ids, cfg.max_positions, "position"),
    ):
        if ids.min() < 0 or ids.max() >= bound:
            raise IndexError(f"{what} id out of range [0, {bound})")
    x = nk.take(params["emb.token"], batch.token_ids)
    x = x + nk.take(params["emb.segment"], batch.segment_ids)
    x = x + nk.take(params["emb.position"], batch.position_ids)
    x = nk.layer_norm(x, params["emb.ln.g"], params["emb.ln.b"], cfg.ln_eps)
    return nk.dropout(x, cfg.dropout, rng)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def _self_attention(x: Tensor, key_mask: np.ndarray, params: EncoderParams, prefix: str, rng) -> Tensor:
    cfg = params.config
    B, n, d = x.shape
    H, dh = cfg.heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return nk.transpose(t.reshape(B, n, H, dh), (0, 2, 1, 3))

    q = heads(_linear(x, params[prefix + "attn.wq"], params[prefix + "attn.bq"]))
    k = heads(_linear(x, params[prefix + "attn.wk"], params[prefix + "attn.bk"]))
    v = heads(_linear(x, params[prefix + "attn.wv"], params[prefix + "attn.bv"]))
    scores = (q @ nk.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    probs = nk.row_softmax(scores, key_mask[:, None, None, :])
    ctx = nk.transpose(probs @ v, (0, 2, 1, 3)).reshape(B, n, d)
    out = _linear(ctx, params[prefix + "attn.wo"], params[prefix + "attn.bo"])
    return nk.dropout(out, cfg.dropout, rng)


def transformer_layer(x: Tensor, key_mask: np.ndarray, params: EncoderParams, layer: int, rng=None) -> Tensor:
    LAYER_CALLS.add()
    cfg = params.config
    p = f"layer{layer}."
    x = nk.layer_norm(x + _self_attention(x, key_mask, params, p, rng), params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)
    h = nk.gelu(_linear(x, params[p + "ffn.w1"], params[p + "ffn.b1"]))
    h = nk.dropout(_linear(h, params[p + "ffn.w2"], params[p + "ffn.b2"]), cfg.dropout, rng)
    return nk.layer_norm(x + h, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)


def encoder_forward(batch: EncoderInput | Batch, params: EncoderParams, rng: np.random.Generator | None = None) -> Tensor:
    """Hidden states [B, n, d]; dropout is active only when ``rng`` is given."""
    batch = as_batch(batch)
    key_mask = batch.attention_mask.astype(bool)
    x = embed(batch, params, rng)
    for layer in range(params.config.layers):
        x = transformer_layer(x, key_mask, params, layer, rng)
    return x


def mlm_logits(hidden_rows: Tensor, params: EncoderParams) -> Tensor:
    """MLM head over selected hidden rows [k, d]; output weights tied to token embeddings."""
    h = nk.gelu(_linear(hidden_rows, params["mlm.w"], params["mlm.b"]))
    h = nk.layer_norm(h, params["mlm.ln.g"], params["mlm.ln.b"], params.config.ln_eps)
    return h @ nk.transpose(params["emb.token"]) + params["mlm.out_bias"]


def encode_queries(queries: Sequence[Sequence[str]], params: EncoderParams, vocab: Vocab, rng=None, max_len: int = MAX_QUERY_LEN) -> Tensor:
    """[CLS] hidden state for each query: [B, d]."""
    batch = collate([assemble_query_input(q, vocab, max_len) for q in queries])
    hidden = encoder_forward(batch, params, rng)
    return nk.take(hidden, 0, axis=1)


def encode_query(query_tokens: Sequence[str], params: EncoderParams, vocab: Vocab) -> Tensor:
    if not query_tokens:
        raise ValueError("empty query")
    return nk.take(encode_queries([query_tokens], params, vocab), 0, axis=0)


def encode_document(
    doc: StructuredDocument,
    params: EncoderParams,
    vocab: Vocab,
    max_len: int = 128,
    fields: Sequence[str] = DOC_FIELDS,
) -> tuple[Tensor, np.ndarray]:
    """Per-token hidden states [n, d] and the content mask that marks pool-eligible rows."""
    inp = assemble_doc_input(doc, vocab, max_len, fields)
    hidden = encoder_forward(inp, params)
    return nk.take(hidden, 0, axis=0), inp.content_mask
