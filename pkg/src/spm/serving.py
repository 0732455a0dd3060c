"""Offline document-embedding cache and the online scoring service.

Cache file layout (little-endian)::

    b"SPMC"  u16 version  u16 M  u16 T  u32 c  u64 count
    count x (u64 doc_id, (2M+T)*c f32)

The service answers ``{"query": str, "doc_ids": [int]}`` with scores read
from the cache; cached queries never touch the transformer.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numkernel as nk
from .corpus import CorpusError, StructuredDocument
from .matcher import Matcher, match_scores_np, selection_index
from .metrics import discretize_score

log = logging.getLogger(__name__)

CACHE_MAGIC = b"SPMC"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHHHIQ")
HEADER_SIZE = _HEADER.size
LEVEL_RANK = {"strong": 0, "weak": 1, "irrelevant": 2}


class CacheError(ValueError):
    pass


def record_size(M: int, T: int, c: int) -> int:
    return 8 + (2 * M + T) * c * 4


def cache_file_size(n_docs: int, M: int, T: int, c: int) -> int:
    return HEADER_SIZE + n_docs * record_size(M, T, c)


def _cache_layout(matcher: Matcher) -> tuple[int, int]:
    cfg = matcher.config
    return (0, 1) if cfg.mode == "meanpool" else (cfg.M, cfg.T)


def build_cache(corpus: Sequence[StructuredDocument], matcher: Matcher, path: str | Path, batch: int = 256) -> int:
    """Encode, extract and compress every document; returns bytes written."""
    M, T = _cache_layout(matcher)
    c = matcher.config.c
    for doc in corpus:
        try:
            matcher.doc_input(doc)
        except CorpusError as exc:
            raise CacheError(f"document {doc.doc_id}: {exc}") from exc
    rec = np.dtype([("doc_id", "<u8"), ("vec", "<f4", (2 * M + T, c))])
    records = np.zeros(len(corpus), dtype=rec)
    with nk.no_grad():
        for start in range(0, len(corpus), batch):
            chunk = corpus[start : start + batch]
            try:
                vecs = matcher.doc_vectors(chunk).data
            except (ValueError, FloatingPointError) as exc:
                raise CacheError(f"documents {chunk[0].doc_id}..{chunk[-1].doc_id}: {exc}") from exc
            records["doc_id"][start : start + len(chunk)] = [d.doc_id for d in chunk]
            records["vec"][start : start + len(chunk)] = vecs.astype(np.float32)
    blob = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, M, T, c, len(corpus)) + records.tobytes()
    Path(path).write_bytes(blob)
    return len(blob)


class EmbeddingCache:
    """Read-only view of a cache file with a doc_id -> row index."""

    def __init__(self, M: int, T: int, c: int, doc_ids: np.ndarray, vectors: np.ndarray):
        self.M, self.T, self.c = M, T, c
        self.doc_ids = doc_ids
        self.vectors = vectors
        self.doc_ids.flags.writeable = False
        self.vectors.flags.writeable = False
        self.index = {int(d): i for i, d in enumerate(doc_ids)}

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __contains__(self, doc_id: int) -> bool:
        return doc_id in self.index

    def get(self, doc_id: int) -> np.ndarray:
        return self.vectors[self.index[doc_id]]

    @classmethod
    def load(cls, path: str | Path) -> EmbeddingCache:
        blob = Path(path).read_bytes()
        if len(blob) < HEADER_SIZE:
            raise CacheError("cache file shorter than its header")
        magic, version, M, T, c, count = _HEADER.unpack_from(blob)
        if magic != CACHE_MAGIC:
            raise CacheError("not an SPMC cache file")
        if version != CACHE_VERSION:
            raise CacheError(f"unsupported cache version {version}")
        if len(blob) != cache_file_size(count, M, T, c):
            raise CacheError("cache file size does not match its header")
        rec = np.dtype([("doc_id", "<u8"), ("vec", "<f4", (2 * M + T, c))])
        records = np.frombuffer(blob, dtype=rec, count=count, offset=HEADER_SIZE)
        return cls(M, T, c, records["doc_id"].copy(), records["vec"].copy())


# -- query side ------------------------------------------------------------------------
@dataclass(frozen=True)
class IntentRules:
    """Query-understanding stand-in: bit i is set when a query token is in lexicon i."""

    lexicons: tuple[frozenset[str], ...]

    @property
    def M(self) -> int:
        return len(self.lexicons)

    @classmethod
    def from_lexicons(cls, lexicons: Iterable[Iterable[str]]) -> IntentRules:
        return cls(tuple(frozenset(lex) for lex in lexicons))

    @classmethod
    def load(cls, path: str | Path) -> IntentRules:
        obj = json.loads(Path(path).read_text())
        return cls.from_lexicons(obj["lexicons"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"lexicons": [sorted(lex) for lex in self.lexicons]}) + "\n")


def qu_intent(query_tokens: Sequence[str], rules: IntentRules) -> tuple[int, ...]:
    toks = set(query_tokens)
    return tuple(int(bool(toks & lex)) for lex in rules.lexicons)


def read_query_frequencies(path: str | Path) -> list[tuple[str, int]]:
    """Lines of ``query<TAB>count``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            text, _, count = line.rpartition("\t")
            out.append((text, int(count)))
    return out


class QueryCache:
    """Compressed query vectors for the most frequent queries."""

    def __init__(self, vectors: dict[str, np.ndarray] | None = None):
        self.vectors = dict(vectors or {})

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, text: str) -> np.ndarray | None:
        return self.vectors.get(text)

    @classmethod
    def build(cls, frequencies: Sequence[tuple[str, int]], matcher: Matcher, top_n: int = 1000, batch: int = 256) -> QueryCache:
        ranked = sorted(frequencies, key=lambda qc: (-qc[1], qc[0]))
        texts = [t for t, _ in ranked if t.split()][:top_n]
        vectors: dict[str, np.ndarray] = {}
        with nk.no_grad():
            for start in range(0, len(texts), batch):
                chunk = texts[start : start + batch]
                hq = matcher.query_vectors([t.split() for t in chunk]).data
                vectors.update({t: v.copy() for t, v in zip(chunk, hq)})
        return cls(vectors)


# -- scoring -------------------------------------------------------------------------------
def stratify(responses: Sequence[dict]) -> list[dict]:
    """Stable sort by relevance level, strong first."""
    return sorted(responses, key=lambda r: LEVEL_RANK[r["level"]])


class ProtocolError(ValueError):
    pass


class ScoringService:
    def __init__(self, matcher: Matcher, cache: EmbeddingCache, rules: IntentRules | None = None, query_cache: QueryCache | None = None):
        M, T = _cache_layout(matcher)
        if (cache.M, cache.T, cache.c) != (M, T, matcher.config.c):
            raise CacheError("cache layout does not match the matcher configuration")
        if matcher.config.mode == "ige":
            if rules is None or rules.M != M:
                raise ValueError(f"intent-guided matching needs rules for {M} intents")
        self.matcher = matcher
        self.cache = cache
        self.rules = rules
        self.query_cache = query_cache or QueryCache()

    def query_vector(self, tokens: Sequence[str]) -> np.ndarray:
        text = " ".join(tokens)
        hit = self.query_cache.get(text)
        if hit is not None:
            return hit
        # long-tail query: encode online, not written back
        with nk.no_grad():
            return self.matcher.query_vectors([list(tokens)]).data[0]

    def bits(self, tokens: Sequence[str]) -> tuple[int, ...]:
        if self.matcher.config.mode != "ige":
            return ()
        return qu_intent(tokens, self.rules)

    def serve_score(self, request: dict) -> dict:
        if not isinstance(request, dict) or not isinstance(request.get("query"), str) or not isinstance(request.get("doc_ids"), list):
            raise ProtocolError('request must be {"query": str, "doc_ids": [int, ...]}')
        tokens = request["query"].split()
        doc_ids = request["doc_ids"]
        if not all(isinstance(d, int) and not isinstance(d, bool) for d in doc_ids):
            raise ProtocolError("doc_ids must be integers")
        if not tokens:
            raise ProtocolError("empty query")
        errors = [{"doc_id": d, "error": "unknown doc_id"} for d in doc_ids if d not in self.cache]
        known = [d for d in doc_ids if d in self.cache]
        results: list[dict] = []
        if known:
            hq = self.query_vector(tokens)
            rows = np.fromiter((self.cache.index[d] for d in known), dtype=np.int64, count=len(known))
            vecs = self.cache.vectors[rows]
            M, T = self.cache.M, self.cache.T
            selected = vecs[:, selection_index(self.bits(tokens), M, T)] if M else vecs
            scores = match_scores_np(hq, selected)
            results = [{"doc_id": d, "score": float(s), "level": discretize_score(float(s))} for d, s in zip(known, scores)]
        return {"results": stratify(results), "errors": errors}

    def handle_line(self, line: str) -> str:
        """One JSON request in, one JSON response out; protocol faults become error responses."""
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            return json.dumps({"error": f"malformed JSON: {exc.msg}"})
        try:
            return json.dumps(self.serve_score(request))
        except ProtocolError as exc:
            return json.dumps({"error": str(exc)})


def make_server(service: ScoringService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path != "/score":
                self.send_error(404)
                return
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length).decode("utf-8", errors="replace")
            payload = service.handle_line(body).encode("utf-8")
            status = 400 if payload.startswith(b'{"error"') else 200
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

    return ThreadingHTTPServer((host, port), Handler)
