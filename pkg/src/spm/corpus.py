"""Structured documents, vocabulary, encoder input assembly, and synthetic data.

Documents carry a fixed, corpus-wide field order; each field owns one segment
id (query text uses segment 0).  Tokens are whitespace-delimited strings.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD, UNK, CLS, SEP, MASK = range(5)
N_RESERVED = len(RESERVED)

FIELDS = ("name", "brand", "category", "address", "keywords", "top_query")
DOC_FIELDS = FIELDS[:5]
QUERY_SEGMENT = 0
SEGMENT_OF = {f: i + 1 for i, f in enumerate(FIELDS)}
N_SEGMENTS = len(FIELDS) + 1

LEVELS = ("strong", "weak", "irrelevant")
LEVEL_LABEL = {"strong": 1.0, "weak": 0.7, "irrelevant": 0.0}

DEFAULT_COMPRESS_K = 16
MAX_DOC_LEN = 128
MAX_QUERY_LEN = 32
MAX_PRETRAIN_LEN = 160


class CorpusError(ValueError):
    pass


# -- vocabulary ---------------------------------------------------------------
@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    freq: np.ndarray
    term_weight: np.ndarray
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:N_RESERVED] != RESERVED:
            raise CorpusError("reserved tokens must occupy ids 0..4")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def weight(self, token: str) -> float:
        return float(self.term_weight[self.id(token)])

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens[N_RESERVED:]),
            "freq": [int(x) for x in self.freq[N_RESERVED:]],
            "term_weight": [float(x) for x in self.term_weight[N_RESERVED:]],
        }

    @classmethod
    def from_json(cls, obj: dict) -> Vocab:
        return cls(
            tokens=RESERVED + tuple(obj["tokens"]),
            freq=np.array([0] * N_RESERVED + list(obj["freq"]), dtype=np.int64),
            term_weight=np.array([0.0] * N_RESERVED + list(obj["term_weight"]), dtype=np.float64),
        )


def build_vocab(corpus: Sequence[StructuredDocument]) -> Vocab:
    """Ids by descending corpus frequency, ties lexicographic; IDF-style term weights."""
    if not corpus:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    freq: Counter[str] = Counter()
    df: Counter[str] = Counter()
    for doc in corpus:
        seen = set()
        for toks in doc.fields.values():
            freq.update(toks)
            seen.update(toks)
        df.update(seen)
    for tok in RESERVED:
        freq.pop(tok, None)
        df.pop(tok, None)
    ordered = sorted(freq, key=lambda t: (-freq[t], t))
    n = len(corpus)
    return Vocab(
        tokens=RESERVED + tuple(ordered),
        freq=np.array([0] * N_RESERVED + [freq[t] for t in ordered], dtype=np.int64),
        term_weight=np.array([0.0] * N_RESERVED + [math.log(1.0 + n / df[t]) for t in ordered]),
    )


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return vocab.encode(text.split())


# -- documents and queries --------------------------------------------------------
@dataclass(frozen=True)
class StructuredDocument:
    doc_id: int
    fields: dict[str, tuple[str, ...]]

    def __post_init__(self):
        unknown = set(self.fields) - set(FIELDS)
        if unknown:
            raise CorpusError(f"unknown fields {sorted(unknown)}")
        if not self.fields.get("name"):
            raise CorpusError(f"document {self.doc_id} has an empty name field")
        ordered = {f: tuple(self.fields[f]) for f in FIELDS if self.fields.get(f)}
        object.__setattr__(self, "fields", ordered)

    def get(self, name: str) -> tuple[str, ...]:
        return self.fields.get(name, ())

    def without(self, name: str) -> StructuredDocument:
        """Copy with one field removed; dropping the name keeps a placeholder-free doc."""
        kept = {f: t for f, t in self.fields.items() if f != name}
        doc = object.__new__(StructuredDocument)
        object.__setattr__(doc, "doc_id", self.doc_id)
        object.__setattr__(doc, "fields", kept)
        return doc

    def to_json(self) -> dict:
        return {"id": self.doc_id, "fields": {f: " ".join(t) for f, t in self.fields.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> StructuredDocument:
        fields = {f: tuple(s.split()) for f, s in obj.get("fields", {}).items() if s and s.split()}
        return cls(doc_id=int(obj["id"]), fields=fields)


@dataclass(frozen=True)
class Query:
    tokens: tuple[str, ...]
    intent_bits: tuple[int, ...]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class LabeledPair:
    query: Query
    doc_id: int
    level: str

    def __post_init__(self):
        if self.level not in LEVEL_LABEL:
            raise CorpusError(f"unknown relevance level {self.level!r}")

    @property
    def y(self) -> float:
        return LEVEL_LABEL[self.level]


# -- encoder inputs ---------------------------------------------------------------
@dataclass(frozen=True)
class EncoderInput:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    attention_mask: np.ndarray

    def __post_init__(self):
        n = len(self.token_ids)
        for arr in (self.segment_ids, self.position_ids, self.attention_mask):
            if len(arr) != n:
                raise CorpusError("encoder input sequences differ in length")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def content_mask(self) -> np.ndarray:
        """True at positions holding field content (not CLS/SEP/PAD)."""
        t = self.token_ids
        return (t != PAD) & (t != CLS) & (t != SEP) & self.attention_mask.astype(bool)


def _make_input(tokens: list[int], segments: list[int], positions: list[int]) -> EncoderInput:
    return EncoderInput(
        token_ids=np.array(tokens, dtype=np.int64),
        segment_ids=np.array(segments, dtype=np.int64),
        position_ids=np.array(positions, dtype=np.int64),
        attention_mask=np.ones(len(tokens), dtype=np.int64),
    )


def compress_field(tokens: Sequence[str], vocab: Vocab, k: int = DEFAULT_COMPRESS_K) -> list[str]:
    """Keep the ``k`` highest-term-weight tokens in their original order."""
    if k < 1:
        raise CorpusError("compression size must be at least 1")
    tokens = list(tokens)
    if len(tokens) <= k:
        return tokens
    weights = np.array([vocab.weight(t) for t in tokens])
    order = np.lexsort((np.arange(len(tokens)), -weights))
    keep = np.sort(order[:k])
    return [tokens[i] for i in keep]


def _field_blocks(doc: StructuredDocument, vocab: Vocab, fields: Sequence[str], compress_k: int | None):
    blocks = []
    for name in fields:
        toks = doc.get(name)
        if not toks:
            continue
        if compress_k is not None:
            toks = compress_field(toks, vocab, compress_k)
        blocks.append((SEGMENT_OF[name], vocab.encode(toks)))
    return blocks


def _layout_blocks(blocks, budget: int) -> tuple[list[int], list[int]]:
    tokens: list[int] = []
    segments: list[int] = []
    for seg, ids in blocks:
        room = budget - len(tokens) - 1
        if room < 1:
            break
        ids = ids[:room]
        tokens.extend(ids + [SEP])
        segments.extend([seg] * (len(ids) + 1))
    return tokens, segments


def assemble_doc_input(
    doc: StructuredDocument,
    vocab: Vocab,
    max_len: int = MAX_DOC_LEN,
    fields: Sequence[str] = DOC_FIELDS,
    compress_k: int | None = DEFAULT_COMPRESS_K,
) -> EncoderInput:
    """``[CLS] f1 [SEP] f2 [SEP] ...`` with one segment per field, positions from 0."""
    blocks = _field_blocks(doc, vocab, fields, compress_k)
    if not blocks or max_len < 3:
        raise CorpusError(f"document {doc.doc_id} assembles to an empty input")
    body, segs = _layout_blocks(blocks, max_len - 1)
    tokens = [CLS] + body
    segments = [blocks[0][0]] + segs
    return _make_input(tokens, segments, list(range(len(tokens))))


def assemble_pretrain_input(
    doc: StructuredDocument,
    vocab: Vocab,
    max_len: int = MAX_PRETRAIN_LEN,
    max_query_len: int = MAX_QUERY_LEN,
    fields: Sequence[str] = DOC_FIELDS,
    compress_k: int | None = DEFAULT_COMPRESS_K,
) -> EncoderInput:
    """``[CLS] query [SEP] name [SEP] ...``; positions restart at 0 on the first name token.

    Documents without a top query fall back to the document-only layout.
    """
    query = vocab.encode(doc.get("top_query"))[:max_query_len]
    if not query:
        return assemble_doc_input(doc, vocab, max_len, fields, compress_k)
    head = [CLS] + query + [SEP]
    blocks = _field_blocks(doc, vocab, fields, compress_k)
    if not blocks or max_len - len(head) < 2:
        raise CorpusError(f"document {doc.doc_id} leaves no room after its query")
    body, segs = _layout_blocks(blocks, max_len - len(head))
    tokens = head + body
    segments = [QUERY_SEGMENT] * len(head) + segs
    positions = list(range(len(head))) + list(range(len(body)))
    return _make_input(tokens, segments, positions)


def assemble_query_input(tokens: Sequence[str], vocab: Vocab, max_len: int = MAX_QUERY_LEN) -> EncoderInput:
    ids = vocab.encode(tokens)[: max_len - 2]
    if not ids:
        raise CorpusError("empty query")
    seq = [CLS] + ids + [SEP]
    return _make_input(seq, [QUERY_SEGMENT] * len(seq), list(range(len(seq))))


# -- file formats ---------------------------------------------------------------
def write_corpus(path: str | Path, corpus: Iterable[StructuredDocument]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus:
            fh.write(json.dumps(doc.to_json(), separators=(",", ":")) + "\n")


def read_corpus(path: str | Path) -> list[StructuredDocument]:
    with open(path, encoding="utf-8") as fh:
        return [StructuredDocument.from_json(json.loads(line)) for line in fh if line.strip()]


def write_pairs(path: str | Path, pairs: Iterable[LabeledPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            row = {"query": p.query.text, "doc_id": p.doc_id, "level": p.level}
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_pairs(path: str | Path, intent_fn: Callable[[Sequence[str]], tuple[int, ...]]) -> list[LabeledPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            toks = tuple(row["query"].split())
            out.append(LabeledPair(Query(toks, tuple(intent_fn(toks))), int(row["doc_id"]), row["level"]))
    return out


def split_pairs(pairs: Sequence[LabeledPair], seed: int, fractions=(0.8, 0.1, 0.1)):
    """Deterministic train/dev/test split by distinct query text."""
    texts = sorted({p.query.text for p in pairs})
    rng = np.random.default_rng(seed)
    rng.shuffle(texts)
    n_train = int(round(fractions[0] * len(texts)))
    n_dev = int(round(fractions[1] * len(texts)))
    bucket = {t: 0 for t in texts[:n_train]}
    bucket.update({t: 1 for t in texts[n_train : n_train + n_dev]})
    bucket.update({t: 2 for t in texts[n_train + n_dev :]})
    parts: tuple[list, list, list] = ([], [], [])
    for p in pairs:
        parts[bucket[p.query.text]].append(p)
    return parts


# -- synthetic generator -----------------------------------------------------------
_ABBR = {"name": "nm", "brand": "br", "category": "ct", "address": "ad", "keywords": "kw"}
_DESIGNATED_CYCLE = ("name", "category", "keywords", "brand", "address")
LEVEL_PRIOR = (0.72, 0.11, 0.17)


@dataclass(frozen=True)
class SyntheticConfig:
    n_profiles: int = 150
    profile_zipf: float = 1.1
    token_zipf: float = 1.05
    content_size: int = 1200
    lexicon_size: int = 8
    background_size: int = 200
    n_cities: int = 20
    districts_per_city: int = 6
    n_fillers: int = 30
    group_size: int = 10
    hard_negative_rate: float = 0.9
    top_query_rate: float = 0.9


@dataclass
class SyntheticData:
    corpus: list[StructuredDocument]
    pairs: list[LabeledPair]
    lexicons: list[list[str]]
    designated: list[str]

    def __iter__(self):
        yield self.corpus
        yield self.pairs


def _zipf(n: int, a: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    return w / w.sum()


def designated_fields(M: int) -> list[str]:
    return [_DESIGNATED_CYCLE[i % len(_DESIGNATED_CYCLE)] for i in range(M)]


def relevance_level(query_tokens: Sequence[str], intent: int, doc: StructuredDocument, designated: Sequence[str]) -> str:
    """Label rule: overlap of the query with the intent's designated field."""
    overlap = len(set(query_tokens) & set(doc.get(designated[intent])))
    return "strong" if overlap >= 2 else "weak" if overlap == 1 else "irrelevant"


class _Generator:
    def __init__(self, seed: int, M: int, cfg: SyntheticConfig):
        self.rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.M = M
        self.designated = designated_fields(M)
        # intent lexicons are query-only marker words; documents never hold them
        self.lexicons = [
            [f"{_ABBR[f]}{i}x{j}" for j in range(cfg.lexicon_size)] for i, f in enumerate(self.designated)
        ]
        self.lexicon_sets = [set(lex) for lex in self.lexicons]
        # designated fields share one content pool, so a token's field, not
        # its identity, decides which intent it can satisfy
        self.content = [f"w{j}" for j in range(cfg.content_size)]
        self.background = {f: [f"{_ABBR[f]}b{j}" for j in range(cfg.background_size)] for f in DOC_FIELDS}
        self.cities = [f"city{j}" for j in range(cfg.n_cities)]
        self.districts = [[f"dist{c}x{j}" for j in range(cfg.districts_per_city)] for c in range(cfg.n_cities)]
        self.fillers = [f"q{j}" for j in range(cfg.n_fillers)]
        self.content_p = _zipf(cfg.content_size, cfg.token_zipf)
        self.bg_p = _zipf(cfg.background_size, cfg.token_zipf)
        self.marker_p = _zipf(cfg.lexicon_size, 1.0)
        self.profile_p = _zipf(cfg.n_profiles, cfg.profile_zipf)
        self.profiles = [self._make_profile(p) for p in range(cfg.n_profiles)]

    def draw(self, f: str, k: int, exclude=()) -> list[str]:
        """k distinct tokens from the content pool (designated fields) or the field's background."""
        if f in self.designated:
            pool, probs = self.content, self.content_p
        else:
            pool, probs = self.background[f], self.bg_p
        out: list[str] = []
        while len(out) < k:
            tok = pool[self.rng.choice(len(pool), p=probs)]
            if tok not in out and tok not in exclude:
                out.append(tok)
        return out

    def _make_profile(self, p: int) -> dict:
        city = int(self.rng.integers(self.cfg.n_cities))
        return {
            "name": self.draw("name", 2),
            "brand": [f"brand{p}"] if "brand" not in self.designated else self.draw("brand", 2),
            "category": self.draw("category", 2),
            "keywords": self.draw("keywords", 8),
            "city": city,
            "district": self.rng.choice(self.districts[city], size=2, replace=False).tolist(),
            "address": self.draw("address", 2 if "address" in self.designated else 1),
        }

    def document(self, doc_id: int, prof: dict) -> dict[str, list[str]]:
        rng = self.rng
        name = list(prof["name"])
        if rng.random() < 0.6:
            name += self.draw("name", 1, exclude=name)
        if rng.random() < 0.5:
            name.append(self.background["name"][rng.choice(self.cfg.background_size, p=self.bg_p)])
        kw_core = rng.choice(prof["keywords"], size=int(rng.integers(3, 6)), replace=False).tolist()
        keywords = kw_core + self.draw("keywords", 1 + int(rng.random() < 0.5), exclude=kw_core)
        address = [
            self.cities[prof["city"]],
            prof["district"][int(rng.integers(2))],
        ] + (list(prof["address"]) if rng.random() < 0.7 else self.draw("address", 1)) + [f"no{int(rng.integers(30))}"]
        fields = {
            "name": name,
            "brand": list(prof["brand"]),
            "category": list(prof["category"]),
            "address": address,
            "keywords": keywords,
        }
        if rng.random() < self.cfg.top_query_rate:
            tq = rng.choice(prof["name"], size=int(rng.integers(1, 3)), replace=False).tolist()
            if rng.random() < 0.5:
                tq.append(prof["category"][int(rng.integers(2))])
            if rng.random() < 0.4:
                tq.append(self.fillers[int(rng.integers(self.cfg.n_fillers))])
            fields["top_query"] = tq
        return fields

    def _scrub(self, toks: list[str], f: str, remove: set[str]) -> list[str]:
        out = [t for t in toks if t not in remove]
        missing = len(toks) - len(out)
        if missing:
            out += self.draw(f, missing, exclude=set(out) | remove)
        return out

    def _inject(self, toks: list[str], new: Sequence[str]) -> list[str]:
        toks = list(toks)
        for t in new:
            if t in toks:
                continue
            free = [i for i, x in enumerate(toks) if x not in new]
            if free and self.rng.random() < 0.5:
                toks[free[int(self.rng.integers(len(free)))]] = t
            else:
                toks.insert(int(self.rng.integers(len(toks) + 1)), t)
        return toks

    def group(self, first_id: int, size: int) -> tuple[list[StructuredDocument], list[LabeledPair]]:
        rng = self.rng
        cfg = self.cfg
        weights = np.array([2.0 if f == "name" else 1.0 for f in self.designated])
        intent = int(rng.choice(self.M, p=weights / weights.sum()))
        dfield = self.designated[intent]
        anchor = self.profiles[rng.choice(cfg.n_profiles, p=self.profile_p)]
        own = list(dict.fromkeys(anchor[dfield]))
        if len(own) < 2:
            own += self.draw(dfield, 2 - len(own), exclude=own)
        content = [str(t) for t in rng.choice(own, size=2, replace=False)]
        marker = self.lexicons[intent][rng.choice(cfg.lexicon_size, p=self.marker_p)]
        qtoks = list(content)
        qtoks.insert(int(rng.integers(3)), marker)
        if rng.random() < 0.5:
            qtoks.insert(int(rng.integers(len(qtoks) + 1)), self.fillers[int(rng.integers(cfg.n_fillers))])
        bits = tuple(int(i == intent) for i in range(self.M))
        query = Query(tuple(qtoks), bits)
        qset = set(content)
        # misplaced query tokens go to another intent's field, where they look
        # exactly like a match but do not count
        others = [f for f in dict.fromkeys(self.designated) if f != dfield] or [f for f in DOC_FIELDS if f != dfield]
        docs, pairs = [], []
        for j in range(size):
            level = LEVELS[rng.choice(3, p=LEVEL_PRIOR)]
            if level == "strong" and rng.random() < 0.5:
                prof = anchor
            else:
                prof = self.profiles[rng.choice(cfg.n_profiles, p=self.profile_p)]
            fields = self.document(first_id + j, prof)
            fields[dfield] = self._scrub(fields[dfield], dfield, qset)
            if level == "strong":
                fields[dfield] = self._inject(fields[dfield], content)
                leftover = []
            elif level == "weak":
                k = int(rng.integers(2))
                fields[dfield] = self._inject(fields[dfield], [content[k]])
                leftover = [content[1 - k]] if rng.random() < 0.5 else []
            else:
                leftover = list(content) if rng.random() < cfg.hard_negative_rate else []
                if leftover and rng.random() < 0.3:
                    leftover = leftover[:1]
            if leftover:
                target = others[int(rng.integers(len(others)))]
                fields[target] = self._inject(fields[target], leftover)
            doc = StructuredDocument(first_id + j, {f: tuple(t) for f, t in fields.items()})
            docs.append(doc)
            pairs.append(LabeledPair(query, doc.doc_id, relevance_level(qtoks, intent, doc, self.designated)))
        return docs, pairs


def generate_synthetic(n_docs: int, seed: int, M: int = 3, config: SyntheticConfig | None = None) -> SyntheticData:
    """Corpus and query-document pairs whose labels depend on query intent.

    Each intent owns a disjoint lexicon of query marker words and a designated
    field.  Designated fields draw from one shared content pool.  A query holds
    one marker and two content tokens; the pair is strong when both content
    tokens occur in the marked intent's field, weak for one, irrelevant
    otherwise.  Irrelevant documents often carry the content tokens in a
    different field, where they do not count.
    """
    if n_docs < 1:
        raise CorpusError("n_docs must be positive")
    if M < 1:
        raise CorpusError("the generator needs at least one intent")
    cfg = config or SyntheticConfig()
    gen = _Generator(seed, M, cfg)
    corpus: list[StructuredDocument] = []
    pairs: list[LabeledPair] = []
    while len(corpus) < n_docs:
        size = min(cfg.group_size, n_docs - len(corpus))
        docs, prs = gen.group(len(corpus), size)
        corpus.extend(docs)
        pairs.extend(prs)
    return SyntheticData(corpus, pairs, gen.lexicons, gen.designated)
