"""Command-line entry point for the whole pipeline.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Every command writes ``<output>.manifest.json`` holding the config hash, the
seed and git-style content hashes of its inputs.
"""

from __future__ import annotations

import argparse
import collections
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .config import ConfigError
from .corpus import (
    DOC_FIELDS,
    LabeledPair,
    StructuredDocument,
    build_vocab,
    generate_synthetic,
    read_corpus,
    read_pairs,
    split_pairs,
    write_corpus,
    write_pairs,
)
from .encoder import EncoderConfig
from .matcher import MatchConfig, Matcher, finetune, load_pretrained
from .metrics import group_pairs, metrics_report, multiclass_auc
from .pretrainer import MaskStrategy, PretrainConfig, pretrain
from .serving import (
    EmbeddingCache,
    IntentRules,
    QueryCache,
    ScoringService,
    build_cache,
    make_server,
    qu_intent,
    read_query_frequencies,
)

log = logging.getLogger("spm")

SWEEP_COUNTS = (4, 8, 16)


# -- config translation ----------------------------------------------------------------
def encoder_config(cfg: dict, vocab_size: int) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(vocab_size, layers=e["L"], heads=e["H"], d=e["d"], d_ff=e["d_ff"], max_positions=e["max_len"], dropout=e["dropout"])


def pretrain_config(cfg: dict) -> PretrainConfig:
    p = cfg["pretrain"]
    return PretrainConfig(
        rate=p["rate"],
        epochs=p["epochs"],
        lr=p["lr"],
        warmup=p["warmup"],
        batch_size=p["batch_size"],
        seed=p["seed"],
        max_steps=p["max_steps"] or None,
    )


def match_config(cfg: dict, **changes) -> MatchConfig:
    m = dict(cfg["match"])
    m.update(changes)
    kw = {k: m[k] for k in ("T", "c", "epsilon", "batch", "patience", "seed", "lr", "max_epochs", "warmup")}
    if m["mode"] == "ige":
        kw["M"] = m["M"]
    return MatchConfig.for_mode(m["mode"], **kw)


# -- shared pipeline pieces -------------------------------------------------------------
def sibling(path: str | Path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def write_manifest(out: str | Path, command: str, cfg: dict, seed: int, inputs: Sequence[str | Path]) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": cfgmod.config_hash(cfg),
        "seed": seed,
        "inputs": {str(p): cfgmod.content_hash(p) for p in inputs},
    }
    path = Path(str(out) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def query_frequencies(pairs: Sequence[LabeledPair]) -> list[tuple[str, int]]:
    counts = collections.Counter(p.query.text for p in pairs)
    return sorted(counts.items(), key=lambda qc: (-qc[1], qc[0]))


def load_labeled(pairs_path, rules: IntentRules) -> list[LabeledPair]:
    return read_pairs(pairs_path, lambda toks: qu_intent(toks, rules))


def heldout_auc(matcher: Matcher, test: Sequence[LabeledPair], docs: dict[int, StructuredDocument]) -> float:
    return multiclass_auc(group_pairs(test, matcher.score_pairs(test, docs)))


def run_drop_field(cfg: dict, corpus, pairs, encoder, vocab) -> list[dict]:
    """Full model plus one finetune per removed document field."""
    docs = {d.doc_id: d for d in corpus}
    train, dev, test = split_pairs(pairs, cfg["data"]["seed"])
    mc = match_config(cfg)
    rows = []
    for dropped in (None,) + DOC_FIELDS:
        fields = tuple(f for f in DOC_FIELDS if f != dropped)
        res = finetune(train, dev, docs, encoder, vocab, mc, fields)
        auc = heldout_auc(res.matcher, test, docs)
        rows.append({"dropped": dropped or "none", "auc": auc})
        log.info("drop-field %s: auc %.4f", dropped or "none", auc)
    full = rows[0]["auc"]
    for r in rows:
        r["delta"] = r["auc"] - full
    return rows


def run_extractor_sweep(cfg: dict, corpus, pairs, encoder, vocab, counts=SWEEP_COUNTS) -> dict[str, dict[int, float]]:
    """Test AUC of intent-guided and global-only matching per total extractor count.

    For the intent-guided model the count is the number used in matching,
    M + T, so T = count - M.
    """
    docs = {d.doc_id: d for d in corpus}
    train, dev, test = split_pairs(pairs, cfg["data"]["seed"])
    M = cfg["match"]["M"]
    grid: dict[str, dict[int, float]] = {"ige": {}, "global": {}}
    for count in counts:
        for mode, T in (("ige", count - M), ("global", count)):
            mc = match_config(cfg, mode=mode, T=T)
            res = finetune(train, dev, docs, encoder, vocab, mc)
            grid[mode][count] = heldout_auc(res.matcher, test, docs)
            log.info("extractor-sweep %s count %d: auc %.4f", mode, count, grid[mode][count])
    return grid


def build_service(args, cfg: dict) -> ScoringService:
    matcher = Matcher.load(args.model)
    cache = EmbeddingCache.load(args.cache)
    rules = IntentRules.load(args.intent_rules) if args.intent_rules else None
    qcache = None
    if args.query_cache:
        qcache = QueryCache.build(read_query_frequencies(args.query_cache), matcher, cfg["serve"]["top_n_queries"])
    return ScoringService(matcher, cache, rules, qcache)


# -- commands ---------------------------------------------------------------------------
def cmd_gen_data(args, cfg):
    n_docs = args.docs if args.docs is not None else cfg["data"]["n_docs"]
    seed = args.seed if args.seed is not None else cfg["data"]["seed"]
    cfg["data"].update(n_docs=n_docs, seed=seed)
    data = generate_synthetic(n_docs, seed, M=cfg["match"]["M"])
    write_corpus(args.out, data.corpus)
    write_pairs(sibling(args.out, ".pairs.jsonl"), data.pairs)
    IntentRules.from_lexicons(data.lexicons).save(sibling(args.out, ".rules.json"))
    with open(sibling(args.out, ".queries.tsv"), "w", encoding="utf-8") as fh:
        for text, count in query_frequencies(data.pairs):
            fh.write(f"{text}\t{count}\n")
    write_manifest(args.out, "gen-data", cfg, seed, [])
    print(f"wrote {len(data.corpus)} documents and {len(data.pairs)} pairs")


def cmd_pretrain(args, cfg):
    corpus = read_corpus(args.corpus)
    vocab = build_vocab(corpus)
    pc = pretrain_config(cfg)
    strategy = MaskStrategy.uniform(pc.rate) if args.uniform_masking else MaskStrategy.standard(pc.rate)
    res = pretrain(corpus, encoder_config(cfg, len(vocab)), strategy, pc, vocab, args.out, sibling(args.out, ".loss.csv"))
    write_manifest(args.out, "pretrain", cfg, pc.seed, [args.corpus])
    print(f"steps {len(res.losses)} first loss {res.losses[0]:.4f} final loss {np.mean(res.losses[-50:]):.4f} masked fraction {res.masked_fraction:.4f}")


def cmd_finetune(args, cfg):
    corpus = read_corpus(args.corpus)
    rules = IntentRules.load(args.rules)
    pairs = load_labeled(args.pairs, rules)
    encoder, vocab = load_pretrained(args.pretrained)
    train, dev, _ = split_pairs(pairs, cfg["data"]["seed"])
    mc = match_config(cfg)
    res = finetune(train, dev, corpus, encoder, vocab, mc)
    res.matcher.save(args.out, meta={"history": res.history, "best_epoch": res.best_epoch})
    write_manifest(args.out, "finetune", cfg, mc.seed, [args.corpus, args.pairs, args.rules, args.pretrained])
    print(f"best epoch {res.best_epoch} dev auc {res.best_dev_auc:.4f}")


def cmd_build_cache(args, cfg):
    corpus = read_corpus(args.corpus)
    matcher = Matcher.load(args.model)
    n = build_cache(corpus, matcher, args.out)
    write_manifest(args.out, "build-cache", cfg, cfg["match"]["seed"], [args.corpus, args.model])
    print(f"wrote {n} bytes for {len(corpus)} documents")


def cmd_eval(args, cfg):
    corpus = read_corpus(args.corpus)
    matcher = Matcher.load(args.model)
    rules = IntentRules.load(args.rules)
    pairs = load_labeled(args.pairs, rules)
    if args.split != "all":
        train, dev, test = split_pairs(pairs, cfg["data"]["seed"])
        pairs = {"train": train, "dev": dev, "test": test}[args.split]
    docs = {d.doc_id: d for d in corpus}
    report = metrics_report(group_pairs(pairs, matcher.score_pairs(pairs, docs)))
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        write_manifest(args.out, "eval", cfg, cfg["data"]["seed"], [args.corpus, args.pairs, args.rules, args.model])


def cmd_score(args, cfg):
    service = build_service(args, cfg)
    for line in sys.stdin:
        if line.strip():
            sys.stdout.write(service.handle_line(line) + "\n")
            sys.stdout.flush()


def cmd_serve(args, cfg):
    service = build_service(args, cfg)
    port = args.port if args.port is not None else cfg["serve"]["port"]
    server = make_server(service, args.host, port)
    log.info("serving on %s:%d", args.host, server.server_address[1])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_ablate(args, cfg):
    corpus = read_corpus(args.corpus)
    rules = IntentRules.load(args.rules)
    pairs = load_labeled(args.pairs, rules)
    encoder, vocab = load_pretrained(args.pretrained)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        if args.kind == "drop-field":
            w.writerow(["dropped", "auc", "delta"])
            for r in run_drop_field(cfg, corpus, pairs, encoder, vocab):
                w.writerow([r["dropped"], f"{r['auc']:.6f}", f"{r['delta']:.6f}"])
        else:
            grid = run_extractor_sweep(cfg, corpus, pairs, encoder, vocab)
            w.writerow(["mode"] + [str(c) for c in SWEEP_COUNTS])
            for mode, row in grid.items():
                w.writerow([mode] + [f"{row[c]:.6f}" for c in SWEEP_COUNTS])
    write_manifest(args.out, f"ablate {args.kind}", cfg, cfg["match"]["seed"], [args.corpus, args.pairs, args.rules, args.pretrained])
    print(Path(args.out).read_text(), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "build-cache": cmd_build_cache,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "score": cmd_score,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spm", description="Structured-document pretraining and intent-guided matching")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus and labeled pairs")
    p.add_argument("--docs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="multi-field masked-LM pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--uniform-masking", action="store_true", help="disable term-weighted masking on the name field")

    p = sub.add_parser("finetune", parents=[common], help="train the matcher on labeled pairs")
    for flag in ("--corpus", "--pairs", "--rules", "--pretrained", "--out"):
        p.add_argument(flag, required=True)

    p = sub.add_parser("build-cache", parents=[common], help="precompute document vectors")
    for flag in ("--corpus", "--model", "--out"):
        p.add_argument(flag, required=True)

    p = sub.add_parser("eval", parents=[common], help="AUC and Badcase@5 on a split")
    for flag in ("--corpus", "--pairs", "--rules", "--model"):
        p.add_argument(flag, required=True)
    p.add_argument("--split", choices=("train", "dev", "test", "all"), default="test")
    p.add_argument("--out")

    for name in ("serve", "score"):
        p = sub.add_parser(name, parents=[common], help="HTTP scoring service" if name == "serve" else "score JSON lines from stdin")
        p.add_argument("--model", required=True)
        p.add_argument("--cache", required=True)
        p.add_argument("--intent-rules")
        p.add_argument("--query-cache", help="query<TAB>count frequency file")
        if name == "serve":
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int)

    p = sub.add_parser("ablate", parents=[common], help="field and extractor-count ablations")
    p.add_argument("--kind", choices=("drop-field", "extractor-sweep"), required=True)
    for flag in ("--corpus", "--pairs", "--rules", "--pretrained", "--out"):
        p.add_argument(flag, required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, args.set)
        match_config(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"spm: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, KeyError) as exc:
        print(f"spm {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
