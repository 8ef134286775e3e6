"""k12bert command line: one subcommand per pipeline stage.

    k12bert [--config PATH] [--seed N] [--jobs N] SUBCOMMAND [--key=value ...]

Config files are flat ``key = value`` lines with dotted keys (``#`` comments).
Any key can be overridden by ``--key=value``; a unique last component works as
a short form (``--sources=a,b`` for ``ingest.sources``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


from . import corpus, mlm_dataset, tagging
from .encoder import (
    Checkpoint,
    EncoderConfig,
    NumericFailure,
    TrainConfig,
    embed_texts,
    grad_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
    write_trace,
)
from .encoder.gradcheck import TINY
from .tokenizer import Tokenizer, load_vocab

log = logging.getLogger("k12bert")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
GRAD_CHECK_TOLERANCE = 1e-3
SUBCOMMANDS = ("ingest", "manifest", "tokenize-check", "mlm-build", "train", "grad-check", "embed", "tag-eval")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _int_list(s: str) -> list[int]:
    return [int(x) for x in _list(s)]


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any


KEYS: dict[str, Key] = {
    "paths.corpus_in": Key(str, "fixtures/corpus"),
    "paths.corpus_out": Key(str, "out/corpus.jsonl"),
    "paths.manifest": Key(str, "out/manifest.json"),
    "paths.vocab": Key(str, "vocab.txt"),
    "paths.dict": Key(str, ""),
    "paths.shards_dir": Key(str, "out/shards"),
    "paths.checkpoint": Key(str, "out/model.k12c"),
    "paths.init_checkpoint": Key(str, ""),
    "paths.trace": Key(str, "out/loss_trace.csv"),
    "paths.taxonomy": Key(str, "taxonomy.jsonl"),
    "paths.questions": Key(str, "questions.jsonl"),
    "paths.embeddings": Key(str, "out/embeddings.emb"),
    "paths.question_embeddings": Key(str, ""),
    "paths.label_embeddings": Key(str, ""),
    "paths.report": Key(str, "out/report.json"),
    "paths.tokenizer_reference": Key(str, ""),
    "ingest.sources": Key(_list, []),
    "ingest.exclude_sources": Key(_list, []),
    "ingest.min_words": Key(int, 4),
    "manifest.reference": Key(_bool, False),
    "tokenizer.lowercase": Key(_bool, True),
    "mlm.shard_size": Key(int, 1024),
    "mlm.pack": Key(_bool, True),
    "masking.select_prob": Key(float, 0.15),
    "masking.mask_frac": Key(float, 0.8),
    "masking.random_frac": Key(float, 0.1),
    "masking.keep_frac": Key(float, 0.1),
    "encoder.layers": Key(int, 2),
    "encoder.hidden": Key(int, 128),
    "encoder.heads": Key(int, 2),
    "encoder.ff_dim": Key(int, 512),
    "encoder.max_len": Key(int, 128),
    "encoder.dropout_prob": Key(float, 0.0),
    "encoder.init_std": Key(float, 0.02),
    "train.batch_size": Key(int, 32),
    "train.grad_accum_steps": Key(int, 4),
    "train.epochs": Key(int, 10),
    "train.lr": Key(float, 5e-5),
    "train.beta1": Key(float, 0.9),
    "train.beta2": Key(float, 0.999),
    "train.eps": Key(float, 1e-8),
    "train.warmup_steps": Key(int, 0),
    "train.resume": Key(_bool, False),
    "embed.pooling": Key(str, "mean"),
    "eval.ks": Key(_int_list, [5, 10, 15, 20]),
    "gradcheck.eps": Key(float, 1e-3),
    "gradcheck.coords": Key(int, 240),
}


class ConfigError(ValueError):
    pass


def resolve_key(name: str) -> str:
    if name in KEYS:
        return name
    matches = [k for k in KEYS if k.rsplit(".", 1)[-1] == name]
    if len(matches) == 1:
        return matches[0]
    if len(matches) > 1:
        raise ConfigError(f"ambiguous key {name!r}: could be {', '.join(matches)}")
    raise ConfigError(f"unknown key {name!r}; valid keys: {', '.join(KEYS)}")


def _set(cfg: dict, name: str, raw: str, origin: str) -> None:
    key = resolve_key(name)
    try:
        cfg[key] = KEYS[key].parse(raw)
    except ValueError as e:
        raise ConfigError(f"{origin}: bad value for {key}: {e}") from e


def load_config(path: str | Path | None, overrides: list[str]) -> dict:
    cfg = {k: v.default for k, v in KEYS.items()}
    if path:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                k, v = line.split("=", 1)
                _set(cfg, k.strip(), v.strip(), f"{path}:{lineno}")
    items = list(overrides)
    while items:
        item = items.pop(0)
        if not item.startswith("--"):
            raise ConfigError(f"unexpected argument {item!r}; overrides look like --key=value")
        body = item[2:]
        if "=" in body:
            k, v = body.split("=", 1)
        elif items and not items[0].startswith("--"):
            k, v = body, items.pop(0)
        else:
            raise ConfigError(f"override {item!r} needs a value (--key=value)")
        _set(cfg, k, v, "command line")
    if set(cfg["ingest.sources"]) & set(cfg["ingest.exclude_sources"]):
        raise ConfigError("ingest.sources and ingest.exclude_sources overlap")
    return cfg


class _StageFormatter(logging.Formatter):
    stage = "-"

    def format(self, record):
        msg = record.getMessage().replace("\t", " ").replace("\n", " ")
        return f"{record.levelname}\t{self.stage}\t{msg}"


def _setup_logging(stage: str) -> None:
    fmt = _StageFormatter()
    fmt.stage = stage
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(fmt)
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)


def _need(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} path is not configured")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _out(path: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _tokenizer(cfg) -> Tokenizer:
    return Tokenizer(load_vocab(_need(cfg["paths.vocab"], "vocabulary")), lowercase=cfg["tokenizer.lowercase"])


def _policy(cfg, seed) -> mlm_dataset.MaskingPolicy:
    return mlm_dataset.MaskingPolicy(cfg["masking.select_prob"], cfg["masking.mask_frac"],
                                     cfg["masking.random_frac"], cfg["masking.keep_frac"], seed)


def _encoder_config(cfg, vocab_size, seed) -> EncoderConfig:
    return EncoderConfig(vocab_size=vocab_size, layers=cfg["encoder.layers"], hidden=cfg["encoder.hidden"],
                         heads=cfg["encoder.heads"], ff_dim=cfg["encoder.ff_dim"], max_len=cfg["encoder.max_len"],
                         dropout_prob=cfg["encoder.dropout_prob"], init_std=cfg["encoder.init_std"], seed=seed)


# -- stages ------------------------------------------------------------------

def cmd_ingest(cfg, seed, jobs) -> int:
    docs = corpus.load_documents(_need(cfg["paths.corpus_in"], "corpus input"))
    dictionary = corpus.load_dictionary(cfg["paths.dict"] or None)
    icfg = corpus.IngestConfig(min_words=cfg["ingest.min_words"], include_sources=tuple(cfg["ingest.sources"]),
                               exclude_sources=tuple(cfg["ingest.exclude_sources"]))
    log.info("loaded %d documents, dictionary of %d words", len(docs), len(dictionary))
    result = corpus.ingest(docs, dictionary, icfg, jobs=jobs)
    n = corpus.write_corpus(result.records, _out(cfg["paths.corpus_out"]))
    manifest = corpus.build_manifest(result.records, result.stats)
    corpus.write_manifest(manifest, _out(cfg["paths.manifest"]))
    for k in corpus.pipeline.STAT_KEYS:
        log.info("%s=%d", k, result.stats[k])
    log.info("wrote %d sentences to %s", n, cfg["paths.corpus_out"])
    return EXIT_OK


def cmd_manifest(cfg, seed, jobs) -> int:
    if cfg["manifest.reference"]:
        print(json.dumps(corpus.reference_manifest(), indent=2))
        return EXIT_OK
    records = corpus.read_corpus(_need(cfg["paths.corpus_out"], "sentence corpus"))
    stats = None
    mpath = Path(cfg["paths.manifest"])
    if mpath.exists():
        old = corpus.read_manifest(mpath)
        stats = {k: old.get(k, 0) for k in corpus.pipeline.STAT_KEYS}
    manifest = corpus.build_manifest(records, stats)
    corpus.write_manifest(manifest, _out(cfg["paths.manifest"]))
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_tokenize_check(cfg, seed, jobs) -> int:
    tok = _tokenizer(cfg)
    log.info("vocabulary size V=%d", len(tok.vocab))
    status = EXIT_OK
    ref_path = cfg["paths.tokenizer_reference"]
    if ref_path:
        mismatches = total = 0
        with open(_need(ref_path, "tokenizer reference"), encoding="utf-8") as f:
            for line in f:
                ref = json.loads(line)
                seq = tok.encode(ref["text"], len(ref["input_ids"]))
                total += 1
                if seq.input_ids != ref["input_ids"] or seq.attention_mask != ref["attention_mask"]:
                    mismatches += 1
                    log.warning("mismatch on %r", ref["text"][:60])
        log.info("reference check: %d/%d sequences match", total - mismatches, total)
        print(f"reference_match={total - mismatches}/{total}")
        if mismatches:
            status = EXIT_INPUT
    corpus_path = Path(cfg["paths.corpus_out"])
    if corpus_path.exists():
        pieces = unk = 0
        for rec in corpus.read_corpus(corpus_path):
            p = tok.tokenize(rec.text)
            pieces += len(p)
            unk += sum(1 for x in p if x == "[UNK]")
        log.info("corpus: %d pieces, unk rate %.4f", pieces, unk / max(pieces, 1))
        print(f"pieces={pieces} unk_rate={unk / max(pieces, 1):.4f}")
    return status


def cmd_mlm_build(cfg, seed, jobs) -> int:
    tok = _tokenizer(cfg)
    records = corpus.read_corpus(_need(cfg["paths.corpus_out"], "sentence corpus"))
    policy = _policy(cfg, seed)
    L = cfg["encoder.max_len"]
    examples = mlm_dataset.build_examples(records, tok, L, policy, cfg["mlm.shard_size"], pack=cfg["mlm.pack"])
    header = mlm_dataset.write_shards(examples, cfg["paths.shards_dir"], cfg["mlm.shard_size"], max_len=L,
                                      vocab_size=len(tok.vocab), policy=policy)
    masked = sum(int((e.labels != mlm_dataset.IGNORE_LABEL).sum()) for e in examples)
    log.info("wrote %d examples in %d shards (%d masked positions)", header["example_count"], header["shard_count"], masked)
    return EXIT_OK


def cmd_train(cfg, seed, jobs) -> int:
    shards = _need(cfg["paths.shards_dir"], "shard directory")
    header = mlm_dataset.read_header(shards)
    examples = mlm_dataset.read_shards(shards)
    tcfg = TrainConfig(batch_size=cfg["train.batch_size"], grad_accum_steps=cfg["train.grad_accum_steps"],
                       epochs=cfg["train.epochs"], lr=cfg["train.lr"], beta1=cfg["train.beta1"],
                       beta2=cfg["train.beta2"], eps=cfg["train.eps"], warmup_steps=cfg["train.warmup_steps"],
                       seed=seed)
    init = cfg["paths.init_checkpoint"]
    if init:
        ckpt = load_checkpoint(_need(init, "initial checkpoint"))
        # continued pretraining starts a fresh optimizer unless resuming an interrupted run
        start = ckpt if cfg["train.resume"] else ckpt.params
        log.info("starting from %s (epoch %d, resume=%s)", init, ckpt.epoch, cfg["train.resume"])
    else:
        start = init_params(_encoder_config(cfg, header["vocab_size"], seed))
    params = start.params if isinstance(start, Checkpoint) else start
    if params.config.vocab_size != header["vocab_size"] or params.config.max_len < header["max_len"]:
        raise ConfigError(f"model (V={params.config.vocab_size}, L={params.config.max_len}) does not fit "
                          f"dataset (V={header['vocab_size']}, L={header['max_len']})")

    trace_path = _out(cfg["paths.trace"])
    write_trace([], trace_path)
    t0 = time.monotonic()

    def on_step(row):
        write_trace([row], trace_path, append=True)
        log.info("step=%d epoch=%d loss=%.5f masked_acc=%.4f", row.step, row.epoch, row.loss, row.masked_acc)

    result = train(start, examples, tcfg, checkpoint_path=_out(cfg["paths.checkpoint"]), on_step=on_step)
    if tcfg.epochs == 0 or not result.trace:
        save_checkpoint(result.checkpoint, cfg["paths.checkpoint"])
    log.info("trained %d optimizer steps in %.1fs", len(result.trace), time.monotonic() - t0)
    return EXIT_OK


def cmd_grad_check(cfg, seed, jobs) -> int:
    res = grad_check(TINY, eps=cfg["gradcheck.eps"], n_coords=cfg["gradcheck.coords"], seed=seed)
    log.info("checked %d coordinates over %d tensors", res.coords_checked, len(res.per_tensor))
    print(f"max_rel_error={res.max_rel_error:.3e}")
    return EXIT_OK if res.max_rel_error < GRAD_CHECK_TOLERANCE else EXIT_NUMERIC


def cmd_embed(cfg, seed, jobs) -> int:
    tok = _tokenizer(cfg)
    ckpt = load_checkpoint(_need(cfg["paths.checkpoint"], "checkpoint"))
    labels = tagging.load_taxonomy(_need(cfg["paths.taxonomy"], "taxonomy"))
    questions = tagging.load_questions(_need(cfg["paths.questions"], "questions"), labels)
    pooling = cfg["embed.pooling"]
    names = [lab.flat for lab in labels] + [q.question_id for q in questions]
    texts = [lab.flat for lab in labels] + [q.text for q in questions]
    vecs = embed_texts(ckpt.params, tok, texts, pooling=pooling)
    tagging.write_embeddings(_out(cfg["paths.embeddings"]), names, vecs)
    log.info("embedded %d labels and %d questions (%s pooling)", len(labels), len(questions), pooling)
    return EXIT_OK


def cmd_tag_eval(cfg, seed, jobs) -> int:
    labels = tagging.load_taxonomy(_need(cfg["paths.taxonomy"], "taxonomy"))
    questions = tagging.load_questions(_need(cfg["paths.questions"], "questions"), labels)
    qpath = cfg["paths.question_embeddings"] or cfg["paths.embeddings"]
    lpath = cfg["paths.label_embeddings"] or cfg["paths.embeddings"]
    qemb = tagging.load_external_embeddings(_need(qpath, "question embeddings"))
    lemb = qemb if lpath == qpath else tagging.load_external_embeddings(_need(lpath, "label embeddings"))
    result = tagging.evaluate(questions, labels, qemb, lemb, cfg["eval.ks"], report_path=_out(cfg["paths.report"]))
    for k, v in sorted(result.recall.items()):
        print(f"R@{k}={round(v, 4)}")
    log.info("evaluated %d questions against %d labels", result.n, len(labels))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "manifest": cmd_manifest,
    "tokenize-check": cmd_tokenize_check,
    "mlm-build": cmd_mlm_build,
    "train": cmd_train,
    "grad-check": cmd_grad_check,
    "embed": cmd_embed,
    "tag-eval": cmd_tag_eval,
}


def run(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="k12bert", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=0, help="seed for every stochastic stage")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for ingestion")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    args, rest = parser.parse_known_args(argv)
    _setup_logging(args.subcommand)
    try:
        cfg = load_config(args.config, rest)
        return COMMANDS[args.subcommand](cfg, args.seed, max(1, args.jobs))
    except NumericFailure as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as e:
        log.error("%s", e)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
