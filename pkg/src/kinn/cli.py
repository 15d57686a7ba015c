"""Command-line entry point: make-synthetic, tag, train, eval, explain.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import core
from .config import RunConfig, load_config, with_overrides
from .data import (
    SPLIT_RATIOS,
    SYNTHETIC_KINDS,
    DatasetRecord,
    Split,
    aggregate_users,
    assign_splits,
    load_dataset,
    majority_vote,
    make_synthetic,
    save_dataset,
)
from .encoding import (
    AspectSet,
    FixtureCommonsense,
    HashEncoder,
    Seq2SeqCommonsense,
    StubCommonsense,
    TransformerEncoder,
)
from .errors import BackendError, ConfigError, DataError, InputError, KinnError
from .explain import Block, FixtureLlm, OpenAiCompatibleLlm, ReportFormat, StubLlm, emit_report, explain_document
from .lexicon import FixtureUmls, Lexicon, UtsUmlsClient, load_lexicon, save_lexicon
from .metrics import Task, evaluate
from .pipeline import EncodedDocument, aspects_for, encode_document, to_example, untagged
from .tagging import TaggedDocument, tag_corpus

logger = logging.getLogger("kinn")

UMLS_KEY_ENV = "UMLS_API_KEY"
TAGGED_FILE = "tagged.jsonl"
ASPECTS_FILE = "aspects.jsonl"
CHECKPOINT_FILE = "model.pt"
TRAIN_LOG_FILE = "train_log.jsonl"
METRICS_FILE = "metrics.json"


class UsageError(KinnError):
    pass


@dataclass
class Backends:
    embedder: object
    commonsense: object | None
    umls: object | None
    llm: object | None
    lexicon: Lexicon


def build_backends(cfg: RunConfig) -> Backends:
    if cfg.encoder == "hash":
        embedder = HashEncoder(cfg.dim)
    else:
        try:
            embedder = TransformerEncoder(cfg.encoder_model)
        except OSError as exc:
            raise BackendError(f"cannot load encoder {cfg.encoder_model!r}: {exc}", "transformer", False) from exc
    commonsense = None
    if cfg.aspects:
        if cfg.commonsense == "stub":
            commonsense = StubCommonsense()
        elif cfg.commonsense == "fixture":
            commonsense = FixtureCommonsense(cfg.commonsense_fixture)
        else:
            try:
                commonsense = Seq2SeqCommonsense(cfg.commonsense_model)
            except OSError as exc:
                raise BackendError(f"cannot load commonsense model: {exc}", "seq2seq", False) from exc
    umls = None
    if cfg.umls == "fixture":
        umls = FixtureUmls(cfg.umls_fixture)
    elif cfg.umls == "uts":
        key = os.environ.get(UMLS_KEY_ENV)
        if not key:
            raise ConfigError(f"umls 'uts' needs the {UMLS_KEY_ENV} environment variable")
        umls = UtsUmlsClient(key)
    llm = None
    if cfg.llm == "stub":
        llm = StubLlm()
    elif cfg.llm == "fixture":
        llm = FixtureLlm(cfg.llm_fixture)
    elif cfg.llm == "openai":
        llm = OpenAiCompatibleLlm(cfg.llm_endpoint, cfg.llm_model, api_key_env=cfg.llm_api_key_env,
                                  timeout=cfg.llm_timeout, max_tokens=cfg.llm_max_tokens)
    lexicon = load_lexicon(cfg.lexicon) if cfg.lexicon else Lexicon()
    return Backends(embedder, commonsense, umls, llm, lexicon)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(path: Path, rows) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_records(cfg: RunConfig) -> list[DatasetRecord]:
    records = load_dataset(cfg.dataset, cfg.task, cfg.num_classes)
    if cfg.aggregation == "concat":
        records = aggregate_users(records)
    return assign_splits(records, cfg.seed)


def tag_records(cfg: RunConfig, be: Backends, records: Sequence[DatasetRecord]) -> list[TaggedDocument]:
    docs = [(r.doc_id, r.text) for r in records]
    if not cfg.tagging:
        return [untagged(d, t) for d, t in docs]
    from .backends import worker_count

    workers = worker_count(be.embedder, be.umls, default=cfg.workers)
    return tag_corpus(docs, be.lexicon, be.embedder, be.umls, workers=workers,
                      threshold=cfg.threshold, max_gram=cfg.max_gram)


def aspects_of(cfg: RunConfig, be: Backends, texts: Sequence[str]) -> list[AspectSet | None]:
    if be.commonsense is None:
        return [None] * len(texts)
    from .backends import worker_count

    return aspects_for(be.commonsense, texts, worker_count(be.commonsense, default=cfg.workers))


def encode_records(cfg: RunConfig, be: Backends, records: Sequence[DatasetRecord],
                   tagged: Sequence[TaggedDocument] | None = None,
                   aspects: Sequence[AspectSet | None] | None = None) -> list[EncodedDocument]:
    tagged = tagged if tagged is not None else tag_records(cfg, be, records)
    aspects = aspects if aspects is not None else aspects_of(cfg, be, [r.text for r in records])
    return [encode_document(r.doc_id, r.text, be.embedder, cfg.max_len, t if cfg.tagging else None, a)
            for r, t, a in zip(records, tagged, aspects)]


def _model_dim(cfg: RunConfig, be: Backends) -> int:
    dim = int(be.embedder.dim)
    if dim % cfg.heads:
        raise ConfigError(f"encoder dim {dim} is not divisible by heads {cfg.heads}")
    return dim


def echo(command: str, cfg: RunConfig) -> None:
    print(json.dumps({"command": command, "seed": cfg.seed, "config": cfg.to_dict()}, sort_keys=True))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def run_make_synthetic(kind: str, out: Path, n_docs: int = 500, seed: int = 0) -> Path:
    records, lex = make_synthetic(kind, n_docs, seed)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(records, out / "dataset.jsonl")
    save_lexicon(lex, out / "lexicon.jsonl")
    preset = {"binary": "clef", "multilabel": "primate", "multiclass": "cams"}[kind]
    config = {"preset": preset, "dataset": "dataset.jsonl", "lexicon": "lexicon.jsonl", "out": "run",
              "seed": seed, "max_len": 150, "batch_size": 16, "epochs": 25, "variant": "KINN2"}
    _write_json(out / "config.json", config)
    return out / "config.json"


def run_tag(cfg: RunConfig) -> Path:
    be = build_backends(cfg)
    records = load_records(cfg)
    tagged = tag_records(cfg, be, records)
    aspects = aspects_of(cfg, be, [r.text for r in records])
    out = _out(cfg)
    _write_jsonl(out / TAGGED_FILE, (t.to_dict() for t in tagged))
    if be.commonsense is not None:
        _write_jsonl(out / ASPECTS_FILE, ({"doc_id": r.doc_id, **a.to_dict()} for r, a in zip(records, aspects)))
    logger.info("tagged %d documents, %d concept spans", len(tagged), sum(len(t.spans) for t in tagged))
    return out / TAGGED_FILE


def run_train(cfg: RunConfig) -> Path:
    be = build_backends(cfg)
    records = load_records(cfg)
    enc = encode_records(cfg, be, records)
    mcfg = cfg.model_config(_model_dim(cfg, be))
    splits = defaultdict(list)
    for r, e in zip(records, enc):
        splits[r.split].append(to_example(e, r.label))
    if not splits[Split.TRAIN]:
        raise DataError("no training records", cfg.dataset)
    out = _out(cfg)
    log_path = out / TRAIN_LOG_FILE
    with log_path.open("w", encoding="utf-8") as fh:
        def on_epoch(entry: core.EpochLog) -> None:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")

        try:
            result = core.train(mcfg, splits[Split.TRAIN], splits[Split.DEV] or None, on_epoch=on_epoch)
        except core.TrainingDiverged as exc:
            model = core.KinnNet(mcfg)
            model.load_state_dict(exc.last_good_state)
            core.save_checkpoint(out / CHECKPOINT_FILE, mcfg, model, {"run_config": cfg.to_dict(), "diverged": True})
            raise
    core.save_checkpoint(out / CHECKPOINT_FILE, mcfg, result.model,
                         {"run_config": cfg.to_dict(), "encoder": be.embedder.name})
    _write_json(out / "run.json", {
        "seed": cfg.seed, "config": cfg.to_dict(), "split_ratios": list(SPLIT_RATIOS),
        "split_sizes": {s.value: len(splits[s]) for s in Split},
        "epochs_run": max((e.epoch for e in result.log), default=0), "stopped_early": result.stopped_early,
    })
    return out / CHECKPOINT_FILE


def _load_model(cfg: RunConfig, be: Backends):
    path = Path(cfg.out) / CHECKPOINT_FILE
    if not path.exists():
        raise DataError("no checkpoint; run 'kinn train' first", str(path))
    mcfg, model, extra = core.load_checkpoint(path)
    if mcfg.dim != be.embedder.dim:
        raise ConfigError(f"checkpoint dim {mcfg.dim} does not match encoder dim {be.embedder.dim}")
    if extra.get("encoder") and extra["encoder"] != be.embedder.name:
        raise ConfigError(f"checkpoint was trained with encoder {extra['encoder']}, config uses {be.embedder.name}")
    return mcfg, model


def run_eval(cfg: RunConfig, split: str = "TEST") -> dict:
    be = build_backends(cfg)
    mcfg, model = _load_model(cfg, be)
    split = Split(split.upper())
    records = [r for r in load_records(cfg) if r.split == split]
    if not records:
        raise DataError(f"no records in split {split.value}", cfg.dataset)
    enc = encode_records(cfg, be, records)
    examples = [to_example(e, r.label) for r, e in zip(records, enc)]
    loss, report, preds = core.evaluate_model(mcfg, model, examples)
    result = {"split": split.value, "n": len(records), "loss": loss, **report.to_dict()}
    if cfg.aggregation == "majority" and any(r.user_id for r in records):
        users_true, users_pred = {}, defaultdict(list)
        for r, p in zip(records, preds):
            uid = r.user_id or r.doc_id
            users_true[uid] = r.label
            users_pred[uid].append(tuple(int(b) for b in p) if mcfg.task == Task.MULTILABEL else int(p))
        uids = sorted(users_true)
        y_true = [users_true[u] for u in uids]
        y_pred = [majority_vote(mcfg.task, users_pred[u]) for u in uids]
        user_report = evaluate(np.asarray(y_true), np.asarray(y_pred), mcfg.task, mcfg.num_classes)
        result["per_user"] = {"n": len(uids), **user_report.to_dict()}
    result.update({"seed": cfg.seed, "split_ratios": list(SPLIT_RATIOS), "variant": mcfg.variant.value,
                   "tagging": cfg.tagging, "aspects": cfg.aspects})
    _write_json(_out(cfg) / METRICS_FILE, result)
    return result


def _read_tagged(out: Path) -> dict[str, TaggedDocument]:
    path = out / TAGGED_FILE
    if not path.exists():
        raise DataError("no tagged corpus; run 'kinn tag' first", str(path))
    docs = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    doc = TaggedDocument.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, InputError) as exc:
                    raise DataError(f"malformed tagged record ({exc})", str(path), lineno) from None
                docs[doc.doc_id] = doc
    return docs


def _read_aspects(out: Path) -> dict[str, AspectSet]:
    path = out / ASPECTS_FILE
    if not path.exists():
        return {}
    table = {}
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                table[rec["doc_id"]] = AspectSet.from_dict(rec)
    return table


def run_explain(cfg: RunConfig, doc_ids: Sequence[str], formats: Sequence[str] = ("JSON", "HTML")) -> list[Path]:
    if not doc_ids:
        raise UsageError("give at least one --doc-id")
    be = build_backends(cfg)
    out = _out(cfg)
    corpus = _read_tagged(out)
    missing = [d for d in doc_ids if d not in corpus]
    if missing:
        raise DataError(f"document not in tagged corpus: {', '.join(missing)}")
    mcfg, model = _load_model(cfg, be)
    cached = _read_aspects(out)
    report_dir = out / "explanations"
    report_dir.mkdir(exist_ok=True)
    block = Block(cfg.attention_block)
    written = []
    for doc_id in doc_ids:
        doc = corpus[doc_id]
        aspects = None
        if be.commonsense is not None:
            aspects = cached.get(doc_id) or aspects_of(cfg, be, [doc.text])[0]
        enc = encode_document(doc_id, doc.text, be.embedder, mcfg.max_len, doc if cfg.tagging else None, aspects)
        trace = core.forward(mcfg, model, enc.x_domain.vectors, enc.x_cs.vectors).item(0)
        decision = core.decide(mcfg, trace.probs)
        ranges = enc.cs_ranges if block == Block.COMMONSENSE else enc.domain_ranges
        report = explain_document(doc_id, doc.text, trace, ranges, decision, be.lexicon, be.embedder, be.llm,
                                  label_names=cfg.names(), top_k=cfg.top_k, threshold=cfg.threshold, block=block)
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in doc_id)
        for fmt in formats:
            fmt = ReportFormat(fmt.upper())
            written.append(emit_report(report, fmt, report_dir / f"{safe}.{fmt.value.lower()}"))
    return written


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kinn", description="Knowledge-infused classification of mental-health posts.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--no-knowledge", action="store_true", help="ablation: disable tagging and aspects")

    syn = sub.add_parser("make-synthetic", help="write a bundled planted-signal corpus")
    syn.add_argument("--kind", choices=SYNTHETIC_KINDS, default="binary")
    syn.add_argument("--n", type=int, default=500)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--out", required=True)

    common(sub.add_parser("tag", help="phrase-tag the dataset"))
    common(sub.add_parser("train", help="train and write a checkpoint"))
    ev = sub.add_parser("eval", help="score a checkpoint on one split")
    common(ev)
    ev.add_argument("--split", default="TEST", choices=[s.value for s in Split])
    ex = sub.add_parser("explain", help="write explanation reports")
    common(ex)
    ex.add_argument("--doc-id", action="append", default=[], dest="doc_ids")
    ex.add_argument("--format", action="append", choices=["json", "html"], dest="formats")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = with_overrides(cfg, seed=args.seed, out=args.out)
    if args.no_knowledge:
        cfg = with_overrides(cfg, tagging=False, aspects=False)
    return cfg.validate()


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"kinn: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.use_deterministic_algorithms(True)
    try:
        if args.command == "make-synthetic":
            path = run_make_synthetic(args.kind, Path(args.out), args.n, args.seed)
            print(json.dumps({"command": args.command, "seed": args.seed, "config": str(path)}))
            return 0
        cfg = _resolve(args)
        echo(args.command, cfg)
        if args.command == "tag":
            print(run_tag(cfg))
        elif args.command == "train":
            print(run_train(cfg))
        elif args.command == "eval":
            print(json.dumps(run_eval(cfg, args.split), sort_keys=True))
        else:
            for path in run_explain(cfg, args.doc_ids, args.formats or ("json", "html")):
                print(path)
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"kinn: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, InputError) as exc:
        print(f"kinn: data error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"kinn: backend error: {exc}", file=sys.stderr)
        return 3
    except KinnError as exc:
        print(f"kinn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
