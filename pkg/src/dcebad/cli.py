"""Command-line entry point: train / eval / predict / benchmark / gradcheck."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import toy
from .autograd import NonFiniteError
from .config import RunConfig, dumps, load_file, resolve
from .gradcheck import TOLERANCE, run_suite
from .metrics import ConfusionMatrix, MetricsReport, compute_metrics
from .model import VARIANT_TITLES, VARIANTS, ConfigError, Model, ModelConfig, build, predict
from .training import TrainHistory, evaluate, train

log = logging.getLogger("dcebad")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- shared pieces


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", help="dataset TSV (text<TAB>label)")
    p.add_argument("--embeddings", help="pretrained embedding text file (non-encoder variants)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--stop-go", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--max-batches", type=int)
    p.add_argument("--text-size", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--r-hidden", type=int)
    p.add_argument("--num-layers", type=int)
    p.add_argument("--num-filters", type=int)
    p.add_argument("--encoder-blocks", type=int)
    p.add_argument("--encoder-heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--split", help="train,val,test ratios, e.g. 18,1,1")
    p.add_argument("--threads", type=int, help="evaluation worker threads")


def _run_config(args) -> RunConfig:
    file_data = load_file(args.config) if args.config else None
    split = None
    if args.split:
        try:
            split = [float(x) for x in args.split.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--split expects comma-separated numbers, got {args.split!r}") from exc
    flags = {
        "model": {
            "variant": args.variant,
            "seed": args.seed,
            "text_size": args.text_size,
            "d_model": args.d_model,
            "r_hidden": args.r_hidden,
            "num_layers": args.num_layers,
            "num_filters": args.num_filters,
            "encoder_blocks": args.encoder_blocks,
            "encoder_heads": args.encoder_heads,
            "dropout": args.dropout,
        },
        "train": {
            "seed": args.seed,
            "batch_size": args.batch_size,
            "learning_rate": args.lr,
            "epochs": args.epochs,
            "stop_go": args.stop_go,
            "eval_every": args.eval_every,
            "max_batches": args.max_batches,
        },
        "run": {
            "data": args.data,
            "embeddings": args.embeddings,
            "out": args.out,
            "split": split,
            "threads": args.threads,
            "variants": getattr(args, "variants", None),
        },
    }
    return resolve(file_data, flags)


@dataclass
class Corpus:
    labels: list[str]
    vocab: D.Vocab
    splits: tuple[list[D.Example], list[D.Example], list[D.Example]]


def _prepare_corpus(cfg: RunConfig) -> Corpus:
    if not cfg.run.data:
        raise UsageError("no dataset given (use --data or the config's run.data)")
    examples, labels = D.load_tsv(cfg.run.data)
    if not examples:
        raise D.DataError(f"{cfg.run.data}: no examples")
    splits = D.split(examples, cfg.run.split, seed=cfg.train.seed, num_classes=len(labels))
    vocab = D.build_vocab(splits[0], cfg.run.min_freq)
    return Corpus(labels, vocab, splits)


def _write_tsv(path: Path, examples, labels) -> None:
    path.write_text("".join(f"{ex.text}\t{labels[ex.label]}\n" for ex in examples), encoding="utf-8")


def _metrics_payload(cm: ConfusionMatrix, report: MetricsReport, labels) -> dict:
    d = report.to_dict(labels)
    d["labels"] = list(labels)
    d["confusion_matrix"] = cm.counts.tolist()
    d["examples"] = cm.total
    return d


def _apply_embeddings(model: Model, cfg: RunConfig, vocab: D.Vocab) -> float | None:
    if not cfg.run.embeddings:
        return None
    if model.config.uses_encoder:
        log.warning("variant %s embeds through the encoder; --embeddings ignored", model.config.variant)
        return None
    matrix, coverage = D.load_pretrained_embeddings(
        cfg.run.embeddings, vocab, np.random.default_rng(model.config.seed)
    )
    if matrix.shape[1] != model.config.d_model:
        raise ConfigError(
            f"embedding dimension {matrix.shape[1]} != d_model {model.config.d_model}; set --d-model"
        )
    model.token_embed.values = matrix
    log.info("pretrained embeddings cover %.1f%% of the vocabulary", 100 * coverage)
    return coverage


@dataclass
class TrainOutcome:
    model: Model
    history: TrainHistory
    cm: ConfusionMatrix
    report: MetricsReport
    wall_time: float


def _train_one(model_cfg: ModelConfig, cfg: RunConfig, corpus: Corpus, ckpt_path: Path | None) -> TrainOutcome:
    """Train, round-trip through a checkpoint, and score the test split from
    the reloaded weights so later ``eval`` runs see identical numbers."""
    start = time.perf_counter()
    train_ex, val_ex, test_ex = corpus.splits
    ts = model_cfg.text_size
    datasets = [D.encode_dataset(x, corpus.vocab, ts) for x in (train_ex, val_ex, test_ex)]
    model = build(model_cfg)
    _apply_embeddings(model, cfg, corpus.vocab)
    best, history = train(model, datasets[0], datasets[1], cfg.train)
    blob = ckpt.encode(best, corpus.labels, corpus.vocab)
    if ckpt_path is not None:
        ckpt_path.write_bytes(blob)
    reloaded = ckpt.decode(blob).model
    cm = evaluate(reloaded, datasets[2], workers=cfg.run.threads)
    return TrainOutcome(reloaded, history, cm, compute_metrics(cm), time.perf_counter() - start)


def _per_class_table(report: MetricsReport, labels) -> str:
    width = max(len(x) for x in labels + ["class"])
    rows = [f"{'class':<{width}}  precision  recall   f1      support"]
    for name, s in zip(labels, report.per_class):
        rows.append(f"{name:<{width}}  {s.precision:9.4f}  {s.recall:6.4f}  {s.f1:6.4f}  {s.support:7d}")
    return "\n".join(rows)


def _summary(report: MetricsReport) -> str:
    return (f"accuracy {report.accuracy:.4f}  macro precision {report.macro_precision:.4f}  "
            f"macro recall {report.macro_recall:.4f}  macro F1 {report.macro_f1:.4f}")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _run_config(args)
    corpus = _prepare_corpus(cfg)
    cfg.model.vocab_size = len(corpus.vocab)
    cfg.model.num_classes = len(corpus.labels)
    cfg.model.validate()
    cfg.train.validate()
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    for name, part in zip(("train", "val", "test"), corpus.splits):
        _write_tsv(out / f"{name}.tsv", part, corpus.labels)
    outcome = _train_one(cfg.model, cfg, corpus, out / "model.ckpt")
    history = outcome.history.to_dict()
    history["wall_time_seconds"] = outcome.wall_time
    (out / "history.json").write_text(dumps(history), encoding="utf-8")
    (out / "metrics.json").write_text(dumps(_metrics_payload(outcome.cm, outcome.report, corpus.labels)), encoding="utf-8")
    print(f"{cfg.model.variant}: stopped ({history['stop_reason']}) after {history['batches_run']} batches; "
          f"best val accuracy {history['best_accuracy']}")
    print("test " + _summary(outcome.report))
    print(_per_class_table(outcome.report, corpus.labels))
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    loaded = ckpt.load(args.checkpoint)
    examples, _ = D.load_tsv(args.data, labels=loaded.labels)
    if not examples:
        raise D.DataError(f"{args.data}: no examples")
    data = D.encode_dataset(examples, loaded.vocab, loaded.model.config.text_size)
    cm = evaluate(loaded.model, data, workers=args.threads or 1)
    report = compute_metrics(cm)
    payload = _metrics_payload(cm, report, loaded.labels)
    print(_summary(report))
    print(_per_class_table(report, loaded.labels))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_metrics.json").write_text(dumps(payload), encoding="utf-8")
    return 0


def cmd_predict(args) -> int:
    loaded = ckpt.load(args.checkpoint)
    texts = list(args.text or [])
    if args.file:
        try:
            raw = Path(args.file).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise D.DataError(f"cannot read {args.file}: {exc}") from exc
        texts += raw.split("\n")[:-1] if raw.endswith("\n") else raw.split("\n")
    if not texts:
        raise UsageError("nothing to predict (use --text or --file)")
    ts = loaded.model.config.text_size
    for text in texts:
        ids, mask = D.encode(text, loaded.vocab, ts)
        label, probs = predict(loaded.model, ids, mask)
        print(json.dumps({
            "text": text,
            "label": loaded.labels[label],
            "probabilities": {name: float(p) for name, p in zip(loaded.labels, probs)},
        }, ensure_ascii=False))
    return 0


def config_hash(model_cfg: ModelConfig, cfg: RunConfig) -> str:
    payload = {"model": model_cfg.to_dict(), "train": cfg.to_dict()["train"], "split": cfg.run.split}
    return hashlib.sha256(dumps(payload).encode("utf-8")).hexdigest()[:16]


def benchmark_tables(rows: list[dict], labels: list[str]) -> str:
    """Aligned accuracy/precision/F1 table followed by the per-class F1 grid."""
    name_w = max(len("Model"), *(len(r["title"]) for r in rows))
    lines = [f"{'No.':<4} {'Model':<{name_w}}  Accuracy  Precision  F1-score",
             "-" * (name_w + 37)]
    for r in rows:
        lines.append(f"{r['number']:<4} {r['title']:<{name_w}}  {100 * r['accuracy']:7.2f}%  "
                     f"{100 * r['macro_precision']:8.2f}%  {100 * r['macro_f1']:7.2f}%")
    lines += ["", "Per-class F1 (%)"]
    col_w = max(6, *(len(x) for x in labels))
    lines.append(f"{'Model':<{name_w}}  " + "  ".join(f"{x:>{col_w}}" for x in labels))
    for r in rows:
        lines.append(f"{r['title']:<{name_w}}  " + "  ".join(
            f"{100 * r['per_class_f1'][x]:{col_w}.2f}" for x in labels))
    return "\n".join(lines) + "\n"


def cmd_benchmark(args) -> int:
    cfg = _run_config(args)
    corpus = _prepare_corpus(cfg)
    cfg.model.vocab_size = len(corpus.vocab)
    cfg.model.num_classes = len(corpus.labels)
    cfg.train.validate()
    variants = cfg.run.variants
    if not variants:
        raise UsageError("no variants requested")
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    order = list(VARIANTS)
    rows = []
    for v in variants:
        model_cfg = cfg.model.for_variant(v)
        outcome = _train_one(model_cfg, cfg, corpus, None)
        r = outcome.report
        rows.append({
            "number": order.index(v) + 1,
            "variant": v,
            "title": VARIANT_TITLES[v],
            "accuracy": r.accuracy,
            "macro_precision": r.macro_precision,
            "macro_f1": r.macro_f1,
            "per_class_f1": {name: s.f1 for name, s in zip(corpus.labels, r.per_class)},
            "best_batch": outcome.history.best_batch,
            "batches_run": outcome.history.batches_run,
            "config_hash": config_hash(model_cfg, cfg),
            "wall_time_seconds": outcome.wall_time,
        })
        print(f"{VARIANT_TITLES[v]:<16} acc {r.accuracy:.4f}  P {r.macro_precision:.4f}  "
              f"F1 {r.macro_f1:.4f}  ({outcome.wall_time:.1f}s)", flush=True)
    report = {"labels": corpus.labels, "averaging": "macro", "rows": rows}
    table = benchmark_tables(rows, corpus.labels)
    (out / "benchmark.json").write_text(dumps(report), encoding="utf-8")
    (out / "benchmark.txt").write_text(table, encoding="utf-8")
    print()
    print(table, end="")
    return 0


def cmd_gradcheck(args) -> int:
    if args.d_model > 16 or args.text_size > 8:
        raise UsageError("gradcheck runs at desk scale: --d-model <= 16 and --text-size <= 8")
    if args.d_model % 2:
        raise UsageError("--d-model must be even (two attention heads)")

    def show(r):
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.layer:<26} {r.tensor:<34} max_rel_err={r.error:.3e}", flush=True)

    results = run_suite(args.variant, args.d_model, args.text_size, args.seeds, args.seed,
                        end_to_end=not args.no_end_to_end, progress=show)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_toy(args) -> int:
    path = toy.write_tsv(args.path, args.per_class, args.seed)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcebad", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one variant and score its test split")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labelled TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify raw texts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", action="append", help="text to classify (repeatable)")
    p.add_argument("--file", help="file with one text per line")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", help="train and compare several variants on one split")
    _add_run_flags(p)
    p.add_argument("--variants", type=lambda s: [x.strip() for x in s.split(",") if x.strip()],
                   help="comma-separated variant names (default: all nine)")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("gradcheck", help="central-difference gradient checks")
    p.add_argument("--variant", default="dc_ebad", choices=list(VARIANTS))
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--text-size", type=int, default=8)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-end-to-end", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("toy-corpus", help="write the synthetic 4-class corpus")
    p.add_argument("path")
    p.add_argument("--per-class", type=int, default=140)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dcebad: error: {exc}", file=sys.stderr)
        return 2
    except (D.DataError, ckpt.CheckpointError, ConfigError, NonFiniteError, ValueError, OSError) as exc:
        print(f"dcebad: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
