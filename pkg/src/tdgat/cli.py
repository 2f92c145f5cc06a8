"""Command-line entry point: ``tdgat <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 input or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from .datasets import (Corpus, dataset_stats, format_stats, load_corpus, read_split_sidecar, split_dev,
                       synth_corpus, synth_embeddings)
from .depgraph import POLARITIES, ParseError, SentenceError, dump_jsonl, sentence_from_record
from .embeddings import EmbeddingError, load_glove, save_glove
from .model import (LSTM_MODES, VARIANTS, ConfigError, ModelConfig, ModelFormatError, load_model,
                    model_gradcheck, param_count, save_model)
from .training import TrainConfig, ablate, evaluate, format_ablation, predict_proba, train

EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 1, 2, 3

class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_seed() -> int:
    raw = os.environ.get("TDGAT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"TDGAT_SEED must be an integer, got {raw!r}") from None


# -- flag groups --------------------------------------------------------------------

def _add_seed(p):
    p.add_argument("--seed", type=int, default=None,
                   help="random seed for init, shuffling, dropout and splits (default: $TDGAT_SEED or 0)")


def _add_model_flags(p, layers=3):
    g = p.add_argument_group("model")
    g.add_argument("--dim", type=int, default=300, help="hidden size D (default 300)")
    g.add_argument("--heads", type=int, default=6, help="attention heads K; must divide D (default 6)")
    g.add_argument("--layers", type=int, default=layers, help=f"GAT layers L (default {layers})")
    g.add_argument("--variant", choices=VARIANTS, default="TDGAT", help="TDGAT or GAT without the LSTM (default TDGAT)")
    g.add_argument("--lstm-mode", choices=LSTM_MODES, default="all",
                   help="apply the LSTM to all nodes or only the target (default all)")
    g.add_argument("--no-self-loop", action="store_true", help="exclude node i from its own neighborhood")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    d = TrainConfig()
    g.add_argument("--epochs", type=int, default=d.max_epochs, help=f"maximum epochs (default {d.max_epochs})")
    g.add_argument("--batch-size", type=int, default=d.batch_size, help=f"mini-batch size (default {d.batch_size})")
    g.add_argument("--lambda", dest="lambda_l2", type=float, default=d.lambda_l2,
                   help=f"L2 coefficient (default {d.lambda_l2:g})")
    g.add_argument("--dropout", type=float, default=d.dropout_rate,
                   help=f"input dropout rate (default {d.dropout_rate:g})")
    g.add_argument("--adam-lr", type=float, default=d.adam_lr, help=f"Adam learning rate (default {d.adam_lr:g})")
    g.add_argument("--sgd-lr", type=float, default=d.sgd_lr, help=f"SGD learning rate (default {d.sgd_lr:g})")
    g.add_argument("--patience", type=int, default=d.switch_patience,
                   help=f"epochs without improvement before switching to SGD (default {d.switch_patience})")
    g.add_argument("--switch-epoch", type=int, default=None, help="switch to SGD after this epoch (overrides --patience)")
    g.add_argument("--final", action="store_true", help="train on train+dev and select by training loss")


def _add_data_flags(p, test=False):
    g = p.add_argument_group("data")
    g.add_argument("--train", required=True, metavar="JSONL", help="training corpus, one aspect per line")
    g.add_argument("--dev", metavar="JSONL", help="dev corpus; if omitted, --dev-size examples are held out of --train")
    g.add_argument("--dev-split", metavar="FILE", help="sidecar of 0-based train indices to hold out as dev")
    g.add_argument("--dev-size", type=int, default=0,
                   help="hold out this many random training examples as dev (default 0: no dev set)")
    if test:
        g.add_argument("--test", metavar="JSONL", help="test corpus")
    g.add_argument("--embeddings", required=True, metavar="PATH", help="GloVe-format text file (optionally gzipped)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tdgat", description="Target-dependent graph attention networks for aspect sentiment.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model; writes a model JSON file and a JSONL epoch log")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_seed(p)
    p.add_argument("--model-out", required=True, metavar="PATH", help="output model file (JSON)")
    p.add_argument("--log-out", metavar="PATH", help="output epoch log (JSONL, one epoch per line)")
    p.add_argument("--log-times", action="store_true", help="include wall-clock times in the JSONL log")

    p = sub.add_parser("eval", help="print accuracy of a saved model on a labelled corpus")
    p.add_argument("--model", required=True, metavar="PATH", help="model file written by train")
    p.add_argument("--data", required=True, metavar="JSONL", help="labelled corpus")
    p.add_argument("--embeddings", required=True, metavar="PATH", help="GloVe-format text file")
    p.add_argument("--out", metavar="PATH", help="write {accuracy, examples} as JSON")

    p = sub.add_parser("predict", help="classify each JSONL record; polarity may be absent or null")
    p.add_argument("--model", required=True, metavar="PATH", help="model file written by train")
    p.add_argument("--input", required=True, metavar="JSONL", help="records with tokens, heads, aspect_span")
    p.add_argument("--embeddings", required=True, metavar="PATH", help="GloVe-format text file")
    p.add_argument("--out", metavar="PATH",
                   help="output JSONL of {index, label, probabilities} (default stdout)")

    p = sub.add_parser("ablate", help="train GAT and TDGAT under identical settings and compare")
    _add_data_flags(p, test=True)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_seed(p)
    p.add_argument("--name", default="", help="dataset name for the report header")
    p.add_argument("--out", metavar="PATH", help="write report rows as JSON")

    p = sub.add_parser("sweep-depth", help="train one model per depth and tabulate accuracy against L")
    _add_data_flags(p, test=True)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_seed(p)
    p.add_argument("--min", dest="min_layers", type=int, default=1, help="smallest depth (default 1)")
    p.add_argument("--max", dest="max_layers", type=int, default=6, help="largest depth (default 6)")
    p.add_argument("--out", metavar="PATH", help="write rows as JSON")

    p = sub.add_parser("params", help="count trainable parameters for a configuration")
    _add_model_flags(p)
    p.add_argument("--embed-dim", type=int, default=300, help="word embedding size d (default 300)")
    p.add_argument("--out", metavar="PATH", help="write the count as JSON")

    p = sub.add_parser("stats", help="polarity counts per split")
    p.add_argument("--train", metavar="JSONL", help="training corpus")
    p.add_argument("--dev", metavar="JSONL", help="dev corpus")
    p.add_argument("--dev-split", metavar="FILE", help="sidecar of train indices to count as dev")
    p.add_argument("--dev-size", type=int, default=0, help="count this many random training examples as dev")
    p.add_argument("--test", metavar="JSONL", help="test corpus")
    p.add_argument("--name", default="", help="dataset name used as row prefix")
    p.add_argument("--out", metavar="PATH", help="write counts as JSON")
    _add_seed(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model loss on a random graph")
    p.add_argument("--dim", type=int, default=12, help="hidden size D (default 12)")
    p.add_argument("--heads", type=int, default=3, help="attention heads K (default 3)")
    p.add_argument("--layers", type=int, default=2, help="GAT layers L (default 2)")
    p.add_argument("--embed-dim", type=int, default=8, help="input feature size d (default 8)")
    p.add_argument("--nodes", type=int, default=6, help="nodes in the random graph (default 6)")
    p.add_argument("--variant", choices=VARIANTS, default="TDGAT")
    p.add_argument("--lstm-mode", choices=LSTM_MODES, default="all")
    p.add_argument("--lambda", dest="lambda_l2", type=float, default=1e-4, help="L2 coefficient (default 1e-4)")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error (default 1e-4)")
    p.add_argument("--out", metavar="PATH", help="write the report as JSON")
    _add_seed(p)

    p = sub.add_parser("synth", help="write a synthetic corpus (JSONL) and matching embeddings (GloVe text)")
    p.add_argument("--size", type=int, default=40, help="number of examples (default 40)")
    p.add_argument("--dim", type=int, default=30, help="embedding size (default 30)")
    p.add_argument("--corpus-out", required=True, metavar="JSONL", help="output corpus")
    p.add_argument("--embeddings-out", required=True, metavar="PATH", help="output embeddings")
    _add_seed(p)
    return parser


# -- helpers -------------------------------------------------------------------------

def _seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def _model_config(args, embed_dim: int) -> ModelConfig:
    try:
        return ModelConfig(hidden_dim=args.dim, heads=args.heads, layers=args.layers, embed_dim=embed_dim,
                           self_loop=not args.no_self_loop, variant=args.variant, lstm_mode=args.lstm_mode)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args, seed: int) -> TrainConfig:
    try:
        return TrainConfig(batch_size=args.batch_size, lambda_l2=args.lambda_l2, dropout_rate=args.dropout,
                           adam_lr=args.adam_lr, sgd_lr=args.sgd_lr, switch_patience=args.patience,
                           switch_epoch=args.switch_epoch, max_epochs=args.epochs, seed=seed,
                           final_model=args.final)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_data(args, seed: int):
    train_set = load_corpus(args.train, "train")
    dev_set = None
    if args.dev:
        dev_set = load_corpus(args.dev, "dev")
    elif args.dev_split:
        train_set, dev_set = split_dev(train_set, indices=read_split_sidecar(args.dev_split))
    elif args.dev_size > 0:
        train_set, dev_set = split_dev(train_set, args.dev_size, seed=seed)
    test_set = load_corpus(args.test, "test") if getattr(args, "test", None) else None
    return train_set, dev_set, test_set


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _acc(x):
    return None if x is None else round(float(x), 10)


# -- subcommands -------------------------------------------------------------------

def cmd_train(args):
    seed = _seed(args)
    emb = load_glove(args.embeddings)
    train_set, dev_set, _ = _load_data(args, seed)
    params, log = train(_model_config(args, emb.dim), train_set, dev_set, emb, _train_config(args, seed),
                        verbose=args.verbose)
    save_model(params, args.model_out)
    if args.log_out:
        log.write(args.log_out, timing=args.log_times)
    print(log.table())
    print(f"model written to {args.model_out}")


def cmd_eval(args):
    params = load_model(args.model)
    emb = load_glove(args.embeddings, expected_dim=params.config.embed_dim)
    data = load_corpus(args.data, "test")
    acc = evaluate(params, data, emb)
    print(f"accuracy {acc:.4f} on {len(data)} examples")
    if args.out:
        _write_json(args.out, {"accuracy": _acc(acc), "examples": len(data)})


def _read_unlabelled(path):
    from .depgraph import build_graph

    graphs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if isinstance(record, dict):
                    record.setdefault("polarity", None)
                sentence = sentence_from_record(record)
                if sentence.aspect_span is None:
                    raise SentenceError("missing aspect_span")
                graphs.append(build_graph(sentence))
            except (json.JSONDecodeError, SentenceError, TypeError, ValueError) as exc:
                raise ParseError(str(exc), lineno) from None
    return graphs


class _Unlabelled:
    def __init__(self, graph):
        self.graph = graph

    def features(self, table):
        from .embeddings import node_features
        return node_features(self.graph, table)


def cmd_predict(args):
    params = load_model(args.model)
    emb = load_glove(args.embeddings, expected_dim=params.config.embed_dim)
    items = [_Unlabelled(g) for g in _read_unlabelled(args.input)]
    probs = predict_proba(params, items, emb)
    lines = []
    for i, row in enumerate(probs):
        label = POLARITIES[int(np.argmax(row))]
        lines.append(json.dumps({"index": i, "label": label,
                                 "probabilities": {p: float(x) for p, x in zip(POLARITIES, row)}}))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_ablate(args):
    seed = _seed(args)
    emb = load_glove(args.embeddings)
    train_set, dev_set, test_set = _load_data(args, seed)
    rows, _ = ablate(_model_config(args, emb.dim), train_set, dev_set, test_set, emb, _train_config(args, seed))
    print(format_ablation(rows, args.name))
    if args.out:
        _write_json(args.out, [{"variant": r.variant, "layers": r.layers, "dev_accuracy": _acc(r.dev_accuracy),
                                "test_accuracy": _acc(r.test_accuracy), "params": r.params} for r in rows])


def cmd_sweep_depth(args):
    if not 1 <= args.min_layers <= args.max_layers:
        raise UsageError("need 1 <= --min <= --max")
    seed = _seed(args)
    emb = load_glove(args.embeddings)
    train_set, dev_set, test_set = _load_data(args, seed)
    tc = _train_config(args, seed)
    base = _model_config(args, emb.dim)
    rows = []
    for layers in range(args.min_layers, args.max_layers + 1):
        cfg = base.replace(layers=layers)
        params, log = train(cfg, train_set, dev_set, emb, tc, verbose=args.verbose)
        rows.append({
            "layers": layers,
            "train_accuracy": _acc(evaluate(params, train_set, emb)),
            "dev_accuracy": _acc(evaluate(params, dev_set, emb)) if dev_set is not None and len(dev_set) else None,
            "test_accuracy": _acc(evaluate(params, test_set, emb)) if test_set is not None and len(test_set) else None,
            "params": param_count(cfg),
        })
    print(format_sweep(rows))
    if args.out:
        _write_json(args.out, rows)


def format_sweep(rows) -> str:
    def pct(x):
        return f"{100 * x:.1f}" if x is not None else "-"
    lines = [f"{'layers':>6} {'train':>7} {'dev':>7} {'test':>7} {'params':>10}"]
    for r in rows:
        lines.append(f"{r['layers']:>6} {pct(r['train_accuracy']):>7} {pct(r['dev_accuracy']):>7} "
                     f"{pct(r['test_accuracy']):>7} {r['params']:>10}")
    return "\n".join(lines)


def cmd_params(args):
    cfg = _model_config(args, args.embed_dim)
    n = param_count(cfg)
    print(f"{cfg.variant} D={cfg.hidden_dim} K={cfg.heads} L={cfg.layers} d={cfg.embed_dim}: {n} parameters")
    if args.out:
        _write_json(args.out, {"variant": cfg.variant, "dim": cfg.hidden_dim, "heads": cfg.heads,
                               "layers": cfg.layers, "embed_dim": cfg.embed_dim, "params": n})


def cmd_stats(args):
    if not (args.train or args.dev or args.test):
        raise UsageError("stats needs at least one of --train, --dev, --test")
    seed = _seed(args)
    corpus = Corpus()
    if args.train:
        train_set = load_corpus(args.train, "train")
        if args.dev_split:
            train_set, dev_set = split_dev(train_set, indices=read_split_sidecar(args.dev_split))
            train_set = train_set + dev_set
        elif args.dev_size > 0:
            train_set, dev_set = split_dev(train_set, args.dev_size, seed=seed)
            train_set = train_set + dev_set
        corpus = corpus + train_set
    if args.dev:
        corpus = corpus + load_corpus(args.dev, "dev")
    if args.test:
        corpus = corpus + load_corpus(args.test, "test")
    stats = dataset_stats(corpus)
    print(format_stats(stats, args.name))
    if args.out:
        _write_json(args.out, stats)


def cmd_gradcheck(args):
    try:
        cfg = ModelConfig(hidden_dim=args.dim, heads=args.heads, layers=args.layers, embed_dim=args.embed_dim,
                          variant=args.variant, lstm_mode=args.lstm_mode)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if args.nodes < 1:
        raise UsageError("--nodes must be >= 1")
    report = model_gradcheck(cfg, seed=_seed(args), nodes=args.nodes, lam=args.lambda_l2, tol=args.tol)
    print(report.summary())
    if args.out:
        _write_json(args.out, {"passed": report.passed, "max_rel_error": report.max_rel_error,
                               "checked": report.checked, "tol": report.tol,
                               "worst": list(report.worst) if report.worst else None})
    if not report.passed:
        raise NumericError(f"gradient check failed: {report.max_rel_error:.3e} >= {report.tol:g}")


def cmd_synth(args):
    seed = _seed(args)
    if args.dim < 1:
        raise UsageError("--dim must be >= 1")
    try:
        corpus = synth_corpus(args.size, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with open(args.corpus_out, "w", encoding="utf-8") as fh:
        dump_jsonl([e.sentence for e in corpus], fh)
    save_glove(synth_embeddings(args.dim, seed=seed), args.embeddings_out)
    print(f"wrote {len(corpus)} examples to {args.corpus_out} and {args.dim}-d embeddings to {args.embeddings_out}")


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "ablate": cmd_ablate,
    "sweep-depth": cmd_sweep_depth, "params": cmd_params, "stats": cmd_stats, "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.command is None:
            raise UsageError("tdgat: missing subcommand (try --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, OSError, EmbeddingError, ModelFormatError, SentenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # data-dependent checks (dim mismatch, split too small, unlabelled examples)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
