"""``besent`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 I/O or
transport error.  Every JSON output carries the run's config digest and seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings

import numpy as np

from besent import corpus
from besent.errors import BESentError, ConfigurationError, DataError, TransportError
from besent.evaluation import PRESENTATION_LABELS, emit_report
from besent.features import TokenSequence
from besent.hierarchy import MODES, bundle_from_dict, label_name, predict_bundle
from besent.models.forest import export_tree
from besent.models.lstm import LstmHyper, gradient_check, init_lstm
from besent.pipeline import (
    RunConfig, bundle, dumps_canonical, evaluate_run, require_labeled, search_epochs, train_model,
)

log = logging.getLogger("besent")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the documented code is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _run_flags() -> argparse.ArgumentParser:
    """Flags that override RunConfig fields; default None means 'not given'."""
    p = _Parser(add_help=False, allow_abbrev=False)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="JSON file with RunConfig fields (flags win)")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int)
    g.add_argument("--data")
    g.add_argument("--stopwords")
    g.add_argument("--embeddings")
    g.add_argument("--mode", choices=MODES)
    g.add_argument("--stage1", choices=("forest", "lstm"))
    g.add_argument("--stage2", choices=("forest", "lstm"))
    for name in ("min_df", "max_size", "seq_len", "embed_dim", "k_neighbors", "n_trees",
                 "max_depth", "min_samples_leaf", "mtry", "lstm_layers", "hidden", "epochs",
                 "epochs_sentiment", "epochs_bloom", "batch_size", "k", "min_token_len"):
        g.add_argument(_flag(name), dest=name, type=int)
    for name in ("learning_rate", "clip_norm", "train_ratio", "alpha"):
        g.add_argument(_flag(name), dest=name, type=float)
    g.add_argument("--protocol", choices=("cv", "holdout"))
    for name in ("resample", "bootstrap", "lowercase", "strip_urls", "strip_punct",
                 "use_default_stopwords", "compare"):
        g.add_argument(_flag(name), dest=name, action=argparse.BooleanOptionalAction, default=None)
    return p


_RUN_FIELDS = set(RunConfig.__dataclass_fields__)


def build_run_config(args: argparse.Namespace) -> RunConfig:
    rc = RunConfig()
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            try:
                rc = RunConfig.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise DataError(f"config is not valid JSON: {exc}") from None
    overrides = {k: v for k, v in vars(args).items() if k in _RUN_FIELDS}
    return rc.merged(overrides)


def _write_json(obj, path) -> None:
    text = dumps_canonical(obj)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _load_labeled(rc: RunConfig):
    if not rc.data:
        raise UsageError("--data is required")
    return require_labeled(corpus.load_dataset(rc.data))


# -- subcommands -----------------------------------------------------------

def cmd_ingest(args, rc: RunConfig) -> int:
    items = corpus.load_dataset(args.input)
    unresolved: list = []
    if args.annotations:
        aset = corpus.load_annotations(args.annotations)
        aset.check_against(items)
        items, unresolved = corpus.merge_gold_labels(items, aset, args.tie_policy)
    corpus.save_dataset(items, args.out)
    _write_json({"n_written": len(items), "unresolved": unresolved, "out": args.out,
                 **rc.run_metadata()}, None)
    return EXIT_OK


def cmd_fetch(args, rc: RunConfig) -> int:
    chats = corpus.fetch_youtube_comments(args.video_id, source=args.source, fixture_path=args.fixture)
    corpus.save_dataset(chats, args.out)
    _write_json({"n_chats": len(chats), "out": args.out, **rc.run_metadata()}, None)
    return EXIT_OK


def cmd_stats(args, rc: RunConfig) -> int:
    if not rc.data:
        raise UsageError("--data is required")
    stats = corpus.dataset_stats(corpus.load_dataset(rc.data))
    _write_json({**stats.to_dict(), **rc.run_metadata()}, args.out)
    return EXIT_OK


def cmd_agreement(args, rc: RunConfig) -> int:
    aset = corpus.load_annotations(args.annotations)
    facets = ("sentiment", "bloom", "pair") if args.facet == "all" else (args.facet,)
    out = {"fleiss_kappa": {f: corpus.compute_fleiss_kappa(aset, f) for f in facets},
           "n_annotators": len(aset.annotator_ids), **rc.run_metadata()}
    _write_json(out, args.out)
    return EXIT_OK


def _tune_epochs(data, rc: RunConfig, args) -> RunConfig:
    kinds = {rc.stage1} if rc.mode != "two_step" else {rc.stage1, rc.stage2}
    if "lstm" not in kinds or not args.search_epochs:
        return rc
    lo, hi = args.search_epochs
    found = {}
    tasks = {"sentiment_only": ["sentiment"], "epistemic_only": ["bloom"],
             "multilabel": ["joint"], "two_step": ["sentiment", "bloom"]}[rc.mode]
    for task in tasks:
        best, trials = search_epochs(data, task, rc, (lo, hi), args.trials)
        log.info("epoch search %s: %s -> %d", task, trials, best)
        found[task] = best
    return rc.merged({"epochs_sentiment": found.get("sentiment"),
                      "epochs_bloom": found.get("bloom", found.get("joint"))})


def cmd_train(args, rc: RunConfig) -> int:
    data = _load_labeled(rc)
    rc = _tune_epochs(data, rc, args)
    model, _ = train_model(data, rc)
    doc = bundle(model, rc)
    _write_json(doc, args.model_out)
    _write_json({"model": args.model_out, "mode": rc.mode, **rc.run_metadata()}, None)
    return EXIT_OK


def cmd_evaluate(args, rc: RunConfig) -> int:
    data = _load_labeled(rc)
    report = evaluate_run(data, rc)
    if args.report:
        emit_report(report, args.report, args.format, args.presentation)
    else:
        sys.stdout.write(report.to_json() + "\n")
    return EXIT_OK


def _present(value):
    if isinstance(value, dict):
        return {_present(k): _present(v) for k, v in value.items()}
    if isinstance(value, str):
        return PRESENTATION_LABELS.get(value, value)
    return value


def _load_bundle(path):
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"model file is not valid JSON: {exc}") from None
    obj, mode = bundle_from_dict(d)
    return obj, mode, d.get("run", {})


def cmd_predict(args, rc: RunConfig) -> int:
    obj, mode, run = _load_bundle(args.model)
    texts = list(args.text or [])
    if args.input:
        texts += [c.text for c in corpus.load_dataset(args.input)]
    if not texts:
        raise UsageError("give --text or --input")
    space = obj.space
    results = []
    for text in texts:
        out = predict_bundle(obj, mode, space.tokenize(text))
        if args.labels == "id":
            out = _present(out)
        results.append({"text": text, **out})
    meta = {"mode": mode, "labels": args.labels, "config_digest": run.get("config_digest"),
            "seed": run.get("seed")}
    payload = {**results[0], **meta} if len(results) == 1 else {"predictions": results, **meta}
    _write_json(payload, None)
    return EXIT_OK


def cmd_export_tree(args, rc: RunConfig) -> int:
    obj, mode, run = _load_bundle(args.model)
    if mode == "two_step":
        if args.stage == "sentiment":
            handle = obj.sentiment_stage
        else:
            branch = args.branch or "neutral"
            handle = obj.epistemic_stages[corpus.Sentiment.parse(branch)]
    else:
        handle = obj
    if handle.kind != "forest":
        raise DataError(f"selected stage is a {handle.kind} model; only forests export trees")
    trees = handle.model.trees
    if not 0 <= args.tree < len(trees):
        raise DataError(f"tree index {args.tree} out of range (0..{len(trees) - 1})")
    lines = export_tree(
        trees[args.tree], handle.space.vocab, args.depth, handle.model.vocab_fingerprint,
        lambda c: label_name(handle.task, c))
    sys.stdout.write(f"# config_digest={run.get('config_digest')} seed={run.get('seed')}\n")
    sys.stdout.write("level\tbranch\tterm\tthreshold\tgini\n")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gradcheck(args, rc: RunConfig) -> int:
    hyper = LstmHyper(layers=args.layers, hidden=args.hidden, embed_dim=args.embed_dim, seed=rc.seed)
    vocab_size = args.vocab_size
    model = init_lstm(vocab_size, list(range(args.classes)), hyper)
    rng = np.random.default_rng([rc.seed, 2])
    # perturb biases/head away from their structured init so every path carries gradient
    for _, p in model.parameters():
        p += rng.normal(0.0, 0.1, size=p.shape)
    model.embedding[0] = 0.0
    ids = rng.integers(2, vocab_size, size=args.seq_len).tolist()
    seq = TokenSequence(tuple(ids), args.seq_len)
    label = int(rng.integers(args.classes))
    err = gradient_check(model, seq, label, h=args.h, subset=args.subset, seed=rc.seed)
    ok = err < args.tolerance
    _write_json({"max_relative_error": err, "tolerance": args.tolerance, "passed": ok,
                 "dtype": str(np.dtype(np.longdouble)), **rc.run_metadata()}, None)
    return EXIT_OK if ok else EXIT_DATA


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _run_flags()
    parser = _Parser(prog="besent", allow_abbrev=False, description="Two-step sentiment and Bloom-level chat classifier.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="validate chats, optionally merge annotations")
    p.add_argument("--input", required=True)
    p.add_argument("--annotations")
    p.add_argument("--tie-policy", choices=("drop", "first_annotator"), default="drop")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fetch", parents=[common], help="collect YouTube comment threads")
    p.add_argument("--video-id", action="append", required=True)
    p.add_argument("--source", choices=("fixture", "live"), default="fixture")
    p.add_argument("--fixture")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("stats", parents=[common], help="dataset statistics")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("agreement", parents=[common], help="Fleiss' kappa over an annotation file")
    p.add_argument("--annotations", required=True)
    p.add_argument("--facet", choices=("sentiment", "bloom", "pair", "all"), default="all")
    p.add_argument("--out")
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("train", parents=[common], help="train a model bundle")
    p.add_argument("--model-out", required=True)
    p.add_argument("--search-epochs", nargs=2, type=int, metavar=("LO", "HI"),
                   help="random-search LSTM epochs in [LO, HI] on a hold-out split")
    p.add_argument("--trials", type=int, default=3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="cross-validate or hold-out evaluate")
    p.add_argument("--report")
    p.add_argument("--format", choices=("json", "markdown"), default="json")
    p.add_argument("--presentation", action="store_true", help="short Indonesian labels in markdown")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="label chats with a trained bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--text", action="append")
    p.add_argument("--input")
    p.add_argument("--labels", choices=("en", "id"), default="en")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-tree", parents=[common], help="print one forest tree's branches")
    p.add_argument("--model", required=True)
    p.add_argument("--stage", choices=("sentiment", "bloom"), default="sentiment")
    p.add_argument("--branch", help="sentiment branch for two_step bloom stages")
    p.add_argument("--tree", type=int, default=0)
    p.add_argument("--depth", type=int, default=5, help="deepest level to list")
    p.set_defaults(func=cmd_export_tree)

    p = sub.add_parser("gradcheck", help="BPTT vs central differences")
    p.add_argument("--seed", type=int)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=3)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--vocab-size", type=int, default=8)
    p.add_argument("--subset", type=int, default=50)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            rc = build_run_config(args)
            return args.func(args, rc)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"besent: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TransportError as exc:
        print(f"besent: transport error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, ConfigurationError, BESentError, ValueError, KeyError) as exc:
        print(f"besent: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"besent: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(dispatch())
