"""``dxgate`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. The requested artifact
goes to stdout (or ``--out``); logging goes to stderr.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import math
import sys
from pathlib import Path

from .ann import AnnParams, ann_nearest, build_ann_index
from .embedding_store import load_binary, load_glove_text, neighbors_of_token, save_binary
from .mechanism import NEAREST_TOKEN, RANK_SAMPLED, VARIANTS, SanitizationConfig, sanitize_text
from .quality import compute_features_batch, make_provider, realized_target
from .regressor import (
    FEATURE_SETS,
    Dataset,
    EvalReport,
    Hyperparams,
    evaluate,
    load_model,
    predict,
    read_feature_csv,
    save_model,
    train,
    write_feature_csv,
)
from .replication import (
    corpus_sweep,
    curves_to_csv,
    load_corpus,
    reports_to_csv,
    sample_words,
    self_return_curve,
    word_frequency_experiment,
)
from .tokenize import detokenize, tokenize_words

log = logging.getLogger("dxgate")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- argument types ----------------------------------------------------------

def positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not v > 0 or math.isnan(v):
        raise argparse.ArgumentTypeError(f"epsilon must be positive, got {text}")
    return v


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def float_list(text: str) -> list[float]:
    try:
        return [positive_float(t) for t in text.split(",") if t.strip()]
    except argparse.ArgumentTypeError:
        raise
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad epsilon list {text!r}")


def word_list(text: str) -> list[str]:
    words = [w.strip() for w in text.split(",") if w.strip()]
    if not words:
        raise argparse.ArgumentTypeError("empty word list")
    return words


def backend_name(text: str) -> str:
    aliases = {"exact": "exact", "enn": "exact", "ann": "approximate", "approximate": "approximate"}
    if text not in aliases:
        raise argparse.ArgumentTypeError(f"backend must be exact or ann, got {text!r}")
    return aliases[text]


# -- helpers -----------------------------------------------------------------

def _load_embeddings(path: str):
    if path.endswith(".txt"):
        return load_glove_text(path)
    return load_binary(path)


def _emit(text: str, out: str | None) -> None:
    if out and out != "-":
        Path(out).write_text(text, encoding="utf-8")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def _ann_params(args) -> AnnParams:
    return AnnParams(tree_count=args.ann_trees, build_seed=args.ann_seed)


def _read_jsonl(path: str) -> list[dict]:
    fh = sys.stdin if path == "-" else open(path, encoding="utf-8")
    try:
        out = []
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        return out
    finally:
        if fh is not sys.stdin:
            fh.close()


def _provider(args):
    opts = {}
    if args.provider_config:
        opts = json.loads(Path(args.provider_config).read_text(encoding="utf-8"))
    return make_provider(args.provider, **opts)


def _load_dataset(path: str) -> Dataset:
    if path.endswith(".jsonl"):
        from .gateway.store import read_training_log, records_to_dataset
        return records_to_dataset(read_training_log(path))
    return read_feature_csv(path)


# -- subcommands ---------------------------------------------------------------

def cmd_convert(args) -> int:
    model = load_glove_text(args.inp, name=args.name, limit=args.limit)
    save_binary(model, args.out)
    log.info("converted %d tokens x %d dims", len(model), model.dim)
    return EXIT_OK


def cmd_nn(args) -> int:
    model = _load_embeddings(args.model)
    tid = model.lookup(args.token)
    if args.backend == "exact":
        nl = neighbors_of_token(model, tid, args.k, threads=args.threads)
    else:
        index = build_ann_index(model, _ann_params(args))
        nl = ann_nearest(index, model.matrix[tid].astype("float64"), args.k)
    rows = [{"rank": r, "token": model.token(i), "id": i, "distance": d}
            for r, (i, d) in enumerate(nl.entries)]
    _emit(_dumps({"token": args.token, "backend": args.backend, "neighbors": rows}), args.out)
    return EXIT_OK


def cmd_sanitize(args) -> int:
    model = _load_embeddings(args.model)
    config = SanitizationConfig(args.epsilon, args.variant, args.backend, args.oov_policy, args.seed,
                                ann_params=_ann_params(args) if args.backend == "approximate" else None)
    if args.inp in (None, "-"):
        raw = sys.stdin.read()
    else:
        raw = Path(args.inp).read_text(encoding="utf-8")
    if args.token_ids:
        ids = [int(t) for t in raw.replace(",", " ").split()]
        st = sanitize_text(model, ids, config, threads=args.threads)
        result = {"sanitized_ids": [int(x) for x in st.sanitized_token_ids]}
    else:
        ids, tmap = tokenize_words(raw, model, not args.keep_case, args.oov_policy)
        st = sanitize_text(model, ids, config, threads=args.threads)
        result = {"sanitized_text": detokenize(st.sanitized_token_ids, tmap, model)}
    result.update({
        "epsilon": args.epsilon,
        "variant": args.variant,
        "backend": args.backend,
        "seed": args.seed,
        "tokens": len(st),
        "changed_pct": st.percent_changed,
        "oov_flags": [bool(x) for x in st.oov_flags],
    })
    _emit(_dumps(result), args.out)
    return EXIT_OK


def cmd_replicate(args) -> int:
    model = _load_embeddings(args.model)
    ann = _ann_params(args) if args.backend == "approximate" else None
    if args.kind == "words":
        if not args.words:
            raise UsageError("replicate words needs --words")
        reports = [word_frequency_experiment(model, w, eps, args.trials, args.backend, args.variant,
                                             args.seed, ann_params=ann, threads=args.threads)
                   for w in args.words for eps in args.epsilons]
        if args.format == "json":
            text = _dumps([r.as_dict() for r in reports])
        else:
            text = reports_to_csv(reports, top=args.top)
    else:
        words = args.words or sample_words(model, args.sample_size, args.seed)
        curve = self_return_curve(model, words, args.epsilons, args.trials, args.backend, args.seed,
                                  args.variant, ann_params=ann, threads=args.threads)
        text = _dumps(curve.as_dict()) if args.format == "json" else curves_to_csv([curve])
    _emit(text, args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = _load_embeddings(args.model)
    corpus = load_corpus(args.corpus, args.max_tokens, args.sample_size, args.seed)
    config = SanitizationConfig(min(args.epsilons), args.variant, args.backend, args.oov_policy, args.seed)
    curves = corpus_sweep(model, corpus, args.epsilons, config, _provider(args), seed=args.seed,
                          threads=args.threads)
    ordered = [curves["similarity"], curves["unchanged_pct"]]
    if args.format == "json":
        text = _dumps({k: c.as_dict() for k, c in curves.items()})
    else:
        text = curves_to_csv(ordered)
    _emit(text, args.out)
    return EXIT_OK if not ordered[0].partial else EXIT_RUNTIME


def cmd_features(args) -> int:
    records = _read_jsonl(args.inp)
    model = _load_embeddings(args.model) if args.model else None
    provider = _provider(args)
    rows, ids, llm = [], [], []
    for n, rec in enumerate(records):
        rid = str(rec.get("id", n))
        eps = float(rec.get("epsilon", args.epsilon) or 0)
        if not eps > 0:
            raise UsageError(f"record {rid}: no positive epsilon (set --epsilon)")
        p_eps = rec.get("sanitized_prompt")
        if p_eps is None:
            if model is None:
                raise UsageError(f"record {rid} has no sanitized_prompt; pass --model to sanitize it")
            tids, tmap = tokenize_words(rec["prompt"], model, oov_policy=args.oov_policy)
            cfg = SanitizationConfig(eps, args.variant, "exact", args.oov_policy, args.seed)
            st = sanitize_text(model, tids, cfg, stream=(n,), threads=args.threads)
            p_eps = detokenize(st.sanitized_token_ids, tmap, model)
        try:
            rows.append((rec["prompt"], p_eps, rec["slm_result"], rec["slm_result_sanitized"], eps))
        except KeyError as exc:
            raise ValueError(f"record {rid}: missing field {exc}") from exc
        ids.append(rid)
        llm.append(rec.get("llm_result"))
    vectors = compute_features_batch(rows, provider)
    for fv, row, r_llm in zip(vectors, rows, llm):
        if r_llm:
            fv.target_e, fv.target_kind = realized_target(row[0], r_llm, provider), "realized"
    buf = io.StringIO()
    write_feature_csv(list(zip(ids, vectors)), buf)
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_dataset(args.features)
    hp = Hyperparams(max_iter=args.iterations, learning_rate=args.learning_rate, max_depth=args.max_depth,
                     min_samples_leaf=args.min_samples_leaf)
    model, report = train(data, hp, split_seed=args.seed, feature_set=args.feature_set)
    save_model(model, args.out)
    doc = report.as_dict()
    doc.update({"feature_set": args.feature_set, "feature_names": list(model.feature_names),
                "seed": args.seed, "rows": len(data)})
    if args.report:
        _emit(_dumps(doc), args.report)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    data = _load_dataset(args.features).select(model.feature_names)
    report = evaluate(predict(model, data.features), data.targets)
    doc = report.as_dict()
    if args.baseline:
        base = EvalReport.from_dict(json.loads(Path(args.baseline).read_text(encoding="utf-8")))
        doc["baseline"] = base.as_dict()
        doc["delta"] = {
            "r2": None if report.r2 is None or base.r2 is None else report.r2 - base.r2,
            "rmse": report.rmse - base.rmse,
            "wasted_pct": report.wasted_pct - base.wasted_pct,
            "failed_pct": report.failed_pct - base.failed_pct,
        }
    _emit(_dumps(doc), args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .gateway.app import create_app
    from .gateway.service import Gateway, GatewayConfig

    gateway = Gateway.from_config(GatewayConfig.from_file(args.config))
    uvicorn.run(create_app(gateway), host=args.host, port=args.port, log_level=args.log_level.lower())
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_ann(p):
    p.add_argument("--ann-trees", type=positive_int, default=50, help="trees in the approximate index")
    p.add_argument("--ann-seed", type=int, default=0, help="seed for building the approximate index")


def _add_provider(p):
    p.add_argument("--provider", choices=("mock", "http", "file"), default="mock",
                   help="sentence-embedding provider for similarity features")
    p.add_argument("--provider-config", metavar="JSON",
                   help="JSON file of provider options (url, model, api_key_env, ...)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dxgate", description="Privacy-preserving prompt sanitization and LLM utility gating.",
                     epilog="exit codes: 0 success, 1 usage error, 2 runtime error")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    parser.add_argument("--threads", type=positive_int, default=None,
                        help="cap on worker threads for embedding search (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="convert GloVe text vectors to the binary format")
    p.add_argument("--in", dest="inp", required=True, help="GloVe text file")
    p.add_argument("--out", required=True, help="binary output path")
    p.add_argument("--name", help="model name stored in the header (default: file stem)")
    p.add_argument("--limit", type=positive_int, help="read only the first N lines")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("nn", help="nearest neighbors of a vocabulary token")
    p.add_argument("--model", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("-k", type=positive_int, default=10)
    p.add_argument("--backend", type=backend_name, default="exact", help="exact or ann")
    p.add_argument("--out")
    _add_ann(p)
    p.set_defaults(func=cmd_nn)

    p = sub.add_parser("sanitize", help="sanitize text (or token ids) with the dx-private mechanism")
    p.add_argument("--model", required=True)
    p.add_argument("--epsilon", type=positive_float, required=True)
    p.add_argument("--variant", choices=VARIANTS, default=RANK_SAMPLED)
    p.add_argument("--backend", type=backend_name, default="exact", help="exact or ann")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--in", dest="inp", help="input file (default: stdin)")
    p.add_argument("--token-ids", action="store_true", help="input is whitespace-separated token ids")
    p.add_argument("--oov-policy", choices=("error", "passthrough_flagged"), default="error")
    p.add_argument("--keep-case", action="store_true", help="do not lowercase words before lookup")
    p.add_argument("--out")
    _add_ann(p)
    p.set_defaults(func=cmd_sanitize)

    p = sub.add_parser("replicate", help="self-return experiments on single words")
    p.add_argument("kind", choices=("words", "curve"))
    p.add_argument("--model", required=True)
    p.add_argument("--words", type=word_list, help="comma-separated words (curve: default is a sample)")
    p.add_argument("--sample-size", type=positive_int, default=500, help="curve: words to sample")
    p.add_argument("--epsilons", type=float_list, required=True)
    p.add_argument("--trials", type=positive_int, default=1000)
    p.add_argument("--backend", type=backend_name, default="exact", help="exact or ann")
    p.add_argument("--variant", choices=VARIANTS, default=NEAREST_TOKEN)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--top", type=positive_int, default=3, help="words: outputs listed per row")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    _add_ann(p)
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("sweep", help="corpus similarity and unchanged-token curves over epsilon")
    p.add_argument("--corpus", required=True, help='JSONL of {"id", "text"}')
    p.add_argument("--model", required=True)
    p.add_argument("--epsilons", type=float_list, required=True)
    p.add_argument("--variant", choices=VARIANTS, default=RANK_SAMPLED)
    p.add_argument("--backend", type=backend_name, default="exact", help="exact or ann")
    p.add_argument("--oov-policy", choices=("error", "passthrough_flagged"), default="passthrough_flagged")
    p.add_argument("--max-tokens", type=positive_int, default=1024, help="drop longer documents")
    p.add_argument("--sample-size", type=positive_int)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    _add_provider(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("features", help="similarity features (and target) from task records")
    p.add_argument("--in", dest="inp", required=True,
                   help="JSONL with prompt, slm_result, slm_result_sanitized, "
                        "optional sanitized_prompt, llm_result, epsilon, id")
    p.add_argument("--model", help="embedding model, needed when records lack sanitized_prompt")
    p.add_argument("--epsilon", type=positive_float, help="epsilon for records without one")
    p.add_argument("--variant", choices=VARIANTS, default=RANK_SAMPLED)
    p.add_argument("--oov-policy", choices=("error", "passthrough_flagged"), default="passthrough_flagged")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_provider(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="fit the utility regressor")
    p.add_argument("--features", required=True, help="feature CSV or training-log JSONL")
    p.add_argument("--feature-set", choices=sorted(FEATURE_SETS), default="ABCD")
    p.add_argument("--seed", type=int, required=True, help="train/test split seed")
    p.add_argument("--out", required=True, help="model output path")
    p.add_argument("--report", help="held-out evaluation JSON ('-' for stdout)")
    p.add_argument("--iterations", type=positive_int, default=Hyperparams.max_iter)
    p.add_argument("--learning-rate", type=positive_float, default=Hyperparams.learning_rate)
    p.add_argument("--max-depth", type=positive_int, default=Hyperparams.max_depth)
    p.add_argument("--min-samples-leaf", type=positive_int, default=Hyperparams.min_samples_leaf)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained regressor on labeled features")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="feature CSV or training-log JSONL")
    p.add_argument("--baseline", help="earlier report JSON to compare against")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the gating middleware over HTTP")
    p.add_argument("--config", required=True, help="gateway JSON config")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dxgate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("traceback", exc_info=True)
        print(f"dxgate {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
