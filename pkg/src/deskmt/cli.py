"""Command-line entry points for the translation workbench.

Subcommands cover the individual pipeline pieces (learn-bpe, apply-bpe,
build-vocab, train-lexicon, train, translate, evaluate, analyze) and the
full declarative experiment driver (run, resume). Exit codes: 0 success,
2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__, bpe, corpus, decode, evaluation, lexicon, model, pipeline, train

EXIT_CONFIG = 2
EXIT_STAGE = 3


def _add_parallel_files(parser, what: str = "training") -> None:
    parser.add_argument("--source", required=True, help=f"{what} source file, one sentence per line")
    parser.add_argument("--target", required=True, help=f"{what} target file, aligned line by line")


def cmd_learn_bpe(args) -> int:
    pairs = corpus.load_parallel(args.source, args.target, args.max_len)
    merges = bpe.learn_merges(bpe.joint_word_frequencies(pairs), args.operations)
    merges.save(args.output)
    if args.piece_vocab:
        bpe.build_piece_vocab(pairs, merges).save(args.piece_vocab)
    print(f"learned {len(merges)} merges from {len(pairs)} sentence pairs")
    return 0


def cmd_apply_bpe(args) -> int:
    merges = bpe.MergeTable.load(args.merges)
    piece_vocab = bpe.PieceVocab.load(args.piece_vocab) if args.piece_vocab else None
    map_singletons = args.map_singletons and piece_vocab is not None
    cache: dict = {}
    with open(args.input, encoding="utf-8") as inp, open(args.output, "w", encoding="utf-8") as out:
        for line in inp:
            pieces = bpe.encode_tokens(line.split(), merges, piece_vocab, map_singletons, cache)
            out.write(" ".join(pieces) + "\n")
    return 0


def cmd_build_vocab(args) -> int:
    pairs = corpus.load_parallel(args.source, args.target, args.max_len)
    vocab = corpus.build_vocab(pairs, args.side, args.limit)
    vocab.save(args.output)
    print(f"{args.side} vocabulary: {len(vocab)} entries (reserved included)")
    return 0


def cmd_train_lexicon(args) -> int:
    pairs = corpus.load_parallel(args.source, args.target, args.max_len)
    table = lexicon.learn_model1(pairs, args.iterations)
    table.save(args.table)
    dictionary = lexicon.extract_dictionary(table, args.min_prob)
    dictionary.save(args.dictionary, table)
    print(
        f"model 1: {args.iterations} iterations, "
        f"final log-likelihood {table.log_likelihoods[-1]:.2f}, "
        f"{len(dictionary.best)} dictionary entries"
    )
    return 0


def cmd_train(args) -> int:
    src_vocab = corpus.Vocabulary.load(args.src_vocab)
    tgt_vocab = corpus.Vocabulary.load(args.tgt_vocab)
    train_pairs = _encoded(args.source, args.target, src_vocab, tgt_vocab, args.max_len)
    dev_pairs = _encoded(args.dev_source, args.dev_target, src_vocab, tgt_vocab, args.max_len)
    config = model.ModelConfig(
        src_vocab_size=len(src_vocab),
        tgt_vocab_size=len(tgt_vocab),
        embed_size=args.embed,
        hidden_size=args.hidden,
        attention_size=args.attention,
        dropout=args.dropout,
        seed=args.seed,
    )
    anneal = train.AnnealConfig(
        max_runs=args.max_runs,
        patience=args.patience,
        eval_intervals=tuple(args.eval_interval),
    )
    best, log = train.train_run(
        train_pairs,
        dev_pairs,
        config,
        args.optimizer,
        anneal,
        seed=args.seed,
        rate=args.rate,
        batch_budget=args.batch_budget,
    )
    model.save_checkpoint(args.checkpoint, best, extra={"train_seed": str(args.seed)})
    if args.log:
        log.save(args.log)
    best_ppl = min(e.dev_ppl for e in log.entries) if log.entries else float("inf")
    print(f"best dev perplexity {best_ppl:.4f} after {len(log.entries)} evaluations")
    return 0


def _encoded(src_path, tgt_path, src_vocab, tgt_vocab, max_len):
    pairs = corpus.load_parallel(src_path, tgt_path, max_len)
    return [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in pairs.pairs]


def cmd_translate(args) -> int:
    src_vocab = corpus.Vocabulary.load(args.src_vocab)
    tgt_vocab = corpus.Vocabulary.load(args.tgt_vocab)
    members = []
    for path in args.checkpoint:
        params, meta = model.load_checkpoint(path)
        members.append(decode.EnsembleMember(params, meta.get("tgt_vocab_hash", ""), path))
    artifacts = None
    if args.merges:
        piece_vocab = bpe.PieceVocab.load(args.piece_vocab) if args.piece_vocab else bpe.PieceVocab({})
        artifacts = decode.BpeArtifacts(
            bpe.MergeTable.load(args.merges), piece_vocab, args.map_singletons
        )
    dictionary = lexicon.Dictionary.load(args.dictionary) if args.dictionary else None
    decode.translate_corpus(
        decode.EnsembleSpec(members),
        args.input,
        args.output,
        src_vocab,
        tgt_vocab,
        bpe=artifacts,
        dictionary=dictionary,
        beam_size=args.beam,
        max_len=args.max_len,
        scores_path=args.scores,
    )
    return 0


def cmd_evaluate(args) -> int:
    with open(args.hypotheses, encoding="utf-8") as fh:
        hyp = [line.rstrip("\n") for line in fh]
    with open(args.references, encoding="utf-8") as fh:
        ref = [line.rstrip("\n") for line in fh]
    score = evaluation.bleu(hyp, ref)
    print(score)
    return 0


def cmd_analyze(args) -> int:
    with open(args.hypotheses, encoding="utf-8") as fh:
        hyp = [line.rstrip("\n") for line in fh]
    with open(args.references, encoding="utf-8") as fh:
        ref = [line.rstrip("\n") for line in fh]
    with open(args.source, encoding="utf-8") as fh:
        src = [line.rstrip("\n") for line in fh]
    vocab = corpus.Vocabulary.load(args.vocab)
    merges = bpe.MergeTable.load(args.merges)
    dictionary = lexicon.Dictionary.load(args.dictionary)
    report = evaluation.classwise_f1(hyp, ref, src, vocab, merges, dictionary)
    curve, covered = evaluation.vocab_coverage([line.split() for line in src], len(vocab))
    sections = {"class_f1": report, "coverage": curve[: args.curve_points]}
    sys.stdout.write(evaluation.render_report_tsv(sections))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(evaluation.report_to_json(sections))
    return 0


def cmd_run(args) -> int:
    config = pipeline.RunConfig.load(args.config)
    exp_dir = pipeline.resolve_experiment_dir(args.dir)
    out = pipeline.run_experiment(config, exp_dir, jobs=args.jobs)
    print(f"experiment complete: {out}")
    return 0


def cmd_resume(args) -> int:
    exp_dir = pipeline.resolve_experiment_dir(args.dir)
    out = pipeline.resume(exp_dir, jobs=args.jobs)
    print(f"experiment complete: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskmt",
        description="Desk-scale neural machine translation workbench",
    )
    parser.add_argument("--version", action="version", version=f"deskmt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn-bpe", help="learn joint byte pair encoding merges")
    _add_parallel_files(p)
    p.add_argument("--operations", type=int, default=32000, help="number of merge operations")
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--output", required=True, help="merges file to write")
    p.add_argument("--piece-vocab", help="also write the piece vocabulary TSV here")
    p.set_defaults(func=cmd_learn_bpe)

    p = sub.add_parser("apply-bpe", help="encode a tokenized file into pieces")
    p.add_argument("--merges", required=True)
    p.add_argument("--piece-vocab", help="piece vocabulary for singleton/unseen mapping")
    p.add_argument("--map-singletons", action="store_true")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_apply_bpe)

    p = sub.add_parser("build-vocab", help="build a frequency-cut vocabulary")
    _add_parallel_files(p)
    p.add_argument("--side", choices=("source", "target"), required=True)
    p.add_argument("--limit", type=int, default=50000)
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train-lexicon", help="train word translation probabilities (Model 1 EM)")
    _add_parallel_files(p)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--min-prob", type=float, default=0.0)
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--table", required=True, help="translation table TSV to write")
    p.add_argument("--dictionary", required=True, help="dictionary TSV to write")
    p.set_defaults(func=cmd_train_lexicon)

    p = sub.add_parser("train", help="train one translation model")
    _add_parallel_files(p)
    p.add_argument("--dev-source", required=True)
    p.add_argument("--dev-target", required=True)
    p.add_argument("--src-vocab", required=True)
    p.add_argument("--tgt-vocab", required=True)
    p.add_argument("--embed", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--attention", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--rate", type=float, default=None, help="initial rate (0.5 sgd, 0.0002 adam)")
    p.add_argument("--max-runs", type=int, default=1, help="training runs; rate halves between runs")
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--eval-interval", type=int, nargs="+", default=[50000, 25000],
                   help="sentences between dev evaluations, per run index")
    p.add_argument("--batch-budget", type=int, default=512, help="target words per mini-batch")
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", help="training log TSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a file with one model or an ensemble")
    p.add_argument("--checkpoint", nargs="+", required=True, help="one per ensemble member")
    p.add_argument("--src-vocab", required=True)
    p.add_argument("--tgt-vocab", required=True)
    p.add_argument("--merges", help="BPE merges file (subword systems)")
    p.add_argument("--piece-vocab")
    p.add_argument("--map-singletons", action="store_true")
    p.add_argument("--dictionary", help="unk replacement dictionary")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scores", help="per-sentence scores and attention TSV")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU of a translation against references")
    p.add_argument("--hypotheses", required=True)
    p.add_argument("--references", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="class-wise unigram F1 and vocabulary coverage")
    p.add_argument("--hypotheses", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--vocab", required=True, help="full-word vocabulary file")
    p.add_argument("--merges", required=True)
    p.add_argument("--dictionary", required=True)
    p.add_argument("--curve-points", type=int, default=1000)
    p.add_argument("--json", help="also write the JSON report here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run", help="run a full experiment from a config file")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--dir", required=True, help=f"experiment directory (relative paths resolve against ${pipeline.ENV_EXPERIMENT_ROOT})")
    p.add_argument("--jobs", type=int, default=1, help="parallel training jobs, one per seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="resume an experiment, skipping intact stages")
    p.add_argument("--dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_resume)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
