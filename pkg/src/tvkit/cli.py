"""Command-line entry points wiring the toolkit into a training recipe.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from ._linalg import NumericError
from . import backend as backend_mod
from .gmm import GmmDiag, GmmFull, train_gmm_diag, train_gmm_full
from .io_formats import (
    FormatError,
    read_matrix,
    read_scores,
    read_trials,
    save_model,
    load_model,
    write_alignment,
    write_matrix,
    write_scores,
    write_trials,
)
from .pipeline import (
    DirectoryFeatureStore,
    EvalProtocol,
    PipelineError,
    TrainConfig,
    align_corpus,
    ensemble_run,
    evaluate_model,
    extract_corpus,
    load_embeddings,
    train_extractor,
)
from .synth import SynthSpec, make_trials, read_labels, sample_corpus

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with the usage exit code pinned to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# background model directory layout


def save_ubm(outdir, ubm_diag, ubm_full):
    os.makedirs(outdir, exist_ok=True)
    write_matrix(ubm_diag.weights[None, :], "f64", os.path.join(outdir, "diag_weights.fmx"))
    write_matrix(ubm_diag.means, "f64", os.path.join(outdir, "diag_means.fmx"))
    write_matrix(ubm_diag.variances, "f64", os.path.join(outdir, "diag_vars.fmx"))
    write_matrix(ubm_full.weights[None, :], "f64", os.path.join(outdir, "full_weights.fmx"))
    write_matrix(ubm_full.means, "f64", os.path.join(outdir, "full_means.fmx"))
    c, f, _ = ubm_full.covariances.shape
    write_matrix(ubm_full.covariances.reshape(c * f, f), "f64",
                 os.path.join(outdir, "full_covs.fmx"))


def load_ubm(indir):
    diag = GmmDiag(
        read_matrix(os.path.join(indir, "diag_weights.fmx"))[0],
        read_matrix(os.path.join(indir, "diag_means.fmx")),
        read_matrix(os.path.join(indir, "diag_vars.fmx")),
    )
    means = read_matrix(os.path.join(indir, "full_means.fmx"))
    c, f = means.shape
    full = GmmFull(
        read_matrix(os.path.join(indir, "full_weights.fmx"))[0],
        means,
        read_matrix(os.path.join(indir, "full_covs.fmx")).reshape(c, f, f),
    )
    diag.validate()
    full.validate()
    return diag, full


# ---------------------------------------------------------------------------
# back-end model directory layout


def save_backend(outdir, chain, lda, plda):
    os.makedirs(outdir, exist_ok=True)
    write_matrix(chain.mean[None, :], "f64", os.path.join(outdir, "mean.fmx"))
    if chain.whitener is not None:
        write_matrix(chain.whitener, "f64", os.path.join(outdir, "whitener.fmx"))
    if lda is not None:
        write_matrix(lda.projection, "f64", os.path.join(outdir, "lda.fmx"))
    if plda is not None:
        write_matrix(plda.mean[None, :], "f64", os.path.join(outdir, "plda_mean.fmx"))
        write_matrix(plda.between, "f64", os.path.join(outdir, "plda_between.fmx"))
        write_matrix(plda.within, "f64", os.path.join(outdir, "plda_within.fmx"))
    with open(os.path.join(outdir, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"whiten = {'true' if chain.whitener is not None else 'false'}\n")
        fh.write(f"lda = {'true' if lda is not None else 'false'}\n")
        fh.write(f"plda = {'true' if plda is not None else 'false'}\n")


def load_backend(indir):
    meta = {}
    with open(os.path.join(indir, "meta.txt"), encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, value = (part.strip() for part in line.split("=", 1))
                meta[key] = value == "true"
    whitener = (
        read_matrix(os.path.join(indir, "whitener.fmx")) if meta.get("whiten") else None
    )
    chain = backend_mod.GaussianizerChain(
        mean=read_matrix(os.path.join(indir, "mean.fmx"))[0],
        whitener=whitener,
    )
    lda = None
    if meta.get("lda"):
        lda = backend_mod.LdaModel(read_matrix(os.path.join(indir, "lda.fmx")))
    plda = None
    if meta.get("plda"):
        plda = backend_mod.PldaModel(
            read_matrix(os.path.join(indir, "plda_mean.fmx"))[0],
            read_matrix(os.path.join(indir, "plda_between.fmx")),
            read_matrix(os.path.join(indir, "plda_within.fmx")),
        )
    return chain, lda, plda


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args):
    spec = SynthSpec(
        n_components=args.components,
        feat_dim=args.feat_dim,
        latent_dim=args.latent_dim,
        n_speakers=args.speakers,
        utts_per_speaker=args.utts_per_speaker,
        frames_range=(args.frames_min, args.frames_max),
        seed=args.seed,
        formulation=args.formulation,
        within_noise=args.within_noise,
        mean_scale=args.mean_scale,
        prior_offset=args.prior_offset,
    )
    corpus = sample_corpus(spec)
    corpus.save(args.out)
    if args.make_trials:
        trials = make_trials(corpus.speakers, seed=args.seed)
        write_trials(os.path.join(args.out, "trials.txt"), trials)
    print(f"wrote {len(corpus.ids)} utterances to {args.out}")
    return EXIT_OK


def _cmd_ubm_train(args):
    store = DirectoryFeatureStore(args.features)
    frames = [store.load(utt_id) for utt_id in store.ids()]
    diag = train_gmm_diag(frames, args.components, n_iters=args.diag_iters,
                          seed=args.seed)
    full = train_gmm_full(frames, diag, n_iters=args.full_iters)
    save_ubm(args.out, diag, full)
    print(f"trained C={args.components} background models into {args.out}")
    return EXIT_OK


def _cmd_align(args):
    store = DirectoryFeatureStore(args.features)
    ubm_diag, ubm_full = load_ubm(args.ubm)
    alignments = align_corpus(store, ubm_diag, ubm_full, top_k=args.top_k,
                              prune=args.prune, workers=args.workers,
                              batch_size=args.batch_size)
    ids = store.ids()
    write_alignment(args.out, [(utt_id, alignments[utt_id]) for utt_id in ids],
                    top_k=args.top_k)
    entries = sum(alignments[utt_id].components.shape[0] for utt_id in ids)
    frames = sum(alignments[utt_id].n_frames for utt_id in ids)
    print(f"aligned {frames} frames ({entries / max(frames, 1):.2f} entries/frame) "
          f"to {args.out}")
    return EXIT_OK


def _cmd_tv_train(args):
    config = TrainConfig.load(args.config)
    store = DirectoryFeatureStore(args.features)
    ubm_diag, ubm_full = load_ubm(args.ubm)
    model, metrics = train_extractor(
        config, store, ubm_diag, ubm_full, seed=args.seed,
        checkpoint_dir=args.checkpoint_dir, resume=args.resume,
    )
    save_model(model, args.out)
    if args.metrics is not None:
        metrics.write_csv(args.metrics)
    last = metrics.records[-1] if metrics.records else None
    if last is not None:
        print(f"trained {config.iterations} iterations, final aux {last.aux:.6f}, "
              f"model at {args.out}")
    else:
        print(f"model at {args.out}")
    return EXIT_OK


def _cmd_extract(args):
    model = load_model(args.model)
    store = DirectoryFeatureStore(args.features)
    ids, _ = extract_corpus(model, store, top_k=args.top_k, prune=args.prune,
                            workers=args.workers, batch_size=args.batch_size,
                            out_path=args.out)
    print(f"extracted {len(ids)} embeddings to {args.out}")
    return EXIT_OK


def _cmd_backend_train(args):
    ids, embeddings = load_embeddings(args.embeddings)
    speakers = read_labels(args.labels)
    labels = [speakers[utt_id] for utt_id in ids]
    chain = backend_mod.fit_chain(embeddings, whiten=args.whiten)
    processed = chain.transform(embeddings)
    lda = None
    if args.lda_dim is not None:
        lda = backend_mod.fit_lda(processed, labels, args.lda_dim)
        processed = lda.transform(processed)
    plda = None
    if not args.no_plda:
        plda = backend_mod.fit_plda(processed, labels, n_iters=args.plda_iters)
    save_backend(args.out, chain, lda, plda)
    print(f"back-end ({'plda' if plda is not None else 'cosine'}) saved to {args.out}")
    return EXIT_OK


def _cmd_score(args):
    chain, lda, plda = load_backend(args.backend)
    ids, embeddings = load_embeddings(args.embeddings)
    trials = read_trials(args.trials)
    processed = chain.transform(embeddings)
    if lda is not None:
        processed = lda.transform(processed)
    row_of = {utt_id: i for i, utt_id in enumerate(ids)}
    try:
        enrol = processed[[row_of[utt_id] for utt_id in trials.enrol_ids]]
        test = processed[[row_of[utt_id] for utt_id in trials.test_ids]]
    except KeyError as exc:
        raise PipelineError(f"trial id {exc} missing from embeddings") from exc
    use_plda = args.scoring == "plda" or (args.scoring == "auto" and plda is not None)
    if use_plda:
        if plda is None:
            raise PipelineError("back-end has no PLDA model")
        scores = backend_mod.score_plda_trials(plda, enrol, test)
    else:
        scores = np.sum(enrol * test, axis=1) / (
            np.linalg.norm(enrol, axis=1) * np.linalg.norm(test, axis=1)
        )
    write_scores(args.out, trials.enrol_ids, trials.test_ids, scores)
    print(f"scored {len(trials)} trials to {args.out}")
    return EXIT_OK


def _cmd_eer(args):
    enrol_ids, test_ids, scores = read_scores(args.scores)
    trials = read_trials(args.trials)
    if enrol_ids != trials.enrol_ids or test_ids != trials.test_ids:
        raise PipelineError("scores file does not line up with the trial list")
    eer, threshold = backend_mod.compute_eer(scores, trials.is_target)
    if args.det is not None:
        backend_mod.write_det_csv(args.det, backend_mod.det_points(scores, trials.is_target))
    print(f"EER {eer:.4f}% at threshold {threshold:.6f}")
    return EXIT_OK


def _cmd_ensemble(args):
    config = TrainConfig.load(args.config)
    store = DirectoryFeatureStore(args.features)
    ubm_diag, ubm_full = load_ubm(args.ubm)
    protocol = EvalProtocol(
        eval_store=DirectoryFeatureStore(args.eval_features),
        backend_store=store,
        backend_labels=read_labels(args.labels),
        trials=read_trials(args.trials),
        scoring=args.scoring,
        lda_dim=args.lda_dim,
    )
    metrics = ensemble_run(config, store, ubm_diag, ubm_full, protocol,
                           csv_path=args.out, checkpoint_root=args.checkpoint_root)
    for record in metrics.averaged():
        print(f"iteration {record.iteration}: avg aux {record.aux:.4f} "
              f"avg eer {record.eer:.3f}%")
    if not metrics.complete:
        print("warning: ensemble incomplete, some seeds failed", file=sys.stderr)
    print(f"metrics written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="tvkit", description=__doc__,
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND",
                                parser_class=_Parser)

    p = sub.add_parser("synth",
                       help="sample a synthetic corpus from a known generator")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--feat-dim", type=int, default=8)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--speakers", type=int, default=20)
    p.add_argument("--utts-per-speaker", type=int, default=8)
    p.add_argument("--frames-min", type=int, default=80)
    p.add_argument("--frames-max", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--formulation", choices=["standard", "augmented"],
                   default="augmented")
    p.add_argument("--within-noise", type=float, default=0.3)
    p.add_argument("--mean-scale", type=float, default=8.0)
    p.add_argument("--prior-offset", type=float, default=100.0)
    p.add_argument("--make-trials", action="store_true",
                   help="also write a balanced trials.txt")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ubm-train",
                       help="train diagonal then full background models")
    p.add_argument("--features", required=True, help="feature directory")
    p.add_argument("--out", required=True, help="output model directory")
    p.add_argument("--components", type=int, required=True)
    p.add_argument("--diag-iters", type=int, default=10)
    p.add_argument("--full-iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_ubm_train)

    p = sub.add_parser("align",
                       help="sparse-align a corpus against background models")
    p.add_argument("--features", required=True)
    p.add_argument("--ubm", required=True, help="background model directory")
    p.add_argument("--out", required=True, help="output alignment file")
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--prune", type=float, default=0.025)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("tv-train",
                       help="train a total-variability extractor")
    p.add_argument("--config", required=True, help="TrainConfig key = value file")
    p.add_argument("--features", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int, default=None,
                   help="override the first config seed")
    p.add_argument("--metrics", default=None, help="optional metrics CSV")
    p.set_defaults(func=_cmd_tv_train)

    p = sub.add_parser("extract",
                       help="extract embeddings with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="output embedding matrix file")
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--prune", type=float, default=0.025)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("backend-train",
                       help="fit the scoring back-end on embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True, help="utterance speaker labels")
    p.add_argument("--out", required=True, help="output back-end directory")
    p.add_argument("--whiten", action="store_true",
                   help="whiten before length normalization")
    p.add_argument("--lda-dim", type=int, default=None)
    p.add_argument("--no-plda", action="store_true", help="cosine-only back-end")
    p.add_argument("--plda-iters", type=int, default=10)
    p.set_defaults(func=_cmd_backend_train)

    p = sub.add_parser("score", help="score a trial list")
    p.add_argument("--backend", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True, help="output scores file")
    p.add_argument("--scoring", choices=["auto", "cosine", "plda"], default="auto")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eer",
                       help="equal error rate of a scores file")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--det", default=None, help="optional DET points CSV")
    p.set_defaults(func=_cmd_eer)

    p = sub.add_parser("ensemble",
                       help="multi-seed training with per-iteration evaluation")
    p.add_argument("--config", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--eval-features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True, help="output metrics CSV")
    p.add_argument("--scoring", choices=["cosine", "plda"], default="cosine")
    p.add_argument("--lda-dim", type=int, default=None)
    p.add_argument("--checkpoint-root", default=None)
    p.set_defaults(func=_cmd_ensemble)

    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("TVKIT_LOGLEVEL", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (NumericError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, PipelineError, FileNotFoundError, NotADirectoryError,
            KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
