"""Command-line entry point: ``weakplda <subcommand> [options]``.

Every option can also be given in a JSON file passed with ``--config``. Keys
are option names with or without leading dashes (``"n-sessions"``,
``"n_sessions"``). Values on the command line win over the file, and the
file wins over built-in defaults.

Exit status is 0 on success, 2 on a usage error and 1 when a run fails.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from . import __version__
from .experiments import EXPERIMENTS, ExperimentSpec, run_experiment
from .io import (FormatError, LabeledDataset, ScoreSet, atomic_write, dumps_json, load_ivectors, load_labels,
                 load_metadata, load_scores, load_trials, save_ivectors, save_labels, save_metadata,
                 save_scores, save_trials)
from .labeling import derive_weak_labels, quality_report, select_records, true_labels
from .metrics import compute_eer
from .model import load_model, save_model
from .plda import TrainConfig, score_cosine_batch, score_llr_batch, train_em
from .preprocess import Preprocessor
from .synth import SynthConfig, generate_corpus, generate_strong_set, make_eval_split

logger = logging.getLogger("weakplda")


class UsageError(Exception):
    """Bad command line or config file; reported with exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        command = self._prog.split()[-1]
        if action.dest in REQUIRED.get(command, ()):
            return action.help + " (required)"
        return super()._get_help_string(action)


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def _json_object(text: str) -> dict:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON ({exc})") from None
    if not isinstance(value, dict):
        raise argparse.ArgumentTypeError("expected a JSON object")
    return value


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.add_argument("--threads", type=int, default=1, help="worker threads for E-step and batch scoring")
    g.add_argument("--quiet", action="store_true", default=False, help="only log warnings and errors")
    g.add_argument("--config", default=None, help="JSON file with option values")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="weakplda", description="PLDA training, weak labeling and EER evaluation for i-vectors.",
                     formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, parents=[common],
                              formatter_class=_Formatter)

    d = SynthConfig()
    p = add("synth", "Generate a synthetic session corpus, evaluation trials and optional strong set.")
    p.add_argument("--out", required=False, help="output directory")
    p.add_argument("--dim", type=int, default=d.dim, help="i-vector dimension")
    p.add_argument("--rank", type=int, default=d.rank, help="speaker subspace rank")
    p.add_argument("--n-sessions", type=int, default=d.n_sessions, help="number of two-channel sessions")
    p.add_argument("--pool-size", type=int, default=d.pool_size, help="customer speaker pool size")
    p.add_argument("--service-pool-size", type=int, default=d.service_pool_size, help="service speaker pool size")
    p.add_argument("--utts-per-channel", type=float, default=d.utts_per_channel,
                   help="mean utterances per channel (Poisson, at least 1)")
    p.add_argument("--speaker-scale", type=float, default=d.speaker_scale, help="multiplier on the speaker subspace")
    p.add_argument("--noise-scale", type=float, default=d.noise_scale, help="multiplier on the residual std")
    p.add_argument("--session-scale", type=float, default=d.session_scale, help="std of the per-session offset")
    p.add_argument("--session-rank", type=int, default=d.session_rank, help="rank of the session subspace")
    p.add_argument("--condition-shift", type=float, default=d.condition_shift,
                   help="norm of the offset added to in-domain (weak and evaluation) data")
    p.add_argument("--random-sigma", action="store_true", default=d.random_sigma,
                   help="draw a random SPD residual covariance instead of a scaled identity")
    p.add_argument("--strong-speakers", type=int, default=0, help="also write a human-labelled set of this many speakers")
    p.add_argument("--strong-sessions-per-speaker", type=int, default=d.strong_sessions_per_speaker,
                   help="sessions per strong speaker")
    p.add_argument("--strong-utts-per-session", type=float, default=d.strong_utts_per_session,
                   help="mean utterances per strong session")
    p.add_argument("--n-eval-speakers", type=int, default=200, help="held-out evaluation speakers (0 to skip)")
    p.add_argument("--enroll-per-spk", type=int, default=1, help="enrollment utterances per evaluation speaker")
    p.add_argument("--test-per-spk", type=int, default=6, help="test utterances per evaluation speaker")

    p = add("weaklabel", "Derive weak speaker labels (session/local speaker) from a metadata CSV.")
    p.add_argument("--metadata", help="metadata CSV")
    p.add_argument("--out", help="labels file (utt_id<TAB>label)")
    p.add_argument("--local-speaker", default=None, help="keep only this local speaker id (e.g. one channel)")
    p.add_argument("--true-labels", action="store_true", default=False,
                   help="write the true speaker ids instead of weak labels")
    p.add_argument("--report", default=None, help="write a label-quality JSON report (needs true speaker ids)")

    p = add("train", "Train a PLDA model by EM on labelled i-vectors.")
    p.add_argument("--ivectors", help="i-vector file")
    p.add_argument("--labels", help="labels file; utterances without a label are ignored")
    p.add_argument("--rank", type=int, help="speaker subspace rank")
    p.add_argument("--iters", type=int, default=20, help="EM iterations")
    p.add_argument("--out", help="model JSON file")
    p.add_argument("--whiten", action="store_true", default=False, help="fit a whitening transform before training")
    p.add_argument("--sigma", choices=("full", "diagonal"), default="full", help="residual covariance form")
    p.add_argument("--init", choices=("eig", "random"), default="eig", help="initialisation of the speaker subspace")
    p.add_argument("--min-utts", type=int, default=1, help="drop speakers with fewer utterances")

    p = add("score", "Score a trial list with a PLDA model (or by cosine similarity).")
    p.add_argument("--model", default=None, help="model JSON from 'train'")
    p.add_argument("--trials", help="trial file")
    p.add_argument("--ivectors", help="i-vector file holding every trial utterance")
    p.add_argument("--out", help="scores file, one line per trial in trial order")
    p.add_argument("--cosine", action="store_true", default=False,
                   help="cosine scoring; uses the model's preprocessing when --model is given")
    p.add_argument("--with-flags", action="store_true", default=False, help="append target/nontarget to each line")

    p = add("eval", "Compute the EER and DET points of a scores file.")
    p.add_argument("--scores", help="scores file")
    p.add_argument("--trials", default=None, help="trial file (otherwise flags embedded in the scores file are used)")
    p.add_argument("--out", default=None, help="JSON report (standard output when omitted)")
    p.add_argument("--det", default=None, help="CSV of DET points")

    p = add("experiment", "Run one of the desk-scale replication experiments.")
    p.add_argument("--name", choices=EXPERIMENTS, help="experiment")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4], help="comma-separated seeds")
    p.add_argument("--out", help="output directory")
    p.add_argument("--synth", type=_json_object, default={}, help="JSON object of corpus overrides")
    p.add_argument("--grid", type=_json_object, default={}, help="JSON object of grid axis overrides")
    p.add_argument("--n-eval-speakers", type=int, default=200, help="held-out evaluation speakers")
    p.add_argument("--test-per-spk", type=int, default=6, help="test utterances per evaluation speaker")
    p.add_argument("--iters", type=int, default=20, help="EM iterations per model")
    p.add_argument("--whiten", action="store_true", default=False, help="whiten before length normalization")
    return parser


REQUIRED = {
    "synth": ["out"],
    "weaklabel": ["metadata", "out"],
    "train": ["ivectors", "labels", "rank", "out"],
    "score": ["trials", "ivectors", "out"],
    "eval": ["scores"],
    "experiment": ["name", "out"],
}


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: argparse.ArgumentParser, argv: List[str], args: argparse.Namespace) -> argparse.Namespace:
    """Re-parse with the config file's values installed as defaults."""
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {args.config} is not valid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {args.config} must hold a JSON object")
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest in ("config", "help") or dest not in actions:
            raise UsageError(f"config {args.config}: unknown option {key!r} for '{args.command}'")
        action = actions[dest]
        if isinstance(value, str) and action.type is not None:
            try:
                value = action.type(value)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config {args.config}: bad value for {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config {args.config}: {key!r} must be one of {', '.join(map(str, action.choices))}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def parse_args(argv: List[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        args = _apply_config(parser, argv, args)
    missing = [name for name in REQUIRED[args.command] if getattr(args, name) is None]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise UsageError(f"weakplda {args.command}: missing required option(s): {flags}")
    if args.command == "score" and not (args.model or args.cosine):
        raise UsageError("weakplda score: --model is required unless --cosine is given")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> None:
    config = SynthConfig(
        dim=args.dim, rank=args.rank, n_sessions=args.n_sessions, pool_size=args.pool_size,
        service_pool_size=args.service_pool_size, utts_per_channel=args.utts_per_channel,
        speaker_scale=args.speaker_scale, noise_scale=args.noise_scale, session_scale=args.session_scale,
        session_rank=args.session_rank, condition_shift=args.condition_shift, random_sigma=args.random_sigma,
        strong_sessions_per_speaker=args.strong_sessions_per_speaker,
        strong_utts_per_session=args.strong_utts_per_session, seed=args.seed)
    out = args.out
    os.makedirs(out, exist_ok=True)
    corpus = generate_corpus(config)
    save_ivectors(corpus.vectors, os.path.join(out, "ivectors.txt"))
    save_metadata(corpus.records, os.path.join(out, "metadata.csv"))
    save_model(corpus.truth_model, os.path.join(out, "truth_model.json"))
    logger.info("wrote %d utterances from %d sessions", len(corpus.vectors), config.n_sessions)
    if args.n_eval_speakers:
        trials, vectors = make_eval_split(config, args.n_eval_speakers, args.enroll_per_spk, args.test_per_spk)
        save_ivectors(vectors, os.path.join(out, "eval_ivectors.txt"))
        save_trials(trials, os.path.join(out, "trials.txt"))
        logger.info("wrote %d trials (%d target)", len(trials), trials.n_target)
    if args.strong_speakers:
        vectors, records = generate_strong_set(config, args.strong_speakers)
        save_ivectors(vectors, os.path.join(out, "strong_ivectors.txt"))
        save_metadata(records, os.path.join(out, "strong_metadata.csv"))
        save_labels(true_labels(records), os.path.join(out, "strong_labels.tsv"))
        logger.info("wrote %d strong utterances from %d speakers", len(vectors), args.strong_speakers)
    atomic_write(os.path.join(out, "synth_config.json"), dumps_json(config.to_dict()))


def cmd_weaklabel(args) -> None:
    records = load_metadata(args.metadata)
    if args.local_speaker is not None:
        records = select_records(records, local_speaker=args.local_speaker)
        if not records:
            raise FormatError(f"{args.metadata}: no utterances with local speaker {args.local_speaker!r}")
    weak = derive_weak_labels(records)
    labels = true_labels(records) if args.true_labels else weak.labels
    save_labels(labels, args.out)
    logger.info("labelled %d utterances with %d speakers", len(labels), len(set(labels.values())))
    if args.report:
        atomic_write(args.report, dumps_json(quality_report(weak, records).to_dict()))


def cmd_train(args) -> None:
    vectors = load_ivectors(args.ivectors)
    labels = load_labels(args.labels)
    data = LabeledDataset.from_files(vectors, labels)
    if len(data) == 0:
        raise FormatError(f"no utterance in {args.labels} has an i-vector in {args.ivectors}")
    pre = Preprocessor.fit(data.vectors.values, whiten=args.whiten)
    data = data.with_vectors(data.vectors.with_values(pre.transform(data.vectors.values)))
    config = TrainConfig(rank=args.rank, iterations=args.iters, seed=args.seed, min_utts_per_speaker=args.min_utts,
                         sigma_mode=args.sigma, init=args.init, threads=args.threads)
    logger.info("training on %d utterances, %d speakers", len(data), len(data.speakers))
    model, history = train_em(data, config)
    for ll in history:
        print(format(ll, ".17g"))
    save_model(model, args.out, preprocess=pre)


def cmd_score(args) -> None:
    trials = load_trials(args.trials)
    vectors = load_ivectors(args.ivectors)
    model = pre = None
    if args.model:
        model, pre = load_model(args.model)
    missing = [u for u in trials.utterances() if u not in vectors]
    if missing:
        raise FormatError(f"{args.ivectors}: no i-vector for trial utterance {missing[0]!r}")
    needed = list(trials.utterances())
    vectors = vectors.subset(needed)
    if pre is not None and len(vectors):
        vectors = vectors.with_values(pre.transform(vectors.values))
    if args.cosine:
        scores = score_cosine_batch(trials, vectors, threads=args.threads)
    else:
        scores = score_llr_batch(model, trials, vectors, threads=args.threads)
    save_scores(scores, args.out, with_flags=args.with_flags)
    logger.info("scored %d trials", len(scores))


def cmd_eval(args) -> None:
    scores = load_scores(args.scores)
    if args.trials:
        scores = scores.with_trials(load_trials(args.trials))
    elif any(flag is None for *_, flag in scores.entries):
        raise FormatError(f"{args.scores}: no target flags; pass --trials")
    report = compute_eer(ScoreSet(scores.entries))
    text = dumps_json(report.to_dict())
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    if args.det:
        atomic_write(args.det, report.det_csv())
    logger.info("EER %.4f%% over %d target / %d nontarget trials", 100 * report.eer, report.n_target,
                report.n_nontarget)


def cmd_experiment(args) -> None:
    spec = ExperimentSpec(args.name, synth=args.synth, grid=args.grid, seeds=args.seeds, output_dir=args.out,
                          n_eval_speakers=args.n_eval_speakers, test_per_spk=args.test_per_spk,
                          iterations=args.iters, whiten=args.whiten, threads=args.threads)
    result = run_experiment(spec)
    for cond, _ in result.rows():
        logger.info("%s: %.2f%% +- %.2f", cond, 100 * result.mean(cond), 100 * result.stderr(cond))


COMMANDS = {
    "synth": cmd_synth,
    "weaklabel": cmd_weaklabel,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def _message(exc: BaseException) -> str:
    if isinstance(exc, OSError) and exc.filename is not None:
        return f"{exc.filename}: {exc.strerror}"
    if isinstance(exc, KeyError) and exc.args:
        return str(exc.args[0])
    return str(exc) or type(exc).__name__


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(logging.WARNING if args.quiet else logging.INFO)
    logger.propagate = False

    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, ArithmeticError) as exc:
        print(f"error: {_message(exc)}", file=sys.stderr)
        return 1
    return 0
