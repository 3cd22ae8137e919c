"""Command-line entry point: ``dnmn <subcommand> [options]``.

Tables go to standard output; machine-readable JSON goes to files under
``--out``.  Exit status is 0 on success, 1 when a check or accuracy
threshold fails, and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import gradcheck
from .autodiff import Tape
from .data import (SchemaError, SynthSpec, _validate, build_vocab, load_questions, load_worlds,
                   quantifier_spec, save_gold_layouts, save_questions, save_worlds, synth_generate)
from .encoder import UNK, layout_distribution
from .layout import KINDS, generate_candidates, layout_features, print_layout
from .training import (MAX_ATTENTION_ENTITIES, TrainConfig, evaluate, load_checkpoint,
                       save_checkpoint, train)

log = logging.getLogger("dnmn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_SEED = 0


class UsageError(Exception):
    pass


class DataMismatchError(ValueError):
    """Checkpoint and data disagree (world views or answer vocabulary)."""


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")


def _existing(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"{what} path does not exist: {path}")
    return path


def _load_data(args):
    _require(args, "worlds", "questions")
    worlds = load_worlds(_existing(args.worlds, "worlds"))
    questions = load_questions(_existing(args.questions, "questions"))
    missing = sorted({q.env_id for q in questions} - set(worlds))
    if missing:
        raise DataMismatchError(f"questions refer to unknown environments: {', '.join(missing)}")
    return worlds, questions


def _select(questions, ids: Optional[List[str]]):
    if not ids:
        return questions
    by_id = {q.id: q for q in questions}
    unknown = [i for i in ids if i not in by_id]
    if unknown:
        raise UsageError(f"unknown question id(s): {', '.join(unknown)}")
    return [by_id[i] for i in ids]


def check_compatible(model, worlds, questions):
    for w in worlds.values():
        for view, dim in model.world_dims.items():
            if view not in w.views:
                raise DataMismatchError(f"world {w.env_id} lacks view {view!r} the checkpoint was trained on")
            if w.views[view].shape[0] != dim:
                raise DataMismatchError(f"world {w.env_id} view {view!r} has dimension "
                                        f"{w.views[view].shape[0]}, checkpoint expects {dim}")
    vocab = set(model.answer_vocab)
    unknown = sorted({q.answer for q in questions} - vocab)
    if unknown:
        raise DataMismatchError(f"answers missing from the checkpoint's answer vocabulary: {', '.join(unknown)}")


def _config_from_args(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, seed=args.seed, fusion=args.fusion,
                       eval_mode=args.eval_mode, reward_sign=args.reward_sign,
                       baseline=args.baseline, policy=args.policy)


def _write_json(path, doc, schema):
    _validate(doc, schema, path)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


# -- subcommands -----------------------------------------------------------

def cmd_train(args) -> int:
    worlds, questions = _load_data(args)
    _require(args, "out")
    train_set = [q for q in questions if q.split == "train"] or questions
    dev = [q for q in questions if q.split != "train"]
    word_vocab, answer_vocab = build_vocab(questions)
    model, metrics = train(train_set, worlds, _config_from_args(args), word_vocab, answer_vocab, dev=dev)
    os.makedirs(args.out, exist_ok=True)
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint.json")
    save_checkpoint(model, ckpt)
    _write_json(os.path.join(args.out, "metrics.json"), metrics, "metrics")
    print(f"{'epoch':>5}  {'loss':>8}  {'train acc':>9}  {'dev acc':>7}  {'depth':>5}")
    for row in metrics["epochs"]:
        dev_acc = "-" if row["dev_accuracy"] is None else f"{row['dev_accuracy']:.3f}"
        print(f"{row['epoch']:>5}  {row['train_loss']:>8.4f}  {row['train_accuracy']:>9.3f}  "
              f"{dev_acc:>7}  {row['mean_layout_depth']:>5.2f}")
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "checkpoint")
    model = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    worlds, questions = _load_data(args)
    questions = _select(questions, args.id)
    check_compatible(model, worlds, questions)
    mode = args.eval_mode or model.config.eval_mode
    keep = all(w.n <= MAX_ATTENTION_ENTITIES for w in worlds.values())
    acc, records = evaluate(model, questions, worlds, mode, seed=args.seed, keep_attentions=keep)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "summary.json"),
                    {"schema_version": 1, "accuracy": acc, "n": len(records), "mode": mode}, "eval_summary")
        with open(os.path.join(args.out, "records.jsonl"), "w") as fh:
            for r in records:
                doc = {"id": r.id, "layout": r.layout, "answer": r.answer, "gold": r.gold,
                       "correct": r.correct, "attentions": r.attentions}
                _validate(doc, "eval_record", "record")
                fh.write(json.dumps(doc) + "\n")
    print(f"accuracy {acc:.4f} on {len(records)} questions ({mode})")
    if args.min_accuracy is not None and acc < args.min_accuracy:
        print(f"accuracy below required {args.min_accuracy}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_predict(args) -> int:
    _require(args, "checkpoint")
    model = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    worlds, questions = _load_data(args)
    questions = _select(questions, args.id)
    check_compatible(model, worlds, [])
    rng = np.random.default_rng(args.seed)
    mode = args.eval_mode or model.config.eval_mode
    for q in questions:
        out = model.predict(q, worlds[q.env_id], mode, rng)
        question = " ".join(q.tokens)
        if out is None:
            print(f"{q.id}\t{question}\t[no candidate layouts]")
            continue
        layout, execution = out
        print(f"{q.id}\t{question}\t{execution.dist.argmax()}\t{print_layout(layout)}")
    return EXIT_OK


def cmd_inspect_candidates(args) -> int:
    _require(args, "questions")
    questions = _select(load_questions(_existing(args.questions, "questions")), args.id)
    model = load_checkpoint(_existing(args.checkpoint, "checkpoint")) if args.checkpoint else None
    rows_out = []
    for q in questions:
        cands = generate_candidates(q.parse)
        print(f"# {q.id}: {' '.join(q.tokens)}")
        if not cands:
            log.warning("question %s has no candidate layouts", q.id)
            print("  (no candidates)")
            continue
        feats = [layout_features(z) for z in cands]
        probs = scores = None
        if model is not None:
            matrix = np.array([f.vector(model.lexicon, UNK) for f in feats])
            tape = Tape()
            _, s = model.layout_scores(tape, q, matrix)
            scores = tape.value(s)
            probs = layout_distribution(scores)
        order = np.argsort(-probs, kind="stable") if probs is not None else range(len(cands))
        for i in order:
            f = feats[i]
            named = dict(zip(KINDS, f.counts))
            counts = " ".join(f"{k}={v}" for k, v in named.items() if v)
            row = {"id": q.id, "layout": print_layout(cands[i]),
                   "features": {"counts": named, "args": sorted(f.args)}}
            if probs is not None:
                row["score"] = float(scores[i])
                row["probability"] = float(probs[i])
                print(f"  {probs[i]:.4f}  {scores[i]:+.4f}  {row['layout']}  [{counts}]")
            else:
                print(f"  {row['layout']}  [{counts}]")
            _validate(row, "candidate", "candidate row")
            rows_out.append(row)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "candidates.jsonl"), "w") as fh:
            for row in rows_out:
                fh.write(json.dumps(row) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.configs < 1:
        raise UsageError("--configs must be at least 1")
    results = gradcheck.run_suite(configs=args.configs, seed=args.seed)
    print(f"{'check':<22} {'max rel err':>12}  {'worst input':<16} {'time':>6}  status")
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<22} {r.max_rel_error:>12.3e}  {r.worst_input:<16} {r.seconds:>5.2f}s  {status}")
    failed = [r for r in results if not r.passed]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report = {"schema_version": 1, "seed": args.seed, "tolerance": results[0].tolerance,
                  "passed": not failed,
                  "checks": [{"name": r.name, "configs": r.configs, "max_rel_error": r.max_rel_error,
                              "worst_input": r.worst_input, "seconds": r.seconds, "passed": r.passed}
                             for r in results]}
        _write_json(os.path.join(args.out, "gradcheck.json"), report, "gradcheck")
    for r in sorted(failed, key=lambda r: -r.max_rel_error):
        print(f"gradient check failed: {r.name} input {r.worst_input} "
              f"relative error {r.max_rel_error:.3e}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_synth(args) -> int:
    _require(args, "out")
    kwargs = {"seed": args.seed, "n_environments": args.environments,
              "questions_per_environment": args.questions_per_environment}
    if args.noise is not None:
        kwargs["noise"] = args.noise
    spec = quantifier_spec(**kwargs) if args.preset == "quantifier" else SynthSpec(**kwargs)
    ds = synth_generate(spec)
    os.makedirs(args.out, exist_ok=True)
    save_worlds(ds.worlds, os.path.join(args.out, "worlds.json"))
    save_questions(ds.examples, os.path.join(args.out, "questions.jsonl"))
    save_gold_layouts(ds.gold_layouts, os.path.join(args.out, "gold_layouts.json"))
    print(f"{len(ds.worlds)} worlds, {len(ds.examples)} questions written to {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnmn", description="Dynamic neural module networks over structured worlds.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--worlds", help="world bundle file, single world file, or directory")
        sp.add_argument("--questions", help="questions JSONL file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED)

    def train_flags(sp):
        sp.add_argument("--epochs", type=int, default=50)
        sp.add_argument("--fusion", action="store_true", help="enable the question-answer fusion head")
        sp.add_argument("--eval-mode", choices=("greedy", "sample"), default="greedy")
        sp.add_argument("--reward-sign", type=int, choices=(1, -1), default=1)
        sp.add_argument("--baseline", action="store_true", help="subtract a moving-average reward baseline")
        sp.add_argument("--policy", choices=("dynamic", "fixed"), default="dynamic")

    t = sub.add_parser("train", help="train a model")
    data_flags(t)
    train_flags(t)
    t.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.json)")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                              ("predict", cmd_predict, "answer questions with a checkpoint")):
        e = sub.add_parser(name, help=help_)
        data_flags(e)
        e.add_argument("--checkpoint")
        e.add_argument("--eval-mode", choices=("greedy", "sample"), default=None)
        e.add_argument("--id", action="append", help="restrict to this question id (repeatable)")
        if name == "eval":
            e.add_argument("--min-accuracy", type=float, default=None,
                           help="exit 1 when accuracy falls below this value")
        e.set_defaults(func=func)

    c = sub.add_parser("inspect-candidates", help="list candidate layouts for questions")
    c.add_argument("--questions")
    c.add_argument("--checkpoint")
    c.add_argument("--out")
    c.add_argument("--id", action="append")
    c.set_defaults(func=cmd_inspect_candidates)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)
    g.add_argument("--configs", type=int, default=100, help="random configurations per check")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--environments", type=int, default=10)
    s.add_argument("--questions-per-environment", type=int, default=50)
    s.add_argument("--noise", type=float, default=None)
    s.add_argument("--preset", choices=("default", "quantifier"), default="default")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dnmn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, DataMismatchError, OSError, ValueError) as exc:
        print(f"dnmn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
