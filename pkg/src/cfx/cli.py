"""Command-line entry point: ``cfx <command> [options]``.

Exit status is 0 on success, 1 for invalid input or usage, 2 for anything else.
Options may also come from ``--config FILE`` (``key=value`` lines); explicit
flags win over the file, and ``CFX_SEED`` supplies the seed when neither does.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from pathlib import Path
from typing import Sequence

from .cfd_head import AGGREGATIONS, CNN_FILTERS, InputError, predict
from .checkpoint import CheckpointError, checkpoint_from_model, load_checkpoint, model_from_checkpoint, save_checkpoint
from .dataio import (
    DataError,
    Subtask1Record,
    Subtask2Record,
    read_config_file,
    read_sentences,
    read_subtask1_csv,
    read_subtask2_csv,
    write_subtask1_csv,
    write_subtask2_csv,
)
from .encoder import EncoderConfig
from .evalmetrics import SpanGold, binary_prf, format_report, score_extraction
from .qa_head import QUERY_KINDS, ROLES, SpanError, extract, make_query
from .synth import SynthConfig, generate_synthetic, train_test_split
from .tokenizer import PackingError, Vocab, VocabError, build_vocab, pack_classification
from .trainer import (
    N_FOLDS,
    ConfigError,
    TrainConfig,
    cfd_probabilities,
    ensemble_vote,
    split_folds,
    train_cfd,
    train_qa,
)

log = logging.getLogger("cfx")

VOCAB_FILE = "vocab.txt"
DEFAULT_TRAIN_SEED = 13
DEFAULT_SYNTH_SEED = 7


class UsageError(Exception):
    pass


VALIDATION_ERRORS = (
    UsageError,
    DataError,
    ConfigError,
    CheckpointError,
    PackingError,
    VocabError,
    InputError,
    SpanError,
    OSError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _env_seed(default: int) -> int:
    raw = os.environ.get("CFX_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CFX_SEED={raw!r} is not an integer") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value file of defaults for this command")
    p.add_argument("--seed", type=int, help="random seed (default: $CFX_SEED, else a fixed value)")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("encoder")
    g.add_argument("--layers", type=int, default=4)
    g.add_argument("--hidden", type=int, default=128)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--ffn", type=int, default=512)
    g.add_argument("--max-len", type=int, default=128)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--vocab-size", type=int, default=8000, help="target WordPiece vocabulary size")


def _train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--train", type=Path, required=True, help="training CSV")
    g.add_argument("--earlystop", type=Path, help="early-stopping CSV (default: hold out part of --train)")
    g.add_argument("--earlystop-fraction", type=float, default=0.1)
    g.add_argument("--out", type=Path, required=True, help="output directory")
    g.add_argument("--lr", type=float, default=3e-4)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--max-epochs", type=int, default=20)
    g.add_argument("--eval-every", type=int, default=250)
    g.add_argument("--patience", type=int, default=5)
    g.add_argument("--max-steps", type=int)
    g.add_argument("--time-limit", type=float, help="seconds of training per model")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="cfx", description="Counterfactual detection and antecedent/consequence extraction.")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {}

    p = cmds["train-cfd"] = sub.add_parser("train-cfd", help="train a counterfactual detector")
    _common(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--agg", choices=AGGREGATIONS, default="cnn")
    p.add_argument("--cnn-filters", type=int, default=CNN_FILTERS)
    p.add_argument("--no-mix-embedding", action="store_true", help="scalar-mix transformer layers only")
    p.add_argument("--ensemble", action="store_true", help=f"train {N_FOLDS} fold models for voting")
    p.add_argument("--dev-size", type=int, default=0, help="ids held out from all folds (with --ensemble)")

    p = cmds["train-qa"] = sub.add_parser("train-qa", help="train an antecedent/consequence extractor")
    _common(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--query-kind", choices=QUERY_KINDS, default="definition")
    p.add_argument("--tau", type=float, default=0.0, help="span must beat null by more than this")

    p = cmds["predict-cfd"] = sub.add_parser("predict-cfd", help="label sentences as counterfactual or not")
    _common(p)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--model", type=Path)
    which.add_argument("--ensemble", type=Path, help=f"directory holding exactly {N_FOLDS} .cfxk files")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = cmds["predict-qa"] = sub.add_parser("predict-qa", help="extract antecedent and consequence offsets")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tau", type=float)

    p = cmds["evaluate"] = sub.add_parser("evaluate", help="score predictions against gold")
    _common(p)
    p.add_argument("--task", type=int, choices=(1, 2), required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gold", type=Path, required=True)

    p = cmds["gen-synthetic"] = sub.add_parser("gen-synthetic", help="write a synthetic corpus for both tasks")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-counterfactual", type=int, default=1250)
    p.add_argument("--n-declarative", type=int, default=1250)
    p.add_argument("--n-extraction", type=int, default=2500)
    p.add_argument("--null-fraction", type=float, default=0.1464)
    p.add_argument("--n-test", type=int, default=500, help="test rows split off each task")

    p = cmds["split"] = sub.add_parser("split", help="dev sample plus five folds")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="CSV with a sentenceID column")
    src.add_argument("--n-items", type=int)
    p.add_argument("--dev-size", type=int, default=1500)
    p.add_argument("--out", type=Path, required=True, help="JSON output")
    return parser, cmds


def _peek_config(argv: Sequence[str]) -> Path | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if a.startswith("--config="):
            return Path(a.split("=", 1)[1])
    return None


def _apply_config(sub: argparse.ArgumentParser, path: Path, command: str) -> None:
    values: dict[str, object] = dict(read_config_file(path))
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(values) - set(actions) - {"config", "help"})
    if unknown:
        raise UsageError(f"{path}: unknown option(s) for {command}: {', '.join(unknown)}")
    for dest, raw in values.items():
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            values[dest] = str(raw).lower() in ("1", "true", "yes", "on")
        # the file can satisfy options that are otherwise required
        action.required = False
    for group in sub._mutually_exclusive_groups:
        if any(a.dest in values for a in group._group_actions):
            group.required = False
    sub.set_defaults(**values)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Flags win over the config file, which wins over $CFX_SEED and built-in defaults."""
    parser, cmds = build_parser()
    command = next((a for a in argv if a in cmds), None)
    config = _peek_config(argv)
    if command is not None and config is not None:
        _apply_config(cmds[command], config, command)
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _env_seed(DEFAULT_SYNTH_SEED if args.command == "gen-synthetic" else DEFAULT_TRAIN_SEED)
    return args


def _encoder_config(args, vocab: Vocab) -> EncoderConfig:
    try:
        return EncoderConfig(
            vocab_size=len(vocab),
            layers=args.layers,
            hidden=args.hidden,
            heads=args.heads,
            ffn=args.ffn,
            max_len=args.max_len,
            dropout=args.dropout,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _train_config(args, **extra) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        eval_every_steps=args.eval_every,
        patience=args.patience,
        seed=args.seed,
        max_steps=args.max_steps,
        time_limit_s=args.time_limit,
        **extra,
    )


def _holdout(records: list, args, reader) -> tuple[list, list[int], list[int]]:
    """All records plus train/early-stop index lists."""
    if args.earlystop is not None:
        stop = reader(args.earlystop)
        n = len(records)
        return records + stop, list(range(n)), list(range(n, n + len(stop)))
    if not 0 < args.earlystop_fraction < 1:
        raise ConfigError("--earlystop-fraction must lie strictly between 0 and 1")
    ids = list(range(len(records)))
    random.Random(args.seed).shuffle(ids)
    k = max(1, round(len(ids) * args.earlystop_fraction))
    if k >= len(ids):
        raise ConfigError(f"{len(ids)} training rows leave nothing to train on after the hold-out")
    return records, sorted(ids[k:]), sorted(ids[:k])


def _write_vocab(out: Path, texts: list[str], size: int) -> Vocab:
    out.mkdir(parents=True, exist_ok=True)
    vocab = build_vocab(texts, size)
    vocab.save(out / VOCAB_FILE)
    return vocab


def _load_model(path: Path, vocab_path: Path | None = None):
    vocab_path = vocab_path or path.parent / VOCAB_FILE
    vocab = Vocab.load(vocab_path)
    ckpt = load_checkpoint(path, vocab)
    return model_from_checkpoint(ckpt), vocab


def cmd_train_cfd(args) -> None:
    records = read_subtask1_csv(args.train)
    vocab = _write_vocab(args.out, [r.sentence for r in records], args.vocab_size)
    enc = _encoder_config(args, vocab)
    model_kw = {"cnn_filters": args.cnn_filters, "mix_embedding": not args.no_mix_embedding}
    if args.ensemble:
        plan = split_folds(len(records), args.dev_size, args.seed)
        (args.out / "split.json").write_text(json.dumps(_plan_json(plan, [r.sentence_id for r in records])) + "\n")
        for k in range(N_FOLDS):
            train_ids, stop_ids = plan.group(k)
            cfg = _train_config(args, aggregation=args.agg)
            cfg.seed = args.seed + k
            model, res = train_cfd(records, train_ids, stop_ids, vocab, enc, cfg, **model_kw)
            _save(args.out / f"fold{k}.cfxk", model, vocab, res, "f1")
            print(f"fold{k}_best_f1={res.best_metric:.4f}")
        return
    records, train_ids, stop_ids = _holdout(records, args, read_subtask1_csv)
    model, res = train_cfd(records, train_ids, stop_ids, vocab, enc, _train_config(args, aggregation=args.agg), **model_kw)
    _save(args.out / "model.cfxk", model, vocab, res, "f1")
    print(format_report({"best_f1": res.best_metric}) + f"best_step={res.best_step}")


def cmd_train_qa(args) -> None:
    records = read_subtask2_csv(args.train)
    queries = [make_query(role, kind).text for role in ROLES for kind in QUERY_KINDS]
    vocab = _write_vocab(args.out, [r.sentence for r in records] + queries, args.vocab_size)
    enc = _encoder_config(args, vocab)
    records, train_ids, stop_ids = _holdout(records, args, read_subtask2_csv)
    cfg = _train_config(args, query_kind=args.query_kind, tau=args.tau)
    model, res = train_qa(records, train_ids, stop_ids, vocab, enc, cfg)
    if res.flagged:
        (args.out / "flagged.txt").write_text("".join(f"{f}\n" for f in res.flagged))
    _save(args.out / "model.cfxk", model, vocab, res, "em")
    print(format_report({"best_em": res.best_metric}) + f"best_step={res.best_step}")


def _save(path: Path, model, vocab: Vocab, res, metric: str) -> None:
    meta = {"best_step": res.best_step, f"dev_{metric}": res.best_metric, "steps": res.steps, "stop": res.stop_reason}
    save_checkpoint(path, checkpoint_from_model(model, vocab, meta))
    log.info("wrote %s", path)


def _plan_json(plan, ids: list | None = None) -> dict:
    name = (lambda i: ids[i]) if ids is not None else (lambda i: i)
    return {"seed": plan.seed, "dev": [name(i) for i in plan.dev], "folds": [[name(i) for i in f] for f in plan.folds]}


def cmd_predict_cfd(args) -> None:
    if args.ensemble is not None:
        paths = sorted(args.ensemble.glob("*.cfxk"))
        if len(paths) != N_FOLDS:
            raise UsageError(f"{args.ensemble}: exactly {N_FOLDS} checkpoints required for voting, found {len(paths)}")
    else:
        paths = [args.model]
    rows = read_sentences(args.input)
    loaded = [_load_model(p) for p in paths]
    votes = []
    for model, vocab in loaded:
        if model.kind != "cfd":
            raise CheckpointError(f"checkpoint holds a {model.kind!r} model, not a detector")
        packs = [pack_classification(s, vocab, model.enc.max_len) for _, s in rows]
        votes.append([predict(p, args.threshold) for p in cfd_probabilities(model, packs)])
    labels = [ensemble_vote(col) for col in zip(*votes)] if len(votes) == N_FOLDS else votes[0]
    write_subtask1_csv(args.out, [Subtask1Record(i, s, y) for (i, s), y in zip(rows, labels)])


def cmd_predict_qa(args) -> None:
    model, vocab = _load_model(args.model)
    if model.kind != "qa":
        raise CheckpointError(f"checkpoint holds a {model.kind!r} model, not an extractor")
    out = []
    for sid, sentence in read_sentences(args.input):
        preds = extract(sentence, model, vocab, tau=args.tau)
        out.append(Subtask2Record(sid, sentence, preds["antecedent"].offsets, preds["consequence"].offsets))
    write_subtask2_csv(args.out, out)


def cmd_evaluate(args) -> None:
    if args.task == 1:
        gold = read_subtask1_csv(args.gold)
        pred = {r.sentence_id: r.label for r in read_subtask1_csv(args.pred)}
        missing = [r.sentence_id for r in gold if r.sentence_id not in pred]
        if missing:
            raise DataError(f"{args.pred}: no prediction for {len(missing)} gold id(s), e.g. {missing[0]}")
        m = binary_prf([pred[r.sentence_id] for r in gold], [r.label for r in gold])
        print(format_report({"precision": m.precision, "recall": m.recall, "f1": m.f1}), end="")
        return
    gold = {r.sentence_id: SpanGold(r.antecedent, r.consequence) for r in read_subtask2_csv(args.gold)}
    pred = {r.sentence_id: (r.antecedent, r.consequence) for r in read_subtask2_csv(args.pred)}
    s = score_extraction(pred, gold)
    print(format_report({"em": s.em, "precision": s.precision, "recall": s.recall, "f1": s.f1}), end="")


def cmd_gen_synthetic(args) -> None:
    try:
        cfg = SynthConfig(args.n_counterfactual, args.n_declarative, args.n_extraction, args.null_fraction, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    s1, s2 = generate_synthetic(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        tr1, te1 = train_test_split(s1, args.n_test)
        tr2, te2 = train_test_split(s2, args.n_test)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_subtask1_csv(args.out / "subtask1_train.csv", tr1)
    write_subtask1_csv(args.out / "subtask1_test.csv", te1)
    write_subtask2_csv(args.out / "subtask2_train.csv", tr2)
    write_subtask2_csv(args.out / "subtask2_test.csv", te2)


def cmd_split(args) -> None:
    ids = None
    if args.data is not None:
        ids = [sid for sid, _ in read_sentences(args.data)]
    n = len(ids) if ids is not None else args.n_items
    plan = split_folds(n, args.dev_size, args.seed)
    args.out.write_text(json.dumps(_plan_json(plan, ids)) + "\n")


COMMANDS = {
    "train-cfd": cmd_train_cfd,
    "train-qa": cmd_train_qa,
    "predict-cfd": cmd_predict_cfd,
    "predict-qa": cmd_predict_qa,
    "evaluate": cmd_evaluate,
    "gen-synthetic": cmd_gen_synthetic,
    "split": cmd_split,
}


def run_command(argv: Sequence[str]) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except VALIDATION_ERRORS as exc:
        print(f"cfx: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"cfx {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("internal error", exc_info=True)
        print(f"cfx {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
