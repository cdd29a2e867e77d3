"""Data splits, training with periodic evaluation and early stopping, ensembles."""

from __future__ import annotations

import logging
import random
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .cfd_head import AGGREGATIONS, CfdModel, predict
from .dataio import Subtask1Record, Subtask2Record
from .encoder import EncoderConfig
from .evalmetrics import SpanGold, binary_prf, score_extraction
from .qa_head import QUERY_KINDS, ROLES, QaModel, chars_to_slots
from .tokenizer import PackedSeq, Vocab, pack_classification

log = logging.getLogger(__name__)

N_FOLDS = 5
FINETUNE_LR_GRID = (5e-6, 1e-5, 3e-5)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    dev: list[int]
    folds: list[list[int]]
    seed: int

    def group(self, k: int) -> tuple[list[int], list[int]]:
        """Training ids (four folds) and early-stopping ids (fold ``k``)."""
        train = [i for j, f in enumerate(self.folds) if j != k for i in f]
        return train, list(self.folds[k])


def split_folds(n_items: int, dev_size: int, seed: int, n_folds: int = N_FOLDS) -> SplitPlan:
    """Seeded shuffle; the first ``dev_size`` ids form dev, the rest go round-robin into folds."""
    if dev_size < 0 or n_items <= dev_size + n_folds:
        raise ConfigError(f"{n_items} items cannot supply dev {dev_size} plus {n_folds} folds")
    ids = list(range(n_items))
    random.Random(seed).shuffle(ids)
    rest = ids[dev_size:]
    return SplitPlan(sorted(ids[:dev_size]), [sorted(rest[k::n_folds]) for k in range(n_folds)], seed)


def ensemble_vote(votes: Sequence[int]) -> int:
    if len(votes) != N_FOLDS:
        raise ConfigError(f"ensemble voting needs exactly {N_FOLDS} votes, got {len(votes)}")
    if any(v not in (0, 1) for v in votes):
        raise ConfigError(f"votes must be 0/1, got {list(votes)}")
    return int(sum(votes) * 2 > len(votes))


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    max_epochs: int = 20
    eval_every_steps: int = 250
    patience: int = 5
    seed: int = 13
    tau: float = 0.0
    aggregation: str = "cnn"
    query_kind: str = "definition"
    max_steps: int | None = None
    time_limit_s: float | None = None

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.max_epochs, self.eval_every_steps) <= 0:
            raise ConfigError("lr, batch_size, max_epochs and eval_every_steps must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.query_kind not in QUERY_KINDS:
            raise ConfigError(f"query kind must be one of {QUERY_KINDS}")


@dataclass
class Example:
    pack: PackedSeq
    target: object  # label for detection, gold slots (or None) for extraction
    key: str = ""
    role: str = ""


@dataclass
class TrainResult:
    best_metric: float
    best_step: int
    steps: int
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    stop_reason: str = ""
    flagged: list[str] = field(default_factory=list)


def length_batches(lengths: Sequence[int], batch_size: int, rng: random.Random | None = None) -> list[list[int]]:
    """Batches of equal-length items; shuffled within and across buckets when ``rng`` is given."""
    buckets: dict[int, list[int]] = defaultdict(list)
    for i, n in enumerate(lengths):
        buckets[n].append(i)
    batches = []
    for n in sorted(buckets):
        ids = buckets[n]
        if rng is not None:
            rng.shuffle(ids)
        batches.extend(ids[i : i + batch_size] for i in range(0, len(ids), batch_size))
    if rng is not None:
        rng.shuffle(batches)
    return batches


def fit(
    model: CfdModel | QaModel,
    train: Sequence[Example],
    evaluate: Callable[[], float],
    cfg: TrainConfig,
) -> TrainResult:
    """Mini-batch Adam with evaluation every ``eval_every_steps`` and best-weight restore."""
    if not train:
        raise ConfigError("empty training set")
    order_rng = random.Random(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed)
    state = nc.AdamState(lr=cfg.lr)
    params = model.params
    best = -np.inf
    best_step = 0
    best_params = {k: p.data.copy() for k, p in params.items()}
    result = TrainResult(best, 0, 0)
    stale = 0
    step = 0
    started = time.perf_counter()
    lengths = [len(ex.pack) for ex in train]

    def run_eval() -> bool:
        nonlocal best, best_step, stale
        metric = evaluate()
        result.evals.append((step, metric))
        log.info("step %d metric %.4f", step, metric)
        if metric > best:
            best, best_step, stale = metric, step, 0
            for k, p in params.items():
                best_params[k][...] = p.data
            return False
        stale += 1
        return stale > cfg.patience

    stop = ""
    for epoch in range(cfg.max_epochs):
        for batch in length_batches(lengths, cfg.batch_size, order_rng):
            packs = [train[i].pack for i in batch]
            targets = [train[i].target for i in batch]
            with nc.Tape() as tape:
                loss = model.loss(packs, targets, drop_rng)
            nc.zero_grads(params.values())
            tape.backward(loss)
            nc.adam_step(params, nc.param_grads(params), state)
            step += 1
            result.losses.append(loss.item())
            if step % cfg.eval_every_steps == 0 and run_eval():
                stop = "patience"
            elif cfg.max_steps is not None and step >= cfg.max_steps:
                stop = "max_steps"
            elif cfg.time_limit_s is not None and time.perf_counter() - started > cfg.time_limit_s:
                stop = "time_limit"
            if stop:
                break
        if stop:
            break
    else:
        stop = "max_epochs"
    if stop != "patience" and (not result.evals or result.evals[-1][0] != step):
        run_eval()
    for k, p in params.items():
        p.data[...] = best_params[k]
    result.best_metric, result.best_step, result.steps, result.stop_reason = best, best_step, step, stop
    return result


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def cfd_examples(records: Sequence[Subtask1Record], vocab: Vocab, max_len: int) -> list[Example]:
    return [Example(pack_classification(r.sentence, vocab, max_len), r.label, r.sentence_id) for r in records]


def cfd_probabilities(model: CfdModel, packs: Sequence[PackedSeq], batch_size: int = 64) -> np.ndarray:
    out = np.empty(len(packs))
    for batch in length_batches([len(p) for p in packs], batch_size):
        out[batch] = model.predict_proba([packs[i] for i in batch])
    return out


def cfd_f1(model: CfdModel, examples: Sequence[Example], threshold: float = 0.5) -> float:
    probs = cfd_probabilities(model, [ex.pack for ex in examples])
    preds = [predict(p, threshold) for p in probs]
    return binary_prf(preds, [ex.target for ex in examples]).f1


def train_cfd(
    records: Sequence[Subtask1Record],
    train_ids: Sequence[int],
    earlystop_ids: Sequence[int],
    vocab: Vocab,
    enc: EncoderConfig,
    cfg: TrainConfig,
    **model_kw,
) -> tuple[CfdModel, TrainResult]:
    if set(train_ids) & set(earlystop_ids):
        raise ConfigError("training and early-stopping ids overlap")
    model = CfdModel.create(enc, cfg.aggregation, seed=cfg.seed, **model_kw)
    examples = cfd_examples(records, vocab, enc.max_len)
    train = [examples[i] for i in train_ids]
    held = [examples[i] for i in earlystop_ids]
    result = fit(model, train, lambda: cfd_f1(model, held), cfg)
    return model, result


def train_ensemble(
    records: Sequence[Subtask1Record],
    plan: SplitPlan,
    vocab: Vocab,
    enc: EncoderConfig,
    cfg: TrainConfig,
    **model_kw,
) -> list[tuple[CfdModel, TrainResult]]:
    """One model per fold group: four folds train, the held-out fold early-stops."""
    out = []
    for k in range(len(plan.folds)):
        train_ids, stop_ids = plan.group(k)
        fold_cfg = TrainConfig(**{**cfg.__dict__, "seed": cfg.seed + k})
        out.append(train_cfd(records, train_ids, stop_ids, vocab, enc, fold_cfg, **model_kw))
    return out


def ensemble_predict(models: Sequence[CfdModel], packs: Sequence[PackedSeq], threshold: float = 0.5) -> list[int]:
    if len(models) != N_FOLDS:
        raise ConfigError(f"ensemble needs exactly {N_FOLDS} models, got {len(models)}")
    votes = [[predict(p, threshold) for p in cfd_probabilities(m, packs)] for m in models]
    return [ensemble_vote(col) for col in zip(*votes)]


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def qa_examples(
    records: Sequence[Subtask2Record], model: QaModel, vocab: Vocab
) -> tuple[list[Example], list[str]]:
    """Two examples (one per role) per record, plus ids whose gold fell outside the packed statement."""
    examples, flagged = [], []
    for r in records:
        for role in ROLES:
            pk = model.pack(role, r.sentence, vocab)
            gold = r.antecedent if role == "antecedent" else r.consequence
            slots = chars_to_slots(pk, gold)
            if gold is not None and slots is None:
                flagged.append(f"{r.sentence_id}:{role}")
            examples.append(Example(pk, slots, r.sentence_id, role))
    return examples, flagged


def qa_predict(
    model: QaModel, examples: Sequence[Example], batch_size: int = 64
) -> dict[str, tuple[tuple[int, int] | None, tuple[int, int] | None]]:
    """Predicted (antecedent, consequence) offsets keyed by sentence id."""
    found: dict[str, dict[str, tuple[int, int] | None]] = defaultdict(dict)
    for batch in length_batches([len(ex.pack) for ex in examples], batch_size):
        exs = [examples[i] for i in batch]
        preds = model.decode([ex.pack for ex in exs], [ex.role for ex in exs])
        for ex, pred in zip(exs, preds):
            found[ex.key][ex.role] = pred.offsets
    return {k: (v.get("antecedent"), v.get("consequence")) for k, v in found.items()}


def qa_em(model: QaModel, examples: Sequence[Example], golds: dict[str, SpanGold]) -> float:
    return score_extraction(qa_predict(model, examples), golds).em


def span_golds(records: Sequence[Subtask2Record]) -> dict[str, SpanGold]:
    return {r.sentence_id: SpanGold(r.antecedent, r.consequence) for r in records}


def train_qa(
    records: Sequence[Subtask2Record],
    train_ids: Sequence[int],
    earlystop_ids: Sequence[int],
    vocab: Vocab,
    enc: EncoderConfig,
    cfg: TrainConfig,
) -> tuple[QaModel, TrainResult]:
    if set(train_ids) & set(earlystop_ids):
        raise ConfigError("training and early-stopping ids overlap")
    model = QaModel.create(enc, cfg.query_kind, seed=cfg.seed, tau=cfg.tau)
    train_recs = [records[i] for i in train_ids]
    held_recs = [records[i] for i in earlystop_ids]
    train, flagged = qa_examples(train_recs, model, vocab)
    held, _ = qa_examples(held_recs, model, vocab)
    golds = span_golds(held_recs)
    result = fit(model, train, lambda: qa_em(model, held, golds), cfg)
    result.flagged = flagged
    if flagged:
        log.warning("%d gold spans fell beyond the packed statement; trained as null: %s", len(flagged), flagged[:10])
    return model, result
