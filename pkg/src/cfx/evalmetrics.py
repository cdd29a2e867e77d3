"""Binary P/R/F1 for detection; exact match and offset-overlap P/R/F1 for extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

Span = tuple[int, int]


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, p: float, r: float) -> PRF:
        return cls(p, r, 2 * p * r / (p + r) if p + r > 0 else 0.0)


@dataclass(frozen=True)
class SpanGold:
    antecedent: Span
    consequence: Span | None


def binary_prf(preds: Sequence[int], golds: Sequence[int]) -> PRF:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions vs {len(golds)} gold labels")
    tp = sum(1 for p, g in zip(preds, golds) if p == 1 and g == 1)
    fp = sum(1 for p, g in zip(preds, golds) if p == 1 and g == 0)
    fn = sum(1 for p, g in zip(preds, golds) if p == 0 and g == 1)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return PRF.from_pr(p, r)


def exact_match(pred: tuple[Span | None, Span | None], gold: SpanGold) -> int:
    ant, cons = pred
    return int(ant == gold.antecedent and cons == gold.consequence)


def role_prf(pred: Span | None, gold: Span | None) -> PRF:
    """Overlap of character-offset sets; absent/absent counts as perfect."""
    if pred is None or gold is None:
        return PRF(1.0, 1.0, 1.0) if pred is None and gold is None else PRF(0.0, 0.0, 0.0)
    inter = max(0, min(pred[1], gold[1]) - max(pred[0], gold[0]))
    p = inter / (pred[1] - pred[0]) if pred[1] > pred[0] else 0.0
    r = inter / (gold[1] - gold[0]) if gold[1] > gold[0] else 0.0
    return PRF.from_pr(p, r)


def token_f1(pred: tuple[Span | None, Span | None], gold: SpanGold) -> PRF:
    """Per-instance scores: each of P, R, F1 averaged over the two roles."""
    a = role_prf(pred[0], gold.antecedent)
    c = role_prf(pred[1], gold.consequence)
    return PRF((a.precision + c.precision) / 2, (a.recall + c.recall) / 2, (a.f1 + c.f1) / 2)


@dataclass(frozen=True)
class ExtractionScores:
    em: float
    precision: float
    recall: float
    f1: float


def score_extraction(
    preds: Mapping[str, tuple[Span | None, Span | None]],
    golds: Mapping[str, SpanGold],
) -> ExtractionScores:
    """Corpus EM and macro-averaged offset P/R/F1 over the gold instances.

    A gold instance with no prediction counts as both roles predicted absent.
    """
    if not golds:
        raise ValueError("no gold instances to score")
    em = p = r = f = 0.0
    for key, gold in golds.items():
        pred = preds.get(key, (None, None))
        em += exact_match(pred, gold)
        s = token_f1(pred, gold)
        p += s.precision
        r += s.recall
        f += s.f1
    n = len(golds)
    return ExtractionScores(em / n, p / n, r / n, f / n)


def format_report(metrics: Mapping[str, float]) -> str:
    return "".join(f"{k}={v:.4f}\n" for k, v in metrics.items())

