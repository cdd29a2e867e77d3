"""Antecedent/consequence extraction as span selection over statement positions.

Slot 0 of every score vector is the [CLS] position and stands for "no span";
slots 1..n are the statement sub-tokens in order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .encoder import EncoderConfig, batch_arrays, encode_arrays, init_encoder_params
from .numcore import Tensor
from .tokenizer import PackedSeq, Vocab, pack_qa

ROLES = ("antecedent", "consequence")
QUERY_KINDS = ("name", "definition")

_QUERY_TEXT = {
    ("antecedent", "name"): "antecedent",
    ("consequence", "name"): "consequence",
    ("antecedent", "definition"): "a preceding event, condition, or cause",
    ("consequence", "definition"): "a result or effect",
}


class SpanError(ValueError):
    pass


@dataclass(frozen=True)
class Query:
    role: str
    kind: str
    text: str


def make_query(role: str, kind: str) -> Query:
    if (role, kind) not in _QUERY_TEXT:
        raise ValueError(f"unknown query role/kind {role!r}/{kind!r}")
    return Query(role, kind, _QUERY_TEXT[role, kind])


@dataclass(frozen=True)
class SpanPrediction:
    kind: str  # "span" or "null"
    score: float
    start_sub: int | None = None
    end_sub: int | None = None
    char_start: int | None = None
    char_end: int | None = None

    @property
    def is_null(self) -> bool:
        return self.kind == "null"

    @property
    def offsets(self) -> tuple[int, int] | None:
        return None if self.is_null else (self.char_start, self.char_end)


def init_boundary_params(d: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "qa.w_start": nc.parameter(rng.normal(0.0, 0.02, size=d), "qa.w_start"),
        "qa.w_end": nc.parameter(rng.normal(0.0, 0.02, size=d), "qa.w_end"),
    }


def boundary_scores(statement_hiddens: Tensor, c: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Start/end scores over [CLS] followed by the n statement positions."""
    if statement_hiddens.ndim != 2 or statement_hiddens.shape[0] < 1:
        raise SpanError(f"need a non-empty [n, d] statement matrix, got {statement_hiddens.shape}")
    rows = nc.concat([c.reshape(1, -1), statement_hiddens], axis=0)
    start = (rows @ params["qa.w_start"].reshape(-1, 1)).reshape(-1)
    end = (rows @ params["qa.w_end"].reshape(-1, 1)).reshape(-1)
    return start, end


def qa_loss(start_scores, end_scores, gold: tuple[int, int] | None) -> Tensor:
    """-(log P(start = j*) + log P(end = k*)); ``gold=None`` targets slot 0."""
    start_scores, end_scores = nc.as_tensor(start_scores), nc.as_tensor(end_scores)
    slots = start_scores.shape[-1]
    j, k = (0, 0) if gold is None else gold
    if not (0 <= j < slots and 0 <= k < slots):
        raise SpanError(f"gold slots {(j, k)} outside 0..{slots - 1}")
    ls = nc.log_softmax_lastdim(start_scores)
    le = nc.log_softmax_lastdim(end_scores)
    return (ls[j] + le[k]) * -1.0


def best_span(start: np.ndarray, end: np.ndarray) -> tuple[int, int, float]:
    """argmax of start[j] + end[k] over 1 <= j <= k < len; ties -> smaller j, then k."""
    n = len(start) - 1
    if n < 1:
        raise SpanError("no statement positions to decode")
    s = np.asarray(start[1:], dtype=np.float64)
    e = np.asarray(end[1:], dtype=np.float64)
    # best end at or after each start; reversed running argmax keeps the smallest k on ties
    best_e = np.empty(n)
    best_k = np.empty(n, dtype=np.int64)
    cur, cur_k = -np.inf, n - 1
    for k in range(n - 1, -1, -1):
        if e[k] >= cur:
            cur, cur_k = e[k], k
        best_e[k], best_k[k] = cur, cur_k
    totals = s + best_e
    j = int(np.argmax(totals))
    return j + 1, int(best_k[j]) + 1, float(totals[j])


def decode_span(start_scores, end_scores, tau: float = 0.0, allow_null: bool = True) -> SpanPrediction:
    start = np.asarray(getattr(start_scores, "data", start_scores), dtype=np.float64)
    end = np.asarray(getattr(end_scores, "data", end_scores), dtype=np.float64)
    j, k, score = best_span(start, end)
    null_score = float(start[0] + end[0])
    if allow_null and not score > null_score + tau:
        return SpanPrediction("null", null_score)
    return SpanPrediction("span", score, j, k)


def span_to_chars(span: tuple[int, int], packed: PackedSeq) -> tuple[int, int]:
    """Character offsets for statement sub-token indices (0-based within the statement)."""
    positions = packed.statement_positions
    a, b = span
    if not (0 <= a <= b < len(positions)):
        raise SpanError(f"span {span} outside statement of {len(positions)} sub-tokens")
    return packed.char_spans[positions[a]][0], packed.char_spans[positions[b]][1]


def resolve(pred: SpanPrediction, packed: PackedSeq) -> SpanPrediction:
    """Attach character offsets to a decoded span (slot indices are 1-based)."""
    if pred.is_null:
        return pred
    a, b = pred.start_sub - 1, pred.end_sub - 1
    cs, ce = span_to_chars((a, b), packed)
    return SpanPrediction("span", pred.score, a, b, cs, ce)


def chars_to_slots(packed: PackedSeq, span: tuple[int, int] | None) -> tuple[int, int] | None:
    """Gold character span -> (start slot, end slot); None if absent or not covered."""
    if span is None:
        return None
    cs, ce = span
    j = k = None
    for slot, pos in enumerate(packed.statement_positions, start=1):
        a, b = packed.char_spans[pos]
        if j is None and b > cs:
            j = slot
        if a < ce:
            k = slot
    if j is None or k is None or k < j:
        return None
    if packed.char_spans[packed.statement_positions[k - 1]][1] < ce:
        return None  # gold runs past the truncated statement
    return j, k


@dataclass
class QaModel:
    enc: EncoderConfig
    params: dict[str, Tensor]
    query_kind: str = "definition"
    tau: float = 0.0

    kind = "qa"

    @classmethod
    def create(cls, enc: EncoderConfig, query_kind: str = "definition", seed: int = 0, tau: float = 0.0) -> QaModel:
        if query_kind not in QUERY_KINDS:
            raise ValueError(f"query kind must be one of {QUERY_KINDS}, got {query_kind!r}")
        rng = np.random.default_rng(seed)
        params = init_encoder_params(enc, rng)
        params.update(init_boundary_params(enc.hidden, rng))
        return cls(enc, params, query_kind, tau)

    def head_config(self) -> dict:
        return {"query_kind": self.query_kind, "tau": self.tau}

    def pack(self, role: str, statement: str, vocab: Vocab) -> PackedSeq:
        return pack_qa(make_query(role, self.query_kind).text, statement, vocab, self.enc.max_len)

    def slot_scores(self, packs: Sequence[PackedSeq], rng: np.random.Generator | None = None):
        """Start/end scores over all T positions [B, T], non-slot positions masked to -inf."""
        ids, segs = batch_arrays(packs)
        final = encode_arrays(ids, segs, self.params, self.enc, rng).final
        B, T, d = final.shape
        start = (final @ self.params["qa.w_start"].reshape(d, 1)).reshape(B, T)
        end = (final @ self.params["qa.w_end"].reshape(d, 1)).reshape(B, T)
        excluded = ~np.array([pk.statement_mask for pk in packs], dtype=bool)
        excluded[:, 0] = False
        return nc.masked_fill(start, excluded, -np.inf), nc.masked_fill(end, excluded, -np.inf)

    def loss(self, packs: Sequence[PackedSeq], golds: Sequence[tuple[int, int] | None], rng=None) -> Tensor:
        """Mean over the batch of the start+end negative log-likelihood."""
        start, end = self.slot_scores(packs, rng)
        rows = np.arange(len(packs))
        js, ks = [], []
        for pk, gold in zip(packs, golds):
            positions = [0] + pk.statement_positions
            j, k = (0, 0) if gold is None else gold
            js.append(positions[j])
            ks.append(positions[k])
        ls = nc.log_softmax_lastdim(start)[rows, np.array(js)]
        le = nc.log_softmax_lastdim(end)[rows, np.array(ks)]
        return nc.tsum(ls + le) * (-1.0 / len(packs))

    def slots(self, packs: Sequence[PackedSeq]) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-example (start, end) slot score vectors of length n+1."""
        start, end = self.slot_scores(packs)
        out = []
        for b, pk in enumerate(packs):
            positions = [0] + pk.statement_positions
            out.append((start.data[b, positions].copy(), end.data[b, positions].copy()))
        return out

    def decode(self, packs: Sequence[PackedSeq], roles: Sequence[str]) -> list[SpanPrediction]:
        preds = []
        for pk, role, (s, e) in zip(packs, roles, self.slots(packs)):
            pred = decode_span(s, e, self.tau, allow_null=(role != "antecedent"))
            preds.append(resolve(pred, pk))
        return preds


def extract(
    statement: str,
    model: QaModel,
    vocab: Vocab,
    kind: str | None = None,
    tau: float | None = None,
) -> dict[str, SpanPrediction]:
    """Answer the antecedent and consequence queries independently for one statement."""
    kind = kind or model.query_kind
    tau = model.tau if tau is None else tau
    out = {}
    for role in ROLES:
        pk = pack_qa(make_query(role, kind).text, statement, vocab, model.enc.max_len)
        (s, e), = model.slots([pk])
        out[role] = resolve(decode_span(s, e, tau, allow_null=(role != "antecedent")), pk)
    return out
