"""Acceptance criteria, one test each.  Every test prints a PASS/FAIL line."""

import itertools
import json
import math
import time
from collections import Counter
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from cfx import numcore as nc
from cfx.cfd_head import CfdModel
from cfx.checkpoint import CheckpointFormatError, checkpoint_from_model, dumps, loads, model_from_checkpoint
from cfx.encoder import EncoderConfig, encode, mix_weights
from cfx.evalmetrics import SpanGold, binary_prf, exact_match, score_extraction, token_f1
from cfx.qa_head import QUERY_KINDS, ROLES, QaModel, decode_span, make_query
from cfx.synth import SynthConfig, generate_synthetic, train_test_split
from cfx.tokenizer import SPECIALS, build_vocab, pack_classification
from cfx.trainer import (
    TrainConfig,
    cfd_examples,
    cfd_f1,
    ensemble_vote,
    qa_examples,
    qa_predict,
    span_golds,
    split_folds,
    train_cfd,
    train_qa,
)

from conftest import ACCEPTANCE_LINES
from gradcheck import TOL, group_errors

FIXTURE = Path(__file__).parent / "fixtures" / "metrics_fixture.json"
CPU_BUDGET_S = 600.0


def report(capsys, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# -- gradient suite ----------------------------------------------------------


def test_gradient_suite(capsys, small_vocab):
    started = time.perf_counter()
    enc = EncoderConfig(vocab_size=len(small_vocab), layers=2, hidden=8, heads=2, ffn=16, max_len=40, dropout=0.0, init_std=0.3)
    worst: dict[str, float] = {}

    cfd = CfdModel.create(enc, "cls+cnn", seed=1)
    rng = np.random.default_rng(0)
    for p in cfd.params.values():
        p.data += rng.normal(0, 0.1, size=p.shape)  # move mix/classifier off their symmetric init
    packs = [pack_classification(s, small_vocab, 40) for s in ("the doctor had checked", "the team had read")]
    assert len(packs[0]) == len(packs[1])
    err = group_errors(lambda: cfd.loss(packs, [1, 0]), cfd.params, max_entries=40)
    worst.update({f"cfd/{k}": v for k, v in err.items()})

    qa = QaModel.create(enc, "definition", seed=2)
    qpacks = [qa.pack("consequence", s, small_vocab) for s in ("the doctor had checked", "the team had read")]
    err = group_errors(lambda: qa.loss(qpacks, [(2, 3), None]), qa.params, max_entries=40)
    worst.update({f"qa/{k}": v for k, v in err.items()})

    elapsed = time.perf_counter() - started
    name, top = max(worst.items(), key=lambda kv: kv[1])
    ok = top <= TOL and elapsed < 60 and len(worst) == len(cfd.params) + len(qa.params)
    report(capsys, "gradient suite", ok, f"{len(worst)} groups, max rel err {top:.2e} ({name}), {elapsed:.1f}s")


# -- decode oracle -----------------------------------------------------------


def enumerate_decode(start, end):
    best, arg = -math.inf, None
    for j in range(1, len(start)):
        for k in range(j, len(start)):
            if start[j] + end[k] > best:
                best, arg = start[j] + end[k], (j, k)
    return None if best <= start[0] + end[0] else arg


def test_decode_oracle(capsys):
    rng = np.random.default_rng(2024)
    agree = 0
    for i in range(200):
        n = int(rng.integers(1, 13))
        if i % 2:
            s, e = rng.normal(size=n + 1), rng.normal(size=n + 1)
        else:  # coarse integer scores exercise the tie rules
            s, e = rng.integers(-2, 3, size=n + 1).astype(float), rng.integers(-2, 3, size=n + 1).astype(float)
        pred = decode_span(s, e)
        got = None if pred.is_null else (pred.start_sub, pred.end_sub)
        agree += got == enumerate_decode(s, e)
    report(capsys, "decode oracle", agree == 200, f"{agree}/200 agree with exhaustive enumeration")


# -- normalization -----------------------------------------------------------


def test_normalization(capsys, small_vocab, small_corpus):
    enc = EncoderConfig(vocab_size=len(small_vocab), layers=2, hidden=8, heads=2, ffn=16, max_len=64, dropout=0.0)
    qa = QaModel.create(enc, seed=0)
    rng = np.random.default_rng(1)
    slot_dev = mix_dev = att_dev = 0.0
    for rec in small_corpus[1][:30]:
        pk = qa.pack("consequence", rec.sentence, small_vocab)
        start, end = qa.slot_scores([pk])
        for scores in (start, end):
            probs = nc.softmax_lastdim(scores).data[0]
            n_slots = int(np.isfinite(scores.data[0]).sum())
            assert n_slots == len(pk.statement_positions) + 1
            slot_dev = max(slot_dev, abs(probs.sum() - 1.0))
        for att in encode(pk, qa.params, enc, keep_attention=True).attentions:
            att_dev = max(att_dev, float(np.abs(att.sum(axis=-1) - 1.0).max()))
    cfd = CfdModel.create(enc, "cnn", seed=0)
    for _ in range(30):
        cfd.params["mix.logits"].data[:] = rng.normal(0, 5, size=enc.layers + 1)
        mix_dev = max(mix_dev, abs(mix_weights(cfd.params).sum() - 1.0))
    ok = slot_dev <= 1e-12 and mix_dev <= 1e-12 and att_dev <= 1e-12
    report(capsys, "normalization", ok, f"max |sum-1|: slots {slot_dev:.1e}, mix {mix_dev:.1e}, attention {att_dev:.1e}")


# -- synthetic learning ------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic():
    s1, s2 = generate_synthetic(SynthConfig(seed=7))
    tr1, te1 = train_test_split(s1, 500)
    tr2, te2 = train_test_split(s2, 500)
    queries = [make_query(r, k).text for r in ROLES for k in QUERY_KINDS]
    vocab = build_vocab([r.sentence for r in tr1 + tr2] + queries, 512)
    return tr1, te1, tr2, te2, vocab


def test_learning_detection(capsys, synthetic):
    tr1, te1, _, _, vocab = synthetic
    assert (len(tr1), len(te1)) == (2000, 500)
    enc = EncoderConfig(vocab_size=len(vocab), layers=4, hidden=128, max_len=128)
    cfg = TrainConfig(aggregation="cnn", eval_every_steps=50, patience=3, max_epochs=4, seed=7, time_limit_s=CPU_BUDGET_S - 60)
    cpu = time.process_time()
    model, res = train_cfd(tr1, list(range(1800)), list(range(1800, 2000)), vocab, enc, cfg)
    f1 = cfd_f1(model, cfd_examples(te1, vocab, enc.max_len))
    cpu = time.process_time() - cpu
    ok = f1 >= 0.95 and cpu <= CPU_BUDGET_S
    report(capsys, "learning, detection", ok, f"held-out F1 {f1:.4f} after {res.steps} steps, {cpu:.0f} CPU-s")


def test_learning_extraction(capsys, synthetic):
    _, _, tr2, te2, vocab = synthetic
    assert (len(tr2), len(te2)) == (2000, 500)
    enc = EncoderConfig(vocab_size=len(vocab), layers=4, hidden=128, max_len=128)
    cfg = TrainConfig(query_kind="definition", eval_every_steps=100, patience=3, max_epochs=4, seed=7, time_limit_s=CPU_BUDGET_S - 60)
    cpu = time.process_time()
    model, res = train_qa(tr2, list(range(1800)), list(range(1800, 2000)), vocab, enc, cfg)
    examples, _ = qa_examples(te2, model, vocab)
    preds = qa_predict(model, examples)
    golds = span_golds(te2)
    em = score_extraction(preds, golds).em
    nulls = [k for k, g in golds.items() if g.consequence is None]
    null_acc = sum(preds[k][1] is None for k in nulls) / len(nulls)
    cpu = time.process_time() - cpu
    ok = em >= 0.90 and null_acc >= 0.90 and cpu <= CPU_BUDGET_S
    detail = f"held-out EM {em:.4f}, null accuracy {null_acc:.4f} on {len(nulls)} items, {res.steps} steps, {cpu:.0f} CPU-s"
    report(capsys, "learning, extraction", ok, detail)


# -- protocol ----------------------------------------------------------------


def test_protocol_fidelity(capsys):
    plan = split_folds(13_000, 1_500, seed=0)
    sizes = [len(f) for f in plan.folds]
    patterns = list(itertools.product((0, 1), repeat=5))
    votes_ok = all(ensemble_vote(v) == Counter(v).most_common(1)[0][0] for v in patterns)
    ok = sizes == [2_300] * 5 and len(plan.dev) == 1_500 and votes_ok
    report(capsys, "protocol fidelity", ok, f"fold sizes {sizes}; vote == mode on {len(patterns)} patterns: {votes_ok}")


# -- metric fixtures ---------------------------------------------------------


def test_metric_fixtures(capsys):
    data = json.loads(FIXTURE.read_text())
    worst = 0.0
    em_ok = True
    b = data["binary"]
    m = binary_prf(b["preds"], b["golds"])
    for key in ("precision", "recall", "f1"):
        worst = max(worst, abs(getattr(m, key) - float(Fraction(b["expected"][key]))))
    for item in data["extraction"]:
        gold = SpanGold(tuple(item["gold"][0]), tuple(item["gold"][1]) if item["gold"][1] else None)
        pred = tuple(tuple(p) if p else None for p in item["pred"])
        em_ok &= exact_match(pred, gold) == item["em"]
        s = token_f1(pred, gold)
        for key in ("precision", "recall", "f1"):
            worst = max(worst, abs(getattr(s, key) - float(Fraction(item[key]))))
    ok = em_ok and worst <= 1e-12
    report(capsys, "metric fixtures", ok, f"{len(data['extraction'])} instances, EM exact: {em_ok}, max deviation {worst:.1e}")


# -- persistence -------------------------------------------------------------


def test_persistence(capsys, small_vocab):
    enc = EncoderConfig(vocab_size=len(small_vocab), layers=2, hidden=16, heads=2, ffn=32, max_len=40, dropout=0.1)
    cfd = CfdModel.create(enc, "cls+cnn", seed=4, cnn_filters=20)
    qa = QaModel.create(enc, seed=5)
    cfd_blob = dumps(checkpoint_from_model(cfd, small_vocab))
    qa_blob = dumps(checkpoint_from_model(qa, small_vocab))
    cfd2, qa2 = model_from_checkpoint(loads(cfd_blob)), model_from_checkpoint(loads(qa_blob))
    words = [t for t in small_vocab.tokens if t not in SPECIALS and not t.startswith("##")]
    rng = np.random.default_rng(6)
    same = 0
    for _ in range(100):
        text = " ".join(rng.choice(words, size=int(rng.integers(1, 15))))
        pk = [pack_classification(text, small_vocab, 40)]
        qk = [qa.pack("consequence", text, small_vocab)]
        a = cfd.predict_proba(pk).tobytes() == cfd2.predict_proba(pk).tobytes()
        (s1, e1), (s2, e2) = qa.slots(qk)[0], qa2.slots(qk)[0]
        same += a and s1.tobytes() == s2.tobytes() and e1.tobytes() == e2.tobytes()
    rejected = 0
    corruptions = [cfd_blob[:-9], cfd_blob[:20]]
    flipped = bytearray(cfd_blob)
    flipped[len(flipped) // 2 + 100] ^= 0x01
    corruptions.append(bytes(flipped))
    for bad in corruptions:
        try:
            loads(bad)
        except CheckpointFormatError:
            rejected += 1
    ok = same == 100 and rejected == len(corruptions)
    report(capsys, "persistence", ok, f"{same}/100 bit-identical, {rejected}/{len(corruptions)} corrupted files rejected")
