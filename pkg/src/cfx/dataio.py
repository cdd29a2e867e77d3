"""Task records, CSV reading/writing and key=value config files.

Offsets are character indices into the sentence with an exclusive end.  An
absent consequence is written as ``-1,-1``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

SUBTASK1_COLUMNS = ("sentenceID", "gold_label", "sentence")
SUBTASK2_COLUMNS = (
    "sentenceID",
    "sentence",
    "antecedent_startid",
    "antecedent_endid",
    "consequent_startid",
    "consequent_endid",
)
ABSENT = -1


class DataError(ValueError):
    """Malformed input data; the message names the offending row."""


@dataclass(frozen=True)
class Subtask1Record:
    sentence_id: str
    sentence: str
    label: int


@dataclass(frozen=True)
class Subtask2Record:
    sentence_id: str
    sentence: str
    antecedent: tuple[int, int]
    consequence: tuple[int, int] | None

    def text(self, role: str) -> str | None:
        span = self.antecedent if role == "antecedent" else self.consequence
        return None if span is None else self.sentence[span[0] : span[1]]


def _read_rows(path, columns: tuple[str, ...]) -> Iterable[tuple[int, dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            # header is line 1
            yield reader.line_num, row


def _int(row: dict[str, str], col: str, line: int) -> int:
    raw = (row.get(col) or "").strip()
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"row {line}: {col}={raw!r} is not an integer") from None


def check_span(span: tuple[int, int], sentence: str, what: str, line: int) -> None:
    s, e = span
    if not (0 <= s < e <= len(sentence)):
        raise DataError(f"row {line}: {what} span [{s},{e}) outside sentence of length {len(sentence)}")
    if not sentence[s:e].strip():
        raise DataError(f"row {line}: {what} span [{s},{e}) is blank")


def read_subtask1_csv(path) -> list[Subtask1Record]:
    out = []
    for line, row in _read_rows(path, SUBTASK1_COLUMNS):
        label = _int(row, "gold_label", line)
        if label not in (0, 1):
            raise DataError(f"row {line}: gold_label must be 0 or 1, got {label}")
        sentence = row["sentence"] or ""
        if not sentence.strip():
            raise DataError(f"row {line}: empty sentence")
        out.append(Subtask1Record(row["sentenceID"], sentence, label))
    return out


def read_subtask2_csv(path) -> list[Subtask2Record]:
    out = []
    for line, row in _read_rows(path, SUBTASK2_COLUMNS):
        sentence = row["sentence"] or ""
        if not sentence.strip():
            raise DataError(f"row {line}: empty sentence")
        ant = (_int(row, "antecedent_startid", line), _int(row, "antecedent_endid", line))
        check_span(ant, sentence, "antecedent", line)
        cons = (_int(row, "consequent_startid", line), _int(row, "consequent_endid", line))
        if cons == (ABSENT, ABSENT):
            cons = None
        else:
            check_span(cons, sentence, "consequence", line)
        out.append(Subtask2Record(row["sentenceID"], sentence, ant, cons))
    return out


def read_sentences(path) -> list[tuple[str, str]]:
    """(sentenceID, sentence) pairs from any CSV carrying those two columns."""
    out = []
    for line, row in _read_rows(path, ("sentenceID", "sentence")):
        sentence = row["sentence"] or ""
        if not sentence.strip():
            raise DataError(f"row {line}: empty sentence")
        out.append((row["sentenceID"], sentence))
    return out


def _write(path, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_subtask1_csv(path, records: Iterable[Subtask1Record]) -> None:
    _write(path, SUBTASK1_COLUMNS, ([r.sentence_id, r.label, r.sentence] for r in records))


def write_subtask2_csv(path, records: Iterable[Subtask2Record]) -> None:
    def row(r: Subtask2Record):
        cons = r.consequence or (ABSENT, ABSENT)
        return [r.sentence_id, r.sentence, r.antecedent[0], r.antecedent[1], cons[0], cons[1]]

    _write(path, SUBTASK2_COLUMNS, (row(r) for r in records))


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; keys use dashes or underscores."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out
