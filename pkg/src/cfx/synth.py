"""Template grammar for a synthetic counterfactual corpus with gold offsets.

Counterfactual sentences follow the shape "<outcome> could have been avoided
if <agent> had <done something>" in several clause orders.  The antecedent
is the conditional clause (including its connective) and the consequence is
the hypothesised outcome clause.  Negatives are declaratives and real
(non-counterfactual) conditionals.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .dataio import Subtask1Record, Subtask2Record

AGENTS = (
    "the doctor", "her mother", "the team", "my brother", "the city council",
    "our neighbors", "the pilot", "the company", "his teacher", "the government",
    "the students", "the coach", "the engineers", "my friend", "the committee",
    "the captain", "their lawyer", "the nurse", "the mayor", "the driver",
)

# (base, past, past participle, object)
ACTIONS = (
    ("prescribe", "prescribed", "prescribed", "the right medicine"),
    ("check", "checked", "checked", "the brakes"),
    ("read", "read", "read", "the contract"),
    ("heed", "heeded", "heeded", "the warnings"),
    ("buy", "bought", "bought", "better equipment"),
    ("call", "called", "called", "an ambulance"),
    ("repair", "repaired", "repaired", "the old bridge"),
    ("test", "tested", "tested", "the water supply"),
    ("follow", "followed", "followed", "the evacuation plan"),
    ("sign", "signed", "signed", "the peace treaty"),
    ("hire", "hired", "hired", "more staff"),
    ("update", "updated", "updated", "the software"),
    ("close", "closed", "closed", "the schools"),
    ("build", "built", "built", "a stronger levee"),
    ("review", "reviewed", "reviewed", "the budget"),
    ("inspect", "inspected", "inspected", "the wiring"),
)

WHEN = (
    "", " two months earlier", " last year", " in time", " before the storm",
    " a week sooner", " at the start", " years ago",
)

OUTCOMES = (
    "her stress", "the accident", "the crash", "the flood damage", "the outbreak",
    "the loss", "the delay", "the injury", "the fire", "the shortage",
    "the lawsuit", "the collapse", "the blackout", "the strike",
)

# (perfect form for counterfactuals, simple form for real conditionals)
RESULTS = (
    ("could have been avoided", "can be avoided"),
    ("would have been prevented", "will be prevented"),
    ("might have been smaller", "may be smaller"),
    ("would never have happened", "will not happen"),
    ("could have been stopped", "can be stopped"),
)

NEGATIVE_LINKS = ("because", "after", "although", "when")


@dataclass(frozen=True)
class SynthConfig:
    n_counterfactual: int = 1250
    n_declarative: int = 1250
    n_extraction: int = 2500
    null_fraction: float = 0.1464
    seed: int = 7

    def __post_init__(self):
        if not 0.0 <= self.null_fraction <= 1.0:
            raise ValueError("null_fraction must lie in [0, 1]")
        if min(self.n_counterfactual, self.n_declarative, self.n_extraction) < 1:
            raise ValueError("instance counts must be >= 1")


def null_quota(n: int, fraction: float) -> int:
    return int(round(n * fraction))


def _cap(s: str) -> str:
    return s[:1].upper() + s[1:]


class _Builder:
    """Concatenates pieces while recording the offsets of marked pieces."""

    def __init__(self):
        self.parts: list[str] = []
        self.pos = 0
        self.spans: dict[str, tuple[int, int]] = {}

    def add(self, text: str, mark: str | None = None) -> _Builder:
        if mark:
            self.spans[mark] = (self.pos, self.pos + len(text))
        self.parts.append(text)
        self.pos += len(text)
        return self

    def text(self) -> str:
        return "".join(self.parts)


def _antecedent_body(rng: random.Random) -> str:
    _, _, pp, obj = rng.choice(ACTIONS)
    return f"{rng.choice(AGENTS)} had {pp} {obj}{rng.choice(WHEN)}"


def _consequence(rng: random.Random) -> str:
    return f"{rng.choice(OUTCOMES)} {rng.choice(RESULTS)[0]}"


def counterfactual(rng: random.Random, with_consequence: bool) -> tuple[str, tuple[int, int], tuple[int, int] | None]:
    b = _Builder()
    if with_consequence:
        form = rng.randrange(3)
        if form == 0:
            b.add(_cap(_consequence(rng)), "c").add(" ").add("if " + _antecedent_body(rng), "a")
        elif form == 1:
            b.add("If " + _antecedent_body(rng), "a").add(", ").add(_consequence(rng), "c")
        else:
            _, _, pp, obj = rng.choice(ACTIONS)
            ant = f"Had {rng.choice(AGENTS)} {pp} {obj}{rng.choice(WHEN)}"
            b.add(ant, "a").add(", ").add(_consequence(rng), "c")
    elif rng.random() < 0.5:
        b.add("If only " + _antecedent_body(rng), "a")
    else:
        b.add("I wish " + _antecedent_body(rng), "a")
    b.add(".")
    return b.text(), b.spans["a"], b.spans.get("c")


def declarative(rng: random.Random) -> str:
    base, past, pp, obj = rng.choice(ACTIONS)
    agent = rng.choice(AGENTS)
    outcome = rng.choice(OUTCOMES)
    form = rng.randrange(4)
    if form == 0:
        s = f"{_cap(agent)} {past} {obj}{rng.choice(WHEN)}"
    elif form == 1:
        s = f"{_cap(agent)} had {pp} {obj} {rng.choice(NEGATIVE_LINKS)} {outcome} began"
    elif form == 2:
        s = f"If {agent} can {base} {obj}, {outcome} {rng.choice(RESULTS)[1]}"
    else:
        s = f"{_cap(outcome)} {rng.choice(RESULTS)[1]} if {agent} will {base} {obj}"
    return s + "."


def generate_synthetic(config: SynthConfig = SynthConfig()) -> tuple[list[Subtask1Record], list[Subtask2Record]]:
    """Deterministic corpora for both subtasks; sentences are unique across both."""
    rng = random.Random(config.seed)
    seen: set[str] = set()

    def fresh(make):
        for _ in range(10_000):
            out = make()
            sentence = out if isinstance(out, str) else out[0]
            if sentence not in seen:
                seen.add(sentence)
                return out
        raise RuntimeError("synthetic grammar exhausted; lower the instance counts")

    def null_flags(n: int) -> list[bool]:
        k = null_quota(n, config.null_fraction)
        flags = [True] * k + [False] * (n - k)
        rng.shuffle(flags)
        return flags

    sub1: list[tuple[str, int]] = []
    for is_null in null_flags(config.n_counterfactual):
        sub1.append((fresh(lambda: counterfactual(rng, not is_null))[0], 1))
    for _ in range(config.n_declarative):
        sub1.append((fresh(lambda: declarative(rng)), 0))
    rng.shuffle(sub1)
    records1 = [Subtask1Record(f"s1-{i:06d}", s, y) for i, (s, y) in enumerate(sub1)]

    records2 = []
    for i, is_null in enumerate(null_flags(config.n_extraction)):
        s, a, c = fresh(lambda: counterfactual(rng, not is_null))
        records2.append(Subtask2Record(f"s2-{i:06d}", s, a, c))
    return records1, records2


def train_test_split(records: list, n_test: int) -> tuple[list, list]:
    if not 0 <= n_test < len(records):
        raise ValueError(f"n_test {n_test} must be in [0, {len(records)})")
    return records[: len(records) - n_test], records[len(records) - n_test :]
