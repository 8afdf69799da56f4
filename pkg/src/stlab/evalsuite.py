"""Deterministic evaluation: MCQ accuracy, the three-part rubric and report tables.

The rubric replaces an LLM judge with a strict parser for the canonical
description grammar plus normalized edit distance:

    description := clause ("; " clause)* "."
    clause      := move | turn
    move        := "go straight for " INT " steps" [" past the " NAME] [" and " ACTION]
    turn        := "turn " ("left" | "right") [" at the " NAME]
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .routeworld import Route, Turn, all_actions, all_landmarks, landmark_sequence, turn_sequence
from .seqmodel import DEFAULT_VOCAB, Params, Vocab, greedy_batch
from .taskgen import Dataset, OPTION_LETTERS, Polarity, QAItem, TaskKind, describe, oriented

log = logging.getLogger(__name__)

FAMILIES: tuple[tuple[TaskKind, Polarity], ...] = tuple(
    (k, p) for k in TaskKind for p in Polarity
)
ST_FAMILIES = tuple(f for f in FAMILIES if f[0] in (TaskKind.ROUTE_DESC, TaskKind.DIRECTION_MCQ))

# ---------------------------------------------------------------------------
# parsing

_NAMES = sorted(all_landmarks(), key=len, reverse=True)
_ACTIONS = sorted(all_actions(), key=len, reverse=True)
_INT = re.compile(r"[0-9]+")


@dataclass(frozen=True)
class ParsedDescription:
    turns: list[Turn]
    landmarks: list[str]
    actions: list[str]
    clause_count: int


@dataclass(frozen=True)
class ParseFailure:
    offset: int
    reason: str

    def __bool__(self) -> bool:
        return False


class _Fail(Exception):
    def __init__(self, offset: int, reason: str):
        self.offset = offset
        self.reason = reason


class _Cursor:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def peek(self, lit: str) -> bool:
        return self.text.startswith(lit, self.pos)

    def take(self, lit: str) -> None:
        if not self.peek(lit):
            raise _Fail(self.pos, f"expected {lit!r}")
        self.pos += len(lit)

    def take_one_of(self, choices: Sequence[str], what: str) -> str:
        for c in choices:
            if self.peek(c):
                self.pos += len(c)
                return c
        raise _Fail(self.pos, f"expected {what}")


def parse_description(text: str) -> ParsedDescription | ParseFailure:
    cur = _Cursor(text)
    turns: list[Turn] = []
    landmarks: list[str] = []
    actions: list[str] = []
    clauses = 0
    prev_move = False
    try:
        while True:
            if cur.peek("go straight for "):
                cur.take("go straight for ")
                m = _INT.match(text, cur.pos)
                if m is None:
                    raise _Fail(cur.pos, "expected step count")
                cur.pos = m.end()
                cur.take(" steps")
                if cur.peek(" past the "):
                    cur.take(" past the ")
                    landmarks.append(cur.take_one_of(_NAMES, "landmark name"))
                if cur.peek(" and "):
                    cur.take(" and ")
                    actions.append(cur.take_one_of(_ACTIONS, "action"))
                if prev_move:
                    turns.append(Turn.STRAIGHT)
                prev_move = True
            elif cur.peek("turn "):
                cur.take("turn ")
                word = cur.take_one_of(("left", "right"), "'left' or 'right'")
                turns.append(Turn(word))
                if cur.peek(" at the "):
                    cur.take(" at the ")
                    landmarks.append(cur.take_one_of(_NAMES, "landmark name"))
                prev_move = False
            else:
                raise _Fail(cur.pos, "expected a clause")
            clauses += 1
            if cur.peek("; "):
                cur.take("; ")
                continue
            cur.take(".")
            if cur.pos != len(text):
                raise _Fail(cur.pos, "trailing text after '.'")
            break
    except _Fail as exc:
        return ParseFailure(exc.offset, exc.reason)
    return ParsedDescription(turns, landmarks, actions, clauses)


# ---------------------------------------------------------------------------
# rubric

def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(pred: Sequence, truth: Sequence) -> float:
    denom = max(len(pred), len(truth))
    if denom == 0:
        return 0.0
    return levenshtein(pred, truth) / denom


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class RubricScore:
    direction: int
    landmark: int
    semantic: int

    @property
    def percent(self) -> float:
        return 100.0 * (self.direction + self.landmark + self.semantic) / 15.0


def rubric_score(prediction: str, route: Route, polarity: Polarity) -> RubricScore:
    parsed = parse_description(prediction)
    if isinstance(parsed, ParseFailure):
        return RubricScore(0, 0, 0)
    truth = oriented(route, polarity)
    true_clauses = parse_description(describe(route, polarity))
    direction = round_half_up(5 * (1 - normalized_edit_distance(parsed.turns, turn_sequence(truth))))
    landmark = round_half_up(5 * (1 - normalized_edit_distance(parsed.landmarks, landmark_sequence(truth))))
    semantic = 5 if parsed.clause_count == true_clauses.clause_count else 3
    return RubricScore(direction, landmark, semantic)


# ---------------------------------------------------------------------------
# predictions and accuracy

_ANSWER = re.compile(r"<answer>\s*(.*?)\s*</answer>", re.S)


def extract_answer(completion: str) -> str | None:
    """Text inside the first <answer>...</answer> pair, or ``None``."""
    m = _ANSWER.search(completion)
    return m.group(1) if m else None


def extract_letter(completion: str) -> str | None:
    inner = extract_answer(completion)
    if inner is None:
        return None
    first = inner.split()[0] if inner.split() else ""
    return first if first in OPTION_LETTERS else None


@dataclass(frozen=True)
class Prediction:
    id: str
    text: str

    @property
    def extracted(self) -> str | None:
        return extract_answer(self.text)


class EvalError(KeyError):
    pass


def _resolve(predictions: Iterable[Prediction], dataset: Dataset):
    items = dataset.by_id()
    for p in predictions:
        if p.id not in items:
            raise EvalError(f"prediction for unknown item {p.id!r}")
        yield p, items[p.id]


def mcq_accuracy(predictions: Iterable[Prediction], dataset: Dataset) -> dict[tuple[TaskKind, Polarity], float]:
    hits: dict[tuple[TaskKind, Polarity], list[int]] = {}
    for pred, item in _resolve(predictions, dataset):
        if not item.kind.is_mcq:
            continue
        ok = extract_letter(pred.text) == item.correct_letter
        hits.setdefault(item.family, []).append(int(ok))
    return {fam: 100.0 * sum(v) / len(v) for fam, v in hits.items()}


def rubric_table(predictions: Iterable[Prediction], dataset: Dataset) -> dict[tuple[TaskKind, Polarity], float]:
    scores: dict[tuple[TaskKind, Polarity], list[float]] = {}
    for pred, item in _resolve(predictions, dataset):
        if item.kind is not TaskKind.ROUTE_DESC:
            continue
        text = pred.extracted if pred.extracted is not None else pred.text
        route = dataset.routes[item.route_id]
        scores.setdefault(item.family, []).append(rubric_score(text, route, item.polarity).percent)
    return {fam: sum(v) / len(v) for fam, v in scores.items()}


def evaluate(predictions: Sequence[Prediction], dataset: Dataset) -> dict[tuple[TaskKind, Polarity], float]:
    results = mcq_accuracy(predictions, dataset)
    results.update(rubric_table(predictions, dataset))
    return results


# ---------------------------------------------------------------------------
# reports

def family_name(family: tuple[TaskKind, Polarity]) -> str:
    return f"{family[0].value}/{family[1].value}"


@dataclass
class EvalReport:
    label: str
    scores: dict[tuple[TaskKind, Polarity], float]
    avg_st: float | None
    avg_total: float | None
    flags: list[str]

    def row(self) -> dict[str, str]:
        row = {"checkpoint": self.label}
        for fam in FAMILIES:
            row[family_name(fam)] = f"{self.scores[fam]:.1f}" if fam in self.scores else ""
        row["Avg(ST)"] = "" if self.avg_st is None else f"{self.avg_st:.1f}"
        row["Avg(Total)"] = "" if self.avg_total is None else f"{self.avg_total:.1f}"
        return row

    def to_json(self) -> dict:
        return {
            "checkpoint": self.label,
            "scores": {family_name(f): v for f, v in self.scores.items()},
            "avg_st": self.avg_st,
            "avg_total": self.avg_total,
            "flags": self.flags,
        }


CSV_COLUMNS = ["checkpoint"] + [family_name(f) for f in FAMILIES] + ["Avg(ST)", "Avg(Total)"]


def report(results: Mapping[tuple[TaskKind, Polarity], float], label: str = "model") -> EvalReport:
    if not results:
        raise ValueError("report needs at least one family")
    flags = []
    missing = [f for f in FAMILIES if f not in results]
    if missing:
        msg = "missing families excluded from averages: " + ", ".join(family_name(f) for f in missing)
        log.warning(msg)
        flags.append(msg)
    st = [results[f] for f in ST_FAMILIES if f in results]
    if st and len(st) < len(ST_FAMILIES):
        flags.append("Avg(ST) computed over available families only: "
                     + ", ".join(family_name(f) for f in ST_FAMILIES if f in results))
    total = [results[f] for f in FAMILIES if f in results]
    return EvalReport(
        label=label,
        scores=dict(results),
        avg_st=sum(st) / len(st) if st else None,
        avg_total=sum(total) / len(total),
        flags=flags,
    )


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def generate_predictions(params: Params, items: Sequence[QAItem], max_len: int = 160,
                         vocab: Vocab = DEFAULT_VOCAB, chunk: int = 256) -> list[Prediction]:
    """Greedy completions for ``items``, decoded to text."""
    out = []
    for start in range(0, len(items), chunk):
        part = items[start:start + chunk]
        ids = greedy_batch(params, [vocab.encode(it.prompt) for it in part], max_len, vocab)
        out.extend(Prediction(it.id, vocab.decode(y)) for it, y in zip(part, ids))
    return out


def load_predictions(path) -> list[Prediction]:
    with open(path, encoding="utf-8") as fh:
        return [Prediction(d["id"], d["text"]) for d in (json.loads(l) for l in fh if l.strip())]


def dump_predictions(predictions: Sequence[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(json.dumps({"id": p.id, "text": p.text}, ensure_ascii=False) + "\n")
