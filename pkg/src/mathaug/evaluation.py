"""Grading, accuracy, step-binned analysis, and accuracy-table analytics."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from typing import Iterable, Optional

from .corpus import AnswerKind, AnswerValue, MathProblem, normalize_boxed, normalize_number

log = logging.getLogger(__name__)

STEP_BINS = ("<4", "4-7", ">=8")

_MARKER = re.compile(r"####\s*([^\n]*)")
_LAST_NUMBER = re.compile(r"[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?:/\d+)?")
_BOXED = re.compile(r"\\boxed\{")


def round2(value: float) -> float:
    """Two-decimal half-up rounding, matching reported-score formatting."""
    return float(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _last_boxed(text: str) -> Optional[str]:
    last = None
    for m in _BOXED.finditer(text):
        depth = 1
        j = m.end()
        while j < len(text) and depth:
            if text[j] == "{":
                depth += 1
            elif text[j] == "}":
                depth -= 1
            j += 1
        if depth == 0:
            last = text[m.end() : j - 1]
    return last


def extract_answer(output_text: str) -> Optional[AnswerValue]:
    """Pull the final answer out of a model completion.

    Precedence: the last `#### <value>` marker, then the last \\boxed group,
    then the last numeric token anywhere. None when nothing matches.
    """
    markers = _MARKER.findall(output_text)
    if markers:
        value = markers[-1].strip()
        if value:
            return normalize_number(value)
    boxed = _last_boxed(output_text)
    if boxed is not None:
        return normalize_boxed(boxed)
    numbers = _LAST_NUMBER.findall(output_text)
    if numbers:
        return normalize_number(numbers[-1])
    return None


def answers_equal(a: AnswerValue, b: AnswerValue) -> bool:
    """Exact rational equality for numerics; normalized string equality otherwise."""
    if a.kind is AnswerKind.NUMERIC and b.kind is AnswerKind.NUMERIC:
        return a.numeric == b.numeric
    if a.kind is AnswerKind.SYMBOLIC and b.kind is AnswerKind.SYMBOLIC:
        return " ".join(a.literal.split()) == " ".join(b.literal.split())
    return False


@dataclass(frozen=True)
class Prediction:
    problem_id: str
    output_text: str


@dataclass(frozen=True)
class ExampleResult:
    problem_id: str
    extracted: Optional[AnswerValue]
    correct: bool


@dataclass(frozen=True)
class EvalResult:
    per_example: tuple[ExampleResult, ...]
    accuracy: float  # percentage, 2 decimals, half-up

    @property
    def n_correct(self) -> int:
        return sum(1 for r in self.per_example if r.correct)


def grade(predictions: Iterable[Prediction], corpus: list[MathProblem]) -> EvalResult:
    """Accuracy over the corpus; missing or duplicate predictions grade incorrect."""
    by_id = {p.id: p for p in corpus}
    outputs: dict[str, Prediction] = {}
    for pred in predictions:
        if pred.problem_id not in by_id:
            log.warning("eval: prediction for unknown id %s ignored", pred.problem_id)
            continue
        if pred.problem_id in outputs:
            log.warning("eval: duplicate prediction for %s, keeping the first", pred.problem_id)
            continue
        outputs[pred.problem_id] = pred

    per_example = []
    for problem in corpus:
        pred = outputs.get(problem.id)
        if pred is None:
            log.warning("eval: no prediction for %s, graded incorrect", problem.id)
            per_example.append(ExampleResult(problem.id, None, False))
            continue
        extracted = extract_answer(pred.output_text)
        correct = extracted is not None and answers_equal(extracted, problem.gold_answer)
        per_example.append(ExampleResult(problem.id, extracted, correct))

    n = len(per_example)
    pct = round2(100.0 * sum(r.correct for r in per_example) / n) if n else 0.0
    return EvalResult(tuple(per_example), pct)


def step_bin(step_count: int) -> str:
    if step_count <= 3:
        return "<4"
    if step_count <= 7:
        return "4-7"
    return ">=8"


@dataclass(frozen=True)
class StepBinReport:
    bins: dict  # bin label -> {"count": int, "correct": int, "accuracy": float}

    def total(self) -> int:
        return sum(entry["count"] for entry in self.bins.values())


def bin_by_steps(result: EvalResult, corpus: list[MathProblem]) -> StepBinReport:
    """Bucket per-example results by the gold rationale's step count."""
    by_id = {p.id: p for p in corpus}
    bins = {label: {"count": 0, "correct": 0, "accuracy": 0.0} for label in STEP_BINS}
    for example in result.per_example:
        problem = by_id[example.problem_id]
        label = step_bin(len(problem.rationale.steps))
        bins[label]["count"] += 1
        bins[label]["correct"] += int(example.correct)
    for entry in bins.values():
        if entry["count"]:
            entry["accuracy"] = round2(100.0 * entry["correct"] / entry["count"])
    return StepBinReport(bins)


# ---------------------------------------------------------------------------
# Accuracy-table analytics

@dataclass
class AccuracyTable:
    """Accuracy grid: rows are (method, model), columns are dataset names."""

    datasets: list[str]
    rows: dict = field(default_factory=dict)  # (method, model) -> {dataset: float}

    def add(self, method: str, model: str, scores: dict) -> None:
        self.rows[(method, model)] = dict(scores)

    def models_for(self, method: str) -> list[str]:
        return [model for (m, model) in self.rows if m == method]

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyTable":
        reader = csv.DictReader(io.StringIO(text))
        fields = reader.fieldnames or []
        datasets = [f for f in fields if f not in ("method", "model")]
        table = cls(datasets=datasets)
        for row in reader:
            scores = {d: float(row[d]) for d in datasets if row[d] != ""}
            table.add(row["method"], row["model"], scores)
        return table

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["method", "model"] + self.datasets)
        for (method, model), scores in self.rows.items():
            writer.writerow([method, model] + [scores.get(d, "") for d in self.datasets])
        return out.getvalue()


def mean_improvement(
    table: AccuracyTable, baseline: str, method: str
) -> dict:
    """Per-dataset mean of (method − baseline) over the models both share."""
    models = [m for m in table.models_for(baseline) if (method, m) in table.rows]
    if not models:
        raise ValueError(f"no shared models between {baseline!r} and {method!r}")
    deltas = {}
    for dataset in table.datasets:
        diffs = [
            table.rows[(method, m)][dataset] - table.rows[(baseline, m)][dataset]
            for m in models
            if dataset in table.rows[(method, m)] and dataset in table.rows[(baseline, m)]
        ]
        if diffs:
            deltas[dataset] = round2(sum(diffs) / len(diffs))
    return deltas


def render_table(table: AccuracyTable, title: str = "") -> str:
    """Fixed-width text rendering of an accuracy grid."""
    headers = ["method", "model"] + table.datasets
    rows = [
        [method, model] + [f"{scores.get(d, float('nan')):.2f}" for d in table.datasets]
        for (method, model), scores in table.rows.items()
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def load_predictions(path: str) -> list[Prediction]:
    predictions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            predictions.append(Prediction(str(obj["problem_id"]), obj["output_text"]))
    return predictions
