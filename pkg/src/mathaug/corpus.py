"""Data model and parsers for math word-problem records.

Supports four on-disk formats (GSM8K, MATH, GSM8K-Hard, SVAMP) and a canonical
internal JSONL schema. Parsing is lossless: the original record bytes are
retained so serialization round-trips exactly, and rationale segmentation
records its delimiters so step text can be reassembled byte-for-byte.
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Optional

log = logging.getLogger(__name__)


class CorpusError(Exception):
    """Base for record-level parse failures. Carries the offending record id."""

    def __init__(self, message: str, record_id: str = "?"):
        super().__init__(f"record {record_id}: {message}")
        self.record_id = record_id


class MissingMarker(CorpusError):
    pass


class MissingSteps(CorpusError):
    pass


class MalformedAnnotation(CorpusError):
    pass


class NoBoxedAnswer(CorpusError):
    pass


class AmbiguousBoxed(CorpusError):
    pass


class Source(str, Enum):
    GSM8K = "gsm8k"
    MATH = "math"
    GSM_HARD = "gsm_hard"
    SVAMP = "svamp"


class AnswerKind(str, Enum):
    NUMERIC = "numeric"
    SYMBOLIC = "symbolic"


@dataclass(frozen=True)
class AnswerValue:
    kind: AnswerKind
    literal: str
    numeric: Optional[Fraction] = None

    def __post_init__(self):
        if self.kind is AnswerKind.NUMERIC and self.numeric is None:
            raise ValueError("numeric answer requires a rational value")


@dataclass(frozen=True)
class CalcAnnotation:
    """One inline `<<expression=value>>` arithmetic claim within a step."""

    expression: str
    claimed_value: str
    span: tuple[int, int]  # [start, end) offsets of the full <<...>> in the step text

    def render(self) -> str:
        return f"<<{self.expression}={self.claimed_value}>>"


@dataclass(frozen=True)
class Step:
    text: str
    annotations: tuple[CalcAnnotation, ...] = ()
    index: int = 0


@dataclass(frozen=True)
class Rationale:
    """Ordered reasoning steps plus the recorded inter-step delimiters.

    ``leading`` holds any text folded off the front (e.g. blank lines);
    ``delimiters[i]`` is the text that followed ``steps[i]`` in the source.
    """

    steps: tuple[Step, ...]
    delimiters: tuple[str, ...]
    leading: str = ""
    final_marker: Optional[str] = None

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ValueError("rationale requires at least one step")
        if len(self.delimiters) != len(self.steps):
            raise ValueError("one delimiter per step required")

    def text(self) -> str:
        parts = [self.leading]
        for step, delim in zip(self.steps, self.delimiters):
            parts.append(step.text)
            parts.append(delim)
        if self.final_marker is not None:
            parts.append(self.final_marker)
        return "".join(parts)

    def step_texts(self) -> list[str]:
        return [s.text for s in self.steps]


@dataclass(frozen=True)
class MathProblem:
    id: str
    source: Source
    question: str
    rationale: Rationale
    gold_answer: AnswerValue
    raw: Optional[bytes] = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# Number normalization

_CURRENCY = "$€£¥"
_GROUPED = re.compile(r"\d{1,3}(?:,\d{3})+(?:\.\d+)?")
_PLAIN = re.compile(r"(?:\d+(?:\.\d+)?|\.\d+)")
_FRACTION = re.compile(r"(\d+)\s*/\s*(\d+)")


def normalize_number(text: str, percent_as_fraction: bool = False) -> AnswerValue:
    """Parse ``text`` into an exact rational when possible, else keep it symbolic.

    Strips surrounding whitespace, currency symbols, and thousands separators.
    Percent signs make the value symbolic unless ``percent_as_fraction`` is set.
    Total: never raises.
    """
    literal = text
    s = text.strip()

    percent = False
    if s.endswith("%"):
        if not percent_as_fraction:
            return AnswerValue(AnswerKind.SYMBOLIC, literal)
        percent = True
        s = s[:-1].strip()

    sign = ""
    if s and s[0] in "+-":
        sign, s = s[0], s[1:].lstrip()
    while s and s[0] in _CURRENCY:
        s = s[1:].lstrip()
    if not sign and s and s[0] in "+-":
        sign, s = s[0], s[1:].lstrip()

    value: Optional[Fraction] = None
    if _GROUPED.fullmatch(s):
        value = Fraction(s.replace(",", ""))
    elif _PLAIN.fullmatch(s):
        value = Fraction(s)
    else:
        m = _FRACTION.fullmatch(s)
        if m and int(m.group(2)) != 0:
            value = Fraction(int(m.group(1)), int(m.group(2)))

    if value is None:
        return AnswerValue(AnswerKind.SYMBOLIC, literal)
    if sign == "-":
        value = -value
    if percent:
        value = value / 100
    return AnswerValue(AnswerKind.NUMERIC, literal, value)


def render_number(value: Fraction) -> str:
    """Render a rational the way these corpora write numbers.

    Integers render bare; terminating decimals render with the minimal number
    of digits; everything else falls back to ``a/b``.
    """
    if value.denominator == 1:
        return str(value.numerator)
    den = value.denominator
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den == 1:
        digits = max(twos, fives)
        scaled = abs(value) * 10**digits  # integral by construction
        body = str(scaled.numerator).rjust(digits + 1, "0")
        sign = "-" if value < 0 else ""
        return f"{sign}{body[:-digits]}.{body[-digits:]}"
    return f"{value.numerator}/{value.denominator}"


# ---------------------------------------------------------------------------
# Annotation extraction

_ANNOTATION = re.compile(r"<<([^<>=]*)=([^<>]*)>>")


def find_annotations(text: str, record_id: str = "?") -> tuple[CalcAnnotation, ...]:
    """Extract `<<expr=value>>` annotations from a step, in offset order.

    Raises MalformedAnnotation when `<<` / `>>` appear outside a well-formed
    annotation (unbalanced or missing `=`).
    """
    annotations = []
    covered = []
    for m in _ANNOTATION.finditer(text):
        annotations.append(CalcAnnotation(m.group(1), m.group(2), (m.start(), m.end())))
        covered.append((m.start(), m.end()))
    leftover = text
    for start, end in reversed(covered):
        leftover = leftover[:start] + leftover[end:]
    if "<<" in leftover or ">>" in leftover:
        raise MalformedAnnotation("unbalanced or malformed << >> annotation", record_id)
    return tuple(annotations)


def strip_annotations(text: str) -> str:
    return _ANNOTATION.sub("", text)


# ---------------------------------------------------------------------------
# Step segmentation

_GSM_DELIM = re.compile(r"\n")
_MATH_DELIM = re.compile(r"(?<=[.!?])\s+|\n")


def segment_steps(text: str, source: Source, record_id: str = "?") -> Rationale:
    """Split rationale text into steps, recording delimiters for round-trip.

    GSM8K-family sources split on newlines; MATH additionally splits after
    sentence-final punctuation. Empty/whitespace segments are folded into the
    neighboring delimiter, never emitted as steps.
    """
    if not text:
        raise MissingSteps("empty rationale text", record_id)
    pattern = _MATH_DELIM if source is Source.MATH else _GSM_DELIM

    pieces: list[tuple[str, str]] = []  # (segment, trailing delimiter)
    pos = 0
    for m in pattern.finditer(text):
        pieces.append((text[pos : m.start()], m.group(0)))
        pos = m.end()
    pieces.append((text[pos:], ""))

    leading = ""
    steps: list[Step] = []
    delimiters: list[str] = []
    for segment, delim in pieces:
        if segment == "" or segment.isspace():
            if delimiters:
                delimiters[-1] += segment + delim
            else:
                leading += segment + delim
            continue
        steps.append(
            Step(segment, find_annotations(segment, record_id), index=len(steps))
        )
        delimiters.append(delim)

    if not steps:
        raise MissingSteps("rationale has no steps", record_id)
    return Rationale(tuple(steps), tuple(delimiters), leading=leading)


# ---------------------------------------------------------------------------
# Format parsers

_MARKER_PREFIX = "####"


def parse_gsm8k_record(
    record: dict,
    record_id: str,
    source: Source = Source.GSM8K,
    raw: Optional[bytes] = None,
) -> MathProblem:
    """Parse a GSM8K-style {"question", "answer"} object.

    The answer's last line must be a `#### <value>` marker; preceding lines
    become the rationale steps.
    """
    question = record["question"]
    answer = record["answer"]

    head, sep, last = answer.rpartition("\n")
    if not last.startswith(_MARKER_PREFIX):
        raise MissingMarker("no '####' final-answer line", record_id)
    marker_value = last[len(_MARKER_PREFIX) :].strip()
    body = head + sep
    rationale = segment_steps(body, source, record_id) if body else None
    if rationale is None:
        raise MissingSteps("answer has a marker but no reasoning steps", record_id)
    rationale = Rationale(
        rationale.steps, rationale.delimiters, rationale.leading, final_marker=last
    )
    if raw is None:
        raw = (json.dumps(record, ensure_ascii=False) + "\n").encode("utf-8")
    return MathProblem(
        id=record_id,
        source=source,
        question=question,
        rationale=rationale,
        gold_answer=normalize_number(marker_value),
        raw=raw,
    )


_BOXED = "\\boxed{"
_FRAC_TEX = re.compile(r"\\[dt]?frac\{(-?\d+)\}\{(-?\d+)\}")


def _find_boxed(solution: str, record_id: str) -> str:
    """Return the content of the single outermost \\boxed{...} group."""
    groups = []
    i = 0
    while True:
        start = solution.find(_BOXED, i)
        if start < 0:
            break
        depth = 1
        j = start + len(_BOXED)
        while j < len(solution) and depth:
            if solution[j] == "{":
                depth += 1
            elif solution[j] == "}":
                depth -= 1
            j += 1
        if depth:
            raise NoBoxedAnswer("unterminated \\boxed group", record_id)
        groups.append((start, j, solution[start + len(_BOXED) : j - 1]))
        i = j
    outer = [g for g in groups if not any(o[0] < g[0] and g[1] <= o[1] for o in groups)]
    if not outer:
        raise NoBoxedAnswer("no \\boxed answer in solution", record_id)
    if len(outer) > 1:
        raise AmbiguousBoxed(f"{len(outer)} outermost \\boxed groups", record_id)
    return outer[0][2]


def normalize_boxed(content: str) -> AnswerValue:
    """Normalize boxed content, mapping simple \\frac{a}{b} to a/b first."""
    m = _FRAC_TEX.fullmatch(content.strip())
    if m:
        candidate = f"{m.group(1)}/{m.group(2)}"
        parsed = normalize_number(candidate)
        if parsed.kind is AnswerKind.NUMERIC:
            return AnswerValue(AnswerKind.NUMERIC, content, parsed.numeric)
    parsed = normalize_number(content)
    if parsed.kind is AnswerKind.NUMERIC:
        return parsed
    return AnswerValue(AnswerKind.SYMBOLIC, content)


def parse_math_record(
    record: dict, record_id: str, raw: Optional[bytes] = None
) -> MathProblem:
    """Parse a MATH-style {"problem", "solution", ...} object."""
    question = record["problem"]
    solution = record["solution"]
    boxed = _find_boxed(solution, record_id)
    rationale = segment_steps(solution, Source.MATH, record_id)
    if raw is None:
        raw = (json.dumps(record, ensure_ascii=False) + "\n").encode("utf-8")
    return MathProblem(
        id=record_id,
        source=Source.MATH,
        question=question,
        rationale=rationale,
        gold_answer=normalize_boxed(boxed),
        raw=raw,
    )


def parse_svamp_record(
    record: dict, record_id: str, raw: Optional[bytes] = None
) -> MathProblem:
    """Parse an SVAMP-style {"Body", "Question", "Equation", "Answer"} object.

    Body and Question are concatenated with a single space; the equation is
    the (single) rationale step.
    """
    question = f"{record['Body']} {record['Question']}"
    equation = str(record["Equation"]).strip()
    if not equation:
        raise MissingSteps("empty Equation field", record_id)
    rationale = segment_steps(equation, Source.SVAMP, record_id)
    answer = record["Answer"]
    if isinstance(answer, (int, float)):
        gold = AnswerValue(AnswerKind.NUMERIC, str(answer), Fraction(str(answer)))
    else:
        gold = normalize_number(str(answer))
    if raw is None:
        raw = (json.dumps(record, ensure_ascii=False) + "\n").encode("utf-8")
    return MathProblem(
        id=record_id,
        source=Source.SVAMP,
        question=question,
        rationale=rationale,
        gold_answer=gold,
        raw=raw,
    )


def parse_gsm_hard_record(
    record: dict, record_id: str, raw: Optional[bytes] = None
) -> MathProblem:
    """Parse a GSM8K-Hard {"input", "code", "target"} object.

    Records that instead carry question/answer fields are parsed like GSM8K.
    """
    if "question" in record and "answer" in record:
        return parse_gsm8k_record(record, record_id, source=Source.GSM_HARD, raw=raw)
    question = record["input"]
    code = record.get("code", "")
    if not code or not code.strip():
        raise MissingSteps("no solution code in record", record_id)
    rationale = segment_steps(code, Source.GSM_HARD, record_id)
    target = record["target"]
    if isinstance(target, (int, float)):
        gold = AnswerValue(AnswerKind.NUMERIC, str(target), Fraction(str(target)))
    else:
        gold = normalize_number(str(target))
    if raw is None:
        raw = (json.dumps(record, ensure_ascii=False) + "\n").encode("utf-8")
    return MathProblem(
        id=record_id,
        source=Source.GSM_HARD,
        question=question,
        rationale=rationale,
        gold_answer=gold,
        raw=raw,
    )


_PARSERS = {
    Source.GSM8K: parse_gsm8k_record,
    Source.MATH: parse_math_record,
    Source.GSM_HARD: parse_gsm_hard_record,
    Source.SVAMP: parse_svamp_record,
}


def apply_field_mapping(record: dict, mapping: Optional[dict]) -> dict:
    """Rename incoming fields per a {canonical_name: source_name} mapping."""
    if not mapping:
        return record
    out = dict(record)
    for canonical, actual in mapping.items():
        if actual in record and canonical not in record:
            out[canonical] = record[actual]
    return out


# ---------------------------------------------------------------------------
# Serialization

def serialize_record(problem: MathProblem) -> bytes:
    """Original record bytes for ingested problems; canonical JSONL otherwise."""
    if problem.raw is not None:
        return problem.raw
    return (to_canonical_json(problem) + "\n").encode("utf-8")


def answer_to_json(answer: AnswerValue) -> dict:
    out = {"kind": answer.kind.value, "literal": answer.literal}
    if answer.numeric is not None:
        out["numeric"] = [answer.numeric.numerator, answer.numeric.denominator]
    return out


def answer_from_json(obj: dict) -> AnswerValue:
    numeric = obj.get("numeric")
    return AnswerValue(
        AnswerKind(obj["kind"]),
        obj["literal"],
        Fraction(numeric[0], numeric[1]) if numeric else None,
    )


def to_canonical_json(problem: MathProblem) -> str:
    obj = {
        "id": problem.id,
        "source": problem.source.value,
        "question": problem.question,
        "steps": [
            {"text": s.text, "sep": d}
            for s, d in zip(problem.rationale.steps, problem.rationale.delimiters)
        ],
        "annotations": [
            [
                {"expr": a.expression, "value": a.claimed_value, "span": list(a.span)}
                for a in s.annotations
            ]
            for s in problem.rationale.steps
        ],
        "gold_answer": answer_to_json(problem.gold_answer),
        "raw": problem.raw.decode("utf-8") if problem.raw is not None else None,
    }
    if problem.rationale.leading:
        obj["leading"] = problem.rationale.leading
    if problem.rationale.final_marker is not None:
        obj["final_marker"] = problem.rationale.final_marker
    return json.dumps(obj, ensure_ascii=False)


def from_canonical_json(line: str) -> MathProblem:
    obj = json.loads(line)
    steps = []
    delimiters = []
    for i, (entry, anns) in enumerate(zip(obj["steps"], obj["annotations"])):
        annotations = tuple(
            CalcAnnotation(a["expr"], a["value"], tuple(a["span"])) for a in anns
        )
        steps.append(Step(entry["text"], annotations, index=i))
        delimiters.append(entry["sep"])
    rationale = Rationale(
        tuple(steps),
        tuple(delimiters),
        leading=obj.get("leading", ""),
        final_marker=obj.get("final_marker"),
    )
    raw = obj.get("raw")
    return MathProblem(
        id=obj["id"],
        source=Source(obj["source"]),
        question=obj["question"],
        rationale=rationale,
        gold_answer=answer_from_json(obj["gold_answer"]),
        raw=raw.encode("utf-8") if raw is not None else None,
    )


# ---------------------------------------------------------------------------
# Corpus I/O

@dataclass
class IngestReport:
    parsed: int = 0
    skipped: int = 0
    diagnostics: list[str] = field(default_factory=list)


def ingest_lines(
    lines: Iterable[str],
    source: Source,
    mapping: Optional[dict] = None,
    id_prefix: Optional[str] = None,
) -> tuple[list[MathProblem], IngestReport]:
    """Parse raw JSONL lines; unparseable records are skipped and counted."""
    parser = _PARSERS[source]
    prefix = id_prefix or source.value
    problems: list[MathProblem] = []
    report = IngestReport()
    seen_ids: set[str] = set()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            record = apply_field_mapping(record, mapping)
            record_id = str(record.get("id", f"{prefix}-{line_no:06d}"))
            if record_id in seen_ids:
                raise CorpusError("duplicate id", record_id)
            raw_line = (line if line.endswith("\n") else line + "\n").encode("utf-8")
            problem = parser(record, record_id, raw=raw_line)
        except (CorpusError, KeyError, ValueError, TypeError) as exc:
            report.skipped += 1
            diag = f"line {line_no}: skipped ({exc})"
            report.diagnostics.append(diag)
            log.warning("ingest: %s", diag)
            continue
        seen_ids.add(problem.id)
        problems.append(problem)
        report.parsed += 1
    if report.skipped:
        log.warning("ingest: skipped %d of %d records", report.skipped, line_no)
    return problems, report


def ingest_file(
    path: str, source: Source, mapping: Optional[dict] = None
) -> tuple[list[MathProblem], IngestReport]:
    with open(path, encoding="utf-8") as fh:
        return ingest_lines(fh, source, mapping)


def atomic_write(path: str, data: bytes) -> None:
    """Write via a temp file + rename so failed runs never leave partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_corpus(problems: Iterable[MathProblem], path: str, header: Optional[dict] = None) -> None:
    lines = []
    if header is not None:
        lines.append(json.dumps(header, ensure_ascii=False, sort_keys=True))
    lines.extend(to_canonical_json(p) for p in problems)
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_corpus(path: str) -> list[MathProblem]:
    problems = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            if i == 0 and '"schema_version"' in line and '"id"' not in line:
                continue  # header line
            problems.append(from_canonical_json(line))
    return problems
