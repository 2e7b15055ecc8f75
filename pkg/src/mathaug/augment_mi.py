"""Mistake-injection instances: corrupt reasoning steps with exact labels.

Two corruption families: perturbing a numeric token, and flipping an
arithmetic operator inside an inline annotation. Corruptions are reversible
(the original step text is stored) and, in the default stale-value mode,
detectable by the exact-arithmetic verifier, which makes the labels
machine-checkable ground truth.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Union

from . import calc
from .corpus import MathProblem, Step, find_annotations, normalize_number, render_number
from .corpus import AnswerKind
from .seeding import record_rng, record_seed

log = logging.getLogger(__name__)

_SEED_NAMESPACE = "mi"
_OPERATORS = "+-*/"
_NUMERIC_TOKEN = re.compile(r"(?<![\d.])\d+(?:\.\d+)?(?![\d.])")
_REDRAWS = 16
_FLIP_REDRAWS = 8


class CorruptionError(Exception):
    pass


class NoNumericToken(CorruptionError):
    pass


class NoOperator(CorruptionError):
    pass


class NoSafeFlip(CorruptionError):
    pass


class NothingCorruptible(CorruptionError):
    pass


@dataclass(frozen=True)
class NumericPerturb:
    which_operand: int  # index among the step's eligible numeric tokens
    delta: int

    kind = "numeric"


@dataclass(frozen=True)
class OperatorFlip:
    annotation_index: int
    position: int  # offset of the operator within the annotation expression
    from_op: str
    to_op: str

    kind = "operator"

    def __post_init__(self):
        if self.from_op == self.to_op:
            raise ValueError("flip must change the operator")


CorruptionKind = Union[NumericPerturb, OperatorFlip]


@dataclass(frozen=True)
class Corruption:
    step_index: int
    kind: CorruptionKind
    original_text: str


@dataclass(frozen=True)
class MIInstance:
    problem_id: str
    steps: tuple[str, ...]
    labels: tuple[bool, ...]  # True = erroneous
    corruptions: tuple[Corruption, ...]
    seed: int

    def __post_init__(self):
        if len(self.labels) != len(self.steps):
            raise ValueError("one label per step required")
        corrupted = {c.step_index for c in self.corruptions}
        if corrupted != {i for i, flag in enumerate(self.labels) if flag}:
            raise ValueError("labels must mark exactly the corrupted steps")

    def erroneous_indices(self) -> list[int]:
        return [i for i, flag in enumerate(self.labels) if flag]


@dataclass(frozen=True)
class MIPolicy:
    corruptions_per_instance: int = 1
    numeric_ratio: float = 0.5  # kind mix when both kinds are feasible
    p_negative: float = 0.5  # chance of emitting an all-correct instance
    recompute: bool = False  # rewrite claimed values so corrupt steps stay self-consistent


# ---------------------------------------------------------------------------
# Token / operator discovery

def _numeric_tokens(step: Step) -> list[re.Match]:
    """Numeric tokens eligible for perturbation.

    On annotation-bearing steps only tokens touching an annotation qualify, so
    a stale-value corruption is always visible to the verifier.
    """
    matches = list(_NUMERIC_TOKEN.finditer(step.text))
    if not step.annotations:
        return matches
    spans = [a.span for a in step.annotations]
    return [
        m
        for m in matches
        if any(start <= m.start() and m.end() <= end for start, end in spans)
    ]


def _operator_sites(step: Step) -> list[tuple[int, int]]:
    """(annotation_index, offset-in-expression) for each binary operator."""
    sites = []
    for ann_index, ann in enumerate(step.annotations):
        expr = ann.expression
        for pos, ch in enumerate(expr):
            if ch not in _OPERATORS:
                continue
            prev = expr[:pos].rstrip()
            if not prev or prev[-1] in _OPERATORS or prev[-1] == "(":
                continue  # leading or unary context, not a binary operator
            sites.append((ann_index, pos))
    return sites


def _replace_token(text: str, token: str, replacement: str) -> str:
    pattern = re.compile(rf"(?<![\d.]){re.escape(token)}(?![\d.])")
    return pattern.sub(replacement, text)


def _render_perturbed(original_token: str, value: Fraction) -> str:
    if "." in original_token and value.denominator > 1:
        return render_number(value)
    return render_number(value)


def _recompute_claims(text: str, record_id: str = "?") -> str:
    """Re-derive each annotation's claimed value so the step is self-consistent.

    The old claimed token is replaced globally so prose echoes of the value
    stay in sync with the annotation.
    """
    for _ in range(32):  # cap: each pass fixes one stale claim
        for ann in find_annotations(text, record_id):
            try:
                expected = calc.evaluate(ann.expression)
            except calc.CalcError:
                continue
            claimed = normalize_number(ann.claimed_value)
            if claimed.kind is AnswerKind.NUMERIC and claimed.numeric == expected:
                continue
            if not ann.claimed_value.strip():
                continue
            updated = _replace_token(text, ann.claimed_value, render_number(expected))
            if updated == text:
                continue
            text = updated
            break  # spans moved; rescan
        else:
            return text
    return text


def _delta_candidates(value: Fraction) -> list[int]:
    tenth = abs(value) / 10
    ten_pct = math.ceil(tenth) if tenth > 0 else 0  # away from zero
    candidates = {1, -1, 2, -2, ten_pct, -ten_pct}
    return sorted(d for d in candidates if d != 0)


def _stale_annotations_differ(step: Step, new_text: str, record_id: str) -> bool:
    """True when every rewritten annotation now fails verification."""
    new_annotations = find_annotations(new_text, record_id)
    if len(new_annotations) != len(step.annotations):
        return False
    for old, new in zip(step.annotations, new_annotations):
        if old == new or (old.expression == new.expression and old.claimed_value == new.claimed_value):
            continue
        if calc.verify_annotation(new).status is not calc.VerifyStatus.INCONSISTENT:
            return False
    return True


# ---------------------------------------------------------------------------
# Corruption operators

def _corrupt_numeric(
    step: Step, rng, recompute: bool, record_id: str = "?"
) -> tuple[str, NumericPerturb]:
    tokens = _numeric_tokens(step)
    if not tokens:
        raise NoNumericToken(f"step {step.index}: no numeric token")

    for _ in range(_REDRAWS):
        which = rng.randrange(len(tokens))
        token = tokens[which].group(0)
        value = Fraction(token)
        delta = rng.choice(_delta_candidates(value))
        new_value = value + delta
        if value >= 0 and value.denominator == 1 and new_value < 0:
            continue  # keep non-negative integer counts non-negative
        replacement = _render_perturbed(token, new_value)
        if replacement == token:
            continue
        new_text = _replace_token(step.text, token, replacement)
        if new_text == step.text:
            continue
        if recompute:
            new_text = _recompute_claims(new_text, record_id)
            if new_text == step.text:
                continue
        elif step.annotations and not _stale_annotations_differ(step, new_text, record_id):
            continue  # perturbation happened to preserve the claimed value
        return new_text, NumericPerturb(which_operand=which, delta=delta)
    raise NoNumericToken(f"step {step.index}: no safe numeric perturbation found")


def _corrupt_operator(
    step: Step, rng, recompute: bool, record_id: str = "?"
) -> tuple[str, OperatorFlip]:
    sites = _operator_sites(step)
    if not sites:
        raise NoOperator(f"step {step.index}: no operator inside an annotation")

    for _ in range(_FLIP_REDRAWS):
        ann_index, pos = sites[rng.randrange(len(sites))]
        ann = step.annotations[ann_index]
        from_op = ann.expression[pos]
        to_op = rng.choice([op for op in _OPERATORS if op != from_op])
        new_expr = ann.expression[:pos] + to_op + ann.expression[pos + 1 :]
        try:
            expected = calc.evaluate(new_expr)
        except calc.DivideByZero:
            continue  # never emit a divide-by-zero annotation
        except calc.ExprSyntaxError:
            continue
        claimed = normalize_number(ann.claimed_value)
        if not recompute and claimed.kind is AnswerKind.NUMERIC and claimed.numeric == expected:
            continue  # flip would leave the claim true

        start, end = ann.span
        # Expression starts 2 chars into the "<<" of the annotation span.
        abs_pos = start + 2 + pos
        new_text = step.text[:abs_pos] + to_op + step.text[abs_pos + 1 :]
        if recompute:
            new_text = _recompute_claims(new_text, record_id)
            if new_text == step.text:
                continue
        return new_text, OperatorFlip(ann_index, pos, from_op, to_op)
    raise NoSafeFlip(f"step {step.index}: no safe operator flip found")


def corrupt_numeric(
    step: Step, seed: int, recompute: bool = False
) -> tuple[str, NumericPerturb]:
    import random

    return _corrupt_numeric(step, random.Random(seed), recompute)


def flip_operator(
    step: Step, seed: int, recompute: bool = False
) -> tuple[str, OperatorFlip]:
    import random

    return _corrupt_operator(step, random.Random(seed), recompute)


# ---------------------------------------------------------------------------
# Instance assembly

def _feasible_kinds(step: Step) -> list[str]:
    kinds = []
    if _numeric_tokens(step):
        kinds.append("numeric")
    if _operator_sites(step):
        kinds.append("operator")
    return kinds


def make_mi_instance(
    problem: MathProblem, policy: MIPolicy, global_seed: int
) -> MIInstance:
    """Corrupt ``k`` steps of the rationale, or emit an all-correct negative.

    Deterministic per (global_seed, problem, policy). Raises
    NothingCorruptible when a positive instance is requested but no step
    admits any corruption.
    """
    seed = record_seed(global_seed, problem.id, _SEED_NAMESPACE)
    rng = record_rng(global_seed, problem.id, _SEED_NAMESPACE)
    step_texts = tuple(problem.rationale.step_texts())

    if rng.random() < policy.p_negative:
        return MIInstance(
            problem_id=problem.id,
            steps=step_texts,
            labels=tuple(False for _ in step_texts),
            corruptions=(),
            seed=seed,
        )

    eligible = [
        (i, kinds)
        for i, step in enumerate(problem.rationale.steps)
        if (kinds := _feasible_kinds(step))
    ]
    if not eligible:
        raise NothingCorruptible(f"record {problem.id}: no corruptible step")

    k = min(policy.corruptions_per_instance, len(eligible))
    chosen = sorted(rng.sample(range(len(eligible)), k))

    new_steps = list(step_texts)
    corruptions = []
    for idx in chosen:
        step_index, kinds = eligible[idx]
        step = problem.rationale.steps[step_index]
        if len(kinds) == 2:
            kind = "numeric" if rng.random() < policy.numeric_ratio else "operator"
        else:
            kind = kinds[0]
        try:
            if kind == "numeric":
                new_text, meta = _corrupt_numeric(step, rng, policy.recompute, problem.id)
            else:
                new_text, meta = _corrupt_operator(step, rng, policy.recompute, problem.id)
        except CorruptionError:
            other = "operator" if kind == "numeric" else "numeric"
            if other not in kinds:
                raise
            if other == "numeric":
                new_text, meta = _corrupt_numeric(step, rng, policy.recompute, problem.id)
            else:
                new_text, meta = _corrupt_operator(step, rng, policy.recompute, problem.id)
        new_steps[step_index] = new_text
        corruptions.append(Corruption(step_index, meta, step.text))

    labels = tuple(i in {c.step_index for c in corruptions} for i in range(len(step_texts)))
    return MIInstance(
        problem_id=problem.id,
        steps=tuple(new_steps),
        labels=labels,
        corruptions=tuple(corruptions),
        seed=seed,
    )


@dataclass
class MIReport:
    emitted: int = 0
    negatives: int = 0
    skipped: int = 0

    def as_dict(self) -> dict:
        return {
            "emitted": self.emitted,
            "negatives": self.negatives,
            "skipped": self.skipped,
        }


def augment_corpus(
    problems: Iterable[MathProblem], policy: MIPolicy, global_seed: int
) -> tuple[list[MIInstance], MIReport]:
    instances = []
    report = MIReport()
    for problem in problems:
        try:
            instance = make_mi_instance(problem, policy, global_seed)
        except CorruptionError:
            report.skipped += 1
            log.info("mi: skipped %s (nothing corruptible)", problem.id)
            continue
        instances.append(instance)
        report.emitted += 1
        if not instance.corruptions:
            report.negatives += 1
    return instances, report


# ---------------------------------------------------------------------------
# Serialization

def _kind_to_json(kind: CorruptionKind) -> dict:
    if isinstance(kind, NumericPerturb):
        return {"kind": "numeric", "which_operand": kind.which_operand, "delta": kind.delta}
    return {
        "kind": "operator",
        "annotation_index": kind.annotation_index,
        "position": kind.position,
        "from_op": kind.from_op,
        "to_op": kind.to_op,
    }


def _kind_from_json(obj: dict) -> CorruptionKind:
    if obj["kind"] == "numeric":
        return NumericPerturb(obj["which_operand"], obj["delta"])
    return OperatorFlip(obj["annotation_index"], obj["position"], obj["from_op"], obj["to_op"])


def instance_to_json(instance: MIInstance) -> str:
    return json.dumps(
        {
            "problem_id": instance.problem_id,
            "task": "MI",
            "steps": list(instance.steps),
            "erroneous_indices": instance.erroneous_indices(),
            "corruption_meta": [
                {
                    "step_index": c.step_index,
                    "original_text": c.original_text,
                    **_kind_to_json(c.kind),
                }
                for c in instance.corruptions
            ],
            "seed": instance.seed,
        },
        ensure_ascii=False,
    )


def instance_from_json(line: str) -> MIInstance:
    obj = json.loads(line)
    steps = tuple(obj["steps"])
    corruptions = tuple(
        Corruption(c["step_index"], _kind_from_json(c), c["original_text"])
        for c in obj["corruption_meta"]
    )
    labels = tuple(i in set(obj["erroneous_indices"]) for i in range(len(steps)))
    return MIInstance(obj["problem_id"], steps, labels, corruptions, obj["seed"])
