"""Step-reordering instances: shuffle rationale steps with a recoverable permutation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

from .corpus import MathProblem
from .seeding import record_rng, record_seed

log = logging.getLogger(__name__)

_IDENTITY_RETRIES = 16
_SEED_NAMESPACE = "rr"


class TooFewSteps(Exception):
    """Raised when a rationale has fewer than 2 steps and cannot be shuffled."""


@dataclass(frozen=True)
class RRInstance:
    problem_id: str
    shuffled_steps: tuple[str, ...]
    permutation: tuple[int, ...]  # permutation[i] = original index of shuffled position i
    target_order: tuple[int, ...]  # inverse permutation: the reordering to predict
    seed: int

    def __post_init__(self):
        n = len(self.shuffled_steps)
        if sorted(self.permutation) != list(range(n)):
            raise ValueError("permutation must be a bijection on 0..n-1")
        if n >= 2 and self.permutation == tuple(range(n)):
            raise ValueError("identity permutation is not a valid instance")


def invert_permutation(perm: Iterable[int]) -> tuple[int, ...]:
    perm = list(perm)
    inverse = [0] * len(perm)
    for position, original in enumerate(perm):
        inverse[original] = position
    return tuple(inverse)


def apply_order(order: Iterable[int], items: list[str]) -> list[str]:
    """Gather ``items`` by index: output[i] = items[order[i]].

    ``apply_order(instance.target_order, shuffled_steps)`` restores the
    original step order.
    """
    return [items[i] for i in order]


def make_rr_instance(problem: MathProblem, global_seed: int) -> RRInstance:
    """Fisher-Yates shuffle of the rationale steps, deterministic per record.

    The identity draw is rejected (bounded retries, then a first-two swap) so
    every emitted instance has something to reorder.
    """
    steps = problem.rationale.step_texts()
    n = len(steps)
    if n < 2:
        raise TooFewSteps(f"record {problem.id}: {n} step(s)")
    seed = record_seed(global_seed, problem.id, _SEED_NAMESPACE)
    rng = record_rng(global_seed, problem.id, _SEED_NAMESPACE)

    identity = list(range(n))
    perm = identity[:]
    for _ in range(_IDENTITY_RETRIES):
        rng.shuffle(perm)
        if perm != identity:
            break
    else:
        perm[0], perm[1] = perm[1], perm[0]

    shuffled = tuple(steps[i] for i in perm)
    return RRInstance(
        problem_id=problem.id,
        shuffled_steps=shuffled,
        permutation=tuple(perm),
        target_order=invert_permutation(perm),
        seed=seed,
    )


@dataclass
class RRCoverageReport:
    emitted: int = 0
    skipped_too_few: int = 0
    by_step_count: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "emitted": self.emitted,
            "skipped_too_few": self.skipped_too_few,
            "by_step_count": {str(k): v for k, v in sorted(self.by_step_count.items())},
        }


def augment_corpus(
    problems: Iterable[MathProblem], global_seed: int
) -> tuple[list[RRInstance], RRCoverageReport]:
    instances = []
    report = RRCoverageReport()
    for problem in problems:
        n = len(problem.rationale.steps)
        report.by_step_count[n] = report.by_step_count.get(n, 0) + 1
        try:
            instances.append(make_rr_instance(problem, global_seed))
            report.emitted += 1
        except TooFewSteps:
            report.skipped_too_few += 1
            log.info("rr: skipped %s (too few steps)", problem.id)
    return instances, report


def instance_to_json(instance: RRInstance) -> str:
    return json.dumps(
        {
            "problem_id": instance.problem_id,
            "task": "RR",
            "shuffled_steps": list(instance.shuffled_steps),
            "target_order": list(instance.target_order),
            "seed": instance.seed,
        },
        ensure_ascii=False,
    )


def instance_from_json(line: str) -> RRInstance:
    obj = json.loads(line)
    target_order = tuple(obj["target_order"])
    return RRInstance(
        problem_id=obj["problem_id"],
        shuffled_steps=tuple(obj["shuffled_steps"]),
        permutation=invert_permutation(target_order),
        target_order=target_order,
        seed=obj["seed"],
    )
