"""Training-instance rendering, manifest emission, and the weighted objective.

A manifest is JSONL: one header line carrying schema version, loss weights,
mix ratios, and a config hash, followed by task-tagged prompt/target pairs in
deterministic order. The combined objective is the weighted sum of the three
per-task cross-entropy losses.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

from .augment_mi import MIInstance
from .augment_rr import RRInstance
from .corpus import MathProblem, atomic_write

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

TASKS = ("SFT", "RR", "MI")

_REQUIRED_PLACEHOLDERS = {
    "SFT": {"prompt": ["{question}"], "target": ["{steps}", "{answer}"]},
    "RR": {"prompt": ["{shuffled_steps}"], "target": ["{order}"]},
    "MI": {"prompt": ["{steps}"], "target": ["{labels}"]},
}

DEFAULT_TEMPLATES = {
    "SFT": {
        "prompt": "Solve the following math problem step by step.\n\n{question}\n",
        "target": "{steps}\n#### {answer}",
    },
    "RR": {
        "prompt": (
            "The solution steps below are out of order. Reply with the index of "
            "each original step in its shuffled position, separated by spaces.\n\n"
            "Question: {question}\n\nShuffled steps:\n{shuffled_steps}\n"
        ),
        "target": "{order}",
    },
    "MI": {
        "prompt": (
            "Some steps of the solution below may contain mistakes. Reply with "
            "the indices of the erroneous steps separated by spaces, or NONE if "
            "all steps are correct.\n\nQuestion: {question}\n\nSteps:\n{steps}\n"
        ),
        "target": "{labels}",
    },
}

NO_ERRORS_TOKEN = "NONE"


class ManifestError(Exception):
    pass


class EmptyField(ManifestError):
    pass


@dataclass(frozen=True)
class TrainingInstance:
    task: str  # SFT | RR | MI
    prompt: str
    target: str
    weight: float
    provenance: dict

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not self.prompt or not self.target:
            raise EmptyField(f"{self.task} instance has an empty prompt or target")
        if self.weight < 0:
            raise ValueError("weight must be non-negative")


@dataclass(frozen=True)
class ManifestConfig:
    lambda_sft: float = 1.0
    lambda_rr: float = 1.0
    lambda_mi: float = 1.0
    templates: dict = field(default_factory=lambda: DEFAULT_TEMPLATES)
    mix: dict = field(default_factory=lambda: {"SFT": 2, "RR": 1, "MI": 1})

    def __post_init__(self):
        weights = (self.lambda_sft, self.lambda_rr, self.lambda_mi)
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in weights):
            raise ValueError("at least one loss weight must be positive")
        for task, required in _REQUIRED_PLACEHOLDERS.items():
            for role, placeholders in required.items():
                template = self.templates[task][role]
                for placeholder in placeholders:
                    if placeholder not in template:
                        raise ValueError(
                            f"{task} {role} template is missing {placeholder}"
                        )

    def weight_for(self, task: str) -> float:
        return {"SFT": self.lambda_sft, "RR": self.lambda_rr, "MI": self.lambda_mi}[task]

    def lambdas(self) -> dict:
        return {"SFT": self.lambda_sft, "RR": self.lambda_rr, "MI": self.lambda_mi}

    def sha256(self) -> str:
        canonical = json.dumps(
            {
                "lambda": self.lambdas(),
                "templates": self.templates,
                "mix": self.mix,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Rendering

def _numbered(lines: Iterable[str]) -> str:
    return "\n".join(f"{i}. {text}" for i, text in enumerate(lines))


def render_sft(problem: MathProblem, config: ManifestConfig) -> TrainingInstance:
    if not problem.question.strip():
        raise EmptyField(f"record {problem.id}: empty question")
    templates = config.templates["SFT"]
    steps = "\n".join(problem.rationale.step_texts())
    prompt = templates["prompt"].format(question=problem.question)
    target = templates["target"].format(steps=steps, answer=problem.gold_answer.literal)
    return TrainingInstance(
        task="SFT",
        prompt=prompt,
        target=target,
        weight=config.weight_for("SFT"),
        provenance={"problem_id": problem.id},
    )


def render_rr(
    instance: RRInstance, config: ManifestConfig, question: str = ""
) -> TrainingInstance:
    templates = config.templates["RR"]
    prompt = templates["prompt"].format(
        question=question, shuffled_steps=_numbered(instance.shuffled_steps)
    )
    target = templates["target"].format(order=" ".join(map(str, instance.target_order)))
    return TrainingInstance(
        task="RR",
        prompt=prompt,
        target=target,
        weight=config.weight_for("RR"),
        provenance={"problem_id": instance.problem_id, "seed": instance.seed},
    )


def render_mi(
    instance: MIInstance, config: ManifestConfig, question: str = ""
) -> TrainingInstance:
    templates = config.templates["MI"]
    prompt = templates["prompt"].format(
        question=question, steps=_numbered(instance.steps)
    )
    indices = instance.erroneous_indices()
    labels = " ".join(map(str, indices)) if indices else NO_ERRORS_TOKEN
    target = templates["target"].format(labels=labels)
    return TrainingInstance(
        task="MI",
        prompt=prompt,
        target=target,
        weight=config.weight_for("MI"),
        provenance={"problem_id": instance.problem_id, "seed": instance.seed},
    )


def parse_rr_target(target: str) -> list[int]:
    return [int(tok) for tok in target.split()]


def parse_mi_target(target: str) -> list[int]:
    target = target.strip()
    if target == NO_ERRORS_TOKEN:
        return []
    return [int(tok) for tok in target.split()]


# ---------------------------------------------------------------------------
# Emission / loading

def manifest_header(config: ManifestConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "lambda": config.lambdas(),
        "mix": config.mix,
        "config_sha256": config.sha256(),
    }


def _sort_key(instance: TrainingInstance):
    prov = instance.provenance
    return (str(prov.get("problem_id", "")), instance.task, str(prov.get("seed", "")), instance.prompt)


def emit_manifest(
    instances: Iterable[TrainingInstance], config: ManifestConfig, path: str
) -> dict:
    """Write the manifest JSONL and return a per-task summary."""
    ordered = sorted(instances, key=_sort_key)
    lines = [json.dumps(manifest_header(config), sort_keys=True, ensure_ascii=False)]
    counts = {task: 0 for task in TASKS}
    for instance in ordered:
        counts[instance.task] += 1
        lines.append(
            json.dumps(
                {
                    "task": instance.task,
                    "prompt": instance.prompt,
                    "target": instance.target,
                    "weight": instance.weight,
                    "provenance": instance.provenance,
                },
                ensure_ascii=False,
                sort_keys=True,
            )
        )
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
    summary = {"counts": counts, "lambda": config.lambdas(), "total": len(ordered)}
    log.info("manifest: wrote %d instances to %s", len(ordered), path)
    return summary


def load_manifest(path: str) -> tuple[dict, list[TrainingInstance]]:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"{path}: unsupported schema_version {header.get('schema_version')}")
    instances = []
    for line in lines[1:]:
        obj = json.loads(line)
        instances.append(
            TrainingInstance(
                task=obj["task"],
                prompt=obj["prompt"],
                target=obj["target"],
                weight=obj["weight"],
                provenance=obj["provenance"],
            )
        )
    return header, instances


# ---------------------------------------------------------------------------
# Weighted objective

def combined_loss(
    losses: dict,
    config: ManifestConfig,
) -> float:
    """Weighted sum of per-task losses: λ_sft·SFT + λ_rr·RR + λ_mi·MI.

    ``losses`` maps task name to a non-negative finite mean cross-entropy.
    Tasks with λ=0 may be absent (treated as 0 with a warning); a missing
    loss for a positively weighted task is an error.
    """
    total = 0.0
    for task in TASKS:
        weight = config.weight_for(task)
        if task not in losses:
            if weight > 0:
                raise ManifestError(f"missing loss for task {task} with λ > 0")
            log.warning("combined_loss: task %s absent, treated as 0", task)
            continue
        value = losses[task]
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"loss for {task} must be finite and non-negative")
        total += weight * value
    return total


@dataclass(frozen=True)
class LossBreakdown:
    loss_sft: float
    loss_rr: float
    loss_mi: float
    loss_final: float

    @classmethod
    def compute(cls, loss_sft: float, loss_rr: float, loss_mi: float, config: ManifestConfig):
        final = combined_loss({"SFT": loss_sft, "RR": loss_rr, "MI": loss_mi}, config)
        return cls(loss_sft, loss_rr, loss_mi, final)
