"""Manifest loading and byte-level batching for the toy trainer."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import torch

from mathaug.manifest import SCHEMA_VERSION, TASKS, ManifestError, TrainingInstance

from .model import BOS, EOS, PAD

log = logging.getLogger(__name__)

IGNORE_INDEX = -100


class SchemaError(ManifestError):
    pass


def load_manifest(path: str) -> tuple[dict, list[TrainingInstance]]:
    """Read a manifest, enforcing header/instance agreement line by line.

    Instances must carry exactly the λ weight the header declares for their
    task; lines for tasks whose λ is zero are skipped with a warning.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [(n, line) for n, line in enumerate(fh, start=1) if line.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty manifest")
    header = json.loads(lines[0][1])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(
            f"{path}: unsupported schema_version {header.get('schema_version')!r}"
        )
    lambdas = header.get("lambda")
    if not isinstance(lambdas, dict) or set(lambdas) != set(TASKS):
        raise SchemaError(f"{path}: header lambda must cover tasks {TASKS}")

    instances = []
    skipped = {task: 0 for task in TASKS}
    for lineno, line in lines[1:]:
        obj = json.loads(line)
        try:
            instance = TrainingInstance(
                task=obj["task"],
                prompt=obj["prompt"],
                target=obj["target"],
                weight=obj["weight"],
                provenance=obj.get("provenance", {}),
            )
        except (KeyError, ManifestError) as exc:
            raise SchemaError(f"{path}: line {lineno}: {exc}") from exc
        declared = lambdas[instance.task]
        if instance.weight != declared:
            raise SchemaError(
                f"{path}: line {lineno}: weight {instance.weight} disagrees with "
                f"header lambda[{instance.task}]={declared}"
            )
        if declared == 0:
            skipped[instance.task] += 1
            continue
        instances.append(instance)
    for task, count in skipped.items():
        if count:
            log.warning("load_manifest: skipped %d %s lines (lambda=0)", count, task)
    return header, instances


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids: list[int]) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


@dataclass
class TaskBatch:
    """One padded batch for a single task.

    ``labels`` equals the next input token on target positions and
    IGNORE_INDEX on prompt and padding positions, so prompt tokens provide
    context but contribute nothing to the loss.
    """

    task: str
    input_ids: torch.Tensor  # [B, T]
    labels: torch.Tensor  # [B, T]
    weight: float


def _encode_pair(prompt: str, target: str, max_len: int) -> tuple[list[int], list[int]]:
    prompt_ids = [BOS] + encode(prompt)
    target_ids = encode(target) + [EOS]
    ids = (prompt_ids + target_ids)[:max_len]
    labels = [IGNORE_INDEX] * len(prompt_ids) + target_ids
    labels = labels[:max_len]
    return ids, labels


def make_batch(instances: list[TrainingInstance], max_len: int = 512) -> TaskBatch:
    if not instances:
        raise ValueError("cannot batch zero instances")
    tasks = {i.task for i in instances}
    if len(tasks) != 1:
        raise ValueError(f"batch must be single-task, got {sorted(tasks)}")
    weights = {i.weight for i in instances}
    if len(weights) != 1:
        raise ValueError("batch must carry a single weight")

    pairs = [_encode_pair(i.prompt, i.target, max_len) for i in instances]
    width = max(len(ids) for ids, _ in pairs)
    input_ids = torch.full((len(pairs), width), PAD, dtype=torch.long)
    labels = torch.full((len(pairs), width), IGNORE_INDEX, dtype=torch.long)
    for row, (ids, labs) in enumerate(pairs):
        input_ids[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        labels[row, : len(labs)] = torch.tensor(labs, dtype=torch.long)
    return TaskBatch(
        task=tasks.pop(), input_ids=input_ids, labels=labels, weight=weights.pop()
    )


def batches_by_task(
    instances: list[TrainingInstance], max_len: int = 512
) -> dict[str, TaskBatch]:
    grouped: dict[str, list[TrainingInstance]] = {}
    for instance in instances:
        grouped.setdefault(instance.task, []).append(instance)
    return {task: make_batch(group, max_len) for task, group in grouped.items()}
