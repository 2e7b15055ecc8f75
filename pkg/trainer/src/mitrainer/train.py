"""Multi-task training loop: weighted SFT + step-reordering + mistake labels.

Per-task losses are mean token-level cross-entropy over target positions only;
the final objective is their λ-weighted sum, computed by the same
``combined_loss`` routine that defines the manifest contract (it is plain
arithmetic, so feeding it scalar tensors keeps the autograd graph intact).
"""

from __future__ import annotations

import csv
import json
import logging
from typing import Iterable, Optional

import torch
from torch import nn

from mathaug.corpus import MathProblem
from mathaug.manifest import LossBreakdown, ManifestConfig, combined_loss

from .data import IGNORE_INDEX, TaskBatch, decode, encode
from .model import BOS, EOS

log = logging.getLogger(__name__)


def task_loss(model: nn.Module, batch: TaskBatch) -> torch.Tensor:
    """Mean next-token cross-entropy over the batch's unmasked positions."""
    logits = model(batch.input_ids)
    # logits at position t predict the token at position t+1
    shifted_logits = logits[:, :-1, :].reshape(-1, logits.size(-1))
    shifted_labels = batch.labels[:, 1:].reshape(-1)
    return nn.functional.cross_entropy(
        shifted_logits, shifted_labels, ignore_index=IGNORE_INDEX
    )


def task_losses(model: nn.Module, batches: dict[str, TaskBatch]) -> dict[str, torch.Tensor]:
    return {task: task_loss(model, batch) for task, batch in batches.items()}


def train_step(
    model: nn.Module,
    batches: dict[str, TaskBatch],
    config: ManifestConfig,
    optimizer: torch.optim.Optimizer,
) -> LossBreakdown:
    """One optimizer step on the λ-weighted multi-task objective."""
    optimizer.zero_grad()
    losses = task_losses(model, batches)
    final = combined_loss(losses, config)
    final.backward()
    optimizer.step()

    def value(task: str) -> float:
        return float(losses[task].detach()) if task in losses else 0.0

    return LossBreakdown(
        loss_sft=value("SFT"),
        loss_rr=value("RR"),
        loss_mi=value("MI"),
        loss_final=float(final.detach()),
    )


def train(
    model: nn.Module,
    batches: dict[str, TaskBatch],
    config: ManifestConfig,
    steps: int,
    lr: float = 1e-2,
    log_csv: Optional[str] = None,
    log_every: int = 10,
) -> list[LossBreakdown]:
    """Full-batch training for ``steps`` steps; optionally logs a loss CSV."""
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=lr)
    history = [train_step(model, batches, config, optimizer) for _ in range(steps)]
    if log_csv:
        with open(log_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss_sft", "loss_rr", "loss_mi", "loss_final"])
            for step, row in enumerate(history, start=1):
                if step % log_every == 0 or step in (1, steps):
                    writer.writerow(
                        [step, row.loss_sft, row.loss_rr, row.loss_mi, row.loss_final]
                    )
    log.info("train: %d steps, loss %.4f -> %.4f", steps,
             history[0].loss_final, history[-1].loss_final)
    return history


@torch.no_grad()
def generate(model: nn.Module, prompt: str, max_new_tokens: int = 32) -> str:
    """Greedy byte-level decoding from a prompt until EOS."""
    ids = [BOS] + encode(prompt)
    out: list[int] = []
    for _ in range(max_new_tokens):
        logits = model(torch.tensor([ids], dtype=torch.long))
        next_id = int(logits[0, -1].argmax())
        if next_id == EOS:
            break
        out.append(next_id)
        ids.append(next_id)
    return decode(out)


def evaluate(
    model: nn.Module,
    problems: Iterable[MathProblem],
    predictions_path: str,
    prompt_template: str = "Question: {question}\nAnswer:",
    max_new_tokens: int = 32,
) -> None:
    """Write one prediction per problem in the grader's JSONL schema."""
    with open(predictions_path, "w", encoding="utf-8") as fh:
        for problem in problems:
            text = generate(
                model,
                prompt_template.format(question=problem.question),
                max_new_tokens=max_new_tokens,
            )
            fh.write(
                json.dumps(
                    {"problem_id": problem.id, "output_text": text},
                    ensure_ascii=False,
                )
                + "\n"
            )
