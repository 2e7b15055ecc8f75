"""Trainer contract tests: manifest loading, loss laws, gradients, smoke train."""

import json
import logging

import pytest
import torch

from mathaug import evaluation
from mathaug.corpus import Source, ingest_lines
from mathaug.manifest import (
    ManifestConfig,
    combined_loss,
    emit_manifest,
    render_mi,
    render_rr,
    render_sft,
)
from mathaug.augment_mi import MIPolicy, make_mi_instance
from mathaug.augment_rr import make_rr_instance

from mitrainer.data import (
    IGNORE_INDEX,
    SchemaError,
    TaskBatch,
    batches_by_task,
    load_manifest,
)
from mitrainer.model import (
    AdapterConfig,
    TinyLM,
    add_adapters,
    total_parameter_count,
    trainable_parameter_count,
)
from mitrainer.train import evaluate, task_loss, task_losses, train

torch.manual_seed(0)


def toy_problems(n=70):
    """Short self-consistent problems so byte sequences stay small."""
    lines = []
    for i in range(n):
        a, b = 2 + i % 7, 3 + i % 5
        steps = [
            f"Add: {a}+{b}=<<{a}+{b}={a + b}>>{a + b}.",
            f"Double: {a + b}*2=<<{a + b}*2={2 * (a + b)}>>{2 * (a + b)}.",
            f"Minus one: {2 * (a + b)}-1=<<{2 * (a + b)}-1={2 * (a + b) - 1}>>{2 * (a + b) - 1}.",
        ]
        gold = 2 * (a + b) - 1
        lines.append(
            json.dumps(
                {
                    "question": f"Start with {a} and {b}. Result?",
                    "answer": "\n".join(steps) + f"\n#### {gold}",
                }
            )
        )
    problems, report = ingest_lines(lines, source=Source.GSM8K, id_prefix="toy")
    assert report.skipped == 0
    return problems


def build_manifest(path, problems, config):
    instances = [render_sft(p, config) for p in problems]
    for p in problems:
        rr = make_rr_instance(p, global_seed=3)
        instances.append(render_rr(rr, config, p.question))
        mi = make_mi_instance(p, MIPolicy(p_negative=0.25), global_seed=3)
        instances.append(render_mi(mi, config, p.question))
    emit_manifest(instances, config, str(path))
    return instances


@pytest.fixture(scope="session")
def manifest_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("manifest") / "toy-manifest.jsonl"
    build_manifest(path, toy_problems(), ManifestConfig())
    return path


@pytest.fixture(scope="session")
def batches(manifest_path):
    _, instances = load_manifest(str(manifest_path))
    return batches_by_task(instances)


class TestLoadManifest:
    def test_instance_count_matches_body_lines(self, manifest_path):
        header, instances = load_manifest(str(manifest_path))
        n_lines = len(manifest_path.read_text().splitlines())
        assert len(instances) == n_lines - 1 >= 200
        assert header["lambda"] == {"SFT": 1.0, "RR": 1.0, "MI": 1.0}

    def test_tampered_weight_names_the_line(self, manifest_path, tmp_path):
        lines = manifest_path.read_text().splitlines()
        bad_line_no = 5
        obj = json.loads(lines[bad_line_no - 1])
        obj["weight"] = 9.0
        lines[bad_line_no - 1] = json.dumps(obj)
        bad = tmp_path / "tampered.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError, match=f"line {bad_line_no}"):
            load_manifest(str(bad))

    def test_wrong_schema_version_rejected(self, manifest_path, tmp_path):
        lines = manifest_path.read_text().splitlines()
        header = json.loads(lines[0])
        header["schema_version"] = 99
        bad = tmp_path / "badver.jsonl"
        bad.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
        with pytest.raises(SchemaError, match="schema_version"):
            load_manifest(str(bad))

    def test_zero_lambda_lines_skipped_with_warning(self, tmp_path, caplog):
        problems = toy_problems(5)
        config = ManifestConfig(lambda_rr=0.0)
        path = tmp_path / "norr.jsonl"
        build_manifest(path, problems, config)
        with caplog.at_level(logging.WARNING):
            _, instances = load_manifest(str(path))
        assert all(i.task != "RR" for i in instances)
        assert any("lambda=0" in rec.message for rec in caplog.records)


class TestAdapters:
    def test_adapters_add_trainable_parameters_over_frozen_base(self):
        model = TinyLM()
        base_total = total_parameter_count(model)
        add_adapters(model, AdapterConfig(rank=64, alpha=64))
        base_trainable = sum(
            p.numel()
            for name, p in model.named_parameters()
            if p.requires_grad and "adapter" not in name
        )
        assert base_trainable == 0
        assert trainable_parameter_count(model) > base_trainable
        assert total_parameter_count(model) > base_total

    def test_zero_initialized_adapters_preserve_base_outputs(self):
        torch.manual_seed(1)
        base = TinyLM()
        ids = torch.randint(0, 259, (2, 9))
        reference = base(ids)
        add_adapters(base, AdapterConfig())
        assert torch.equal(base(ids), reference)


class TestLossLaws:
    def test_sft_only_lambda_reduces_to_pure_sft_loss(self, batches):
        model = TinyLM()
        losses = task_losses(model, batches)
        config = ManifestConfig(lambda_sft=1.0, lambda_rr=0.0, lambda_mi=0.0)
        final = float(combined_loss(losses, config))
        assert abs(final - float(losses["SFT"])) < 1e-6

    def test_doubling_lambda_doubles_final_loss(self, batches):
        model = TinyLM()
        losses = task_losses(model, batches)
        one = ManifestConfig(lambda_sft=1.0, lambda_rr=1.0, lambda_mi=1.0)
        two = ManifestConfig(lambda_sft=2.0, lambda_rr=2.0, lambda_mi=2.0)
        assert float(combined_loss(losses, two)) == pytest.approx(
            2.0 * float(combined_loss(losses, one)), rel=0, abs=1e-12
        )

    def test_masked_prompt_tokens_do_not_move_the_loss(self):
        # logits at position t depend only on the token at t; a prompt byte whose
        # successor is also loss-masked therefore cannot move task_loss.
        model = TinyLM()
        ids = torch.tensor([[256, 80, 81, 82, 65, 66, 257]])
        labels = torch.tensor(
            [[IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX, 65, 66, 257]]
        )
        batch = TaskBatch("SFT", ids, labels, 1.0)
        before = float(task_loss(model, batch))
        mutated = ids.clone()
        mutated[0, 1] = 90  # position 2 is still masked
        after = float(task_loss(model, TaskBatch("SFT", mutated, labels, 1.0)))
        assert before == pytest.approx(after, abs=0.0)


class TestGradientCheck:
    def test_autograd_matches_central_finite_differences(self, batches):
        torch.manual_seed(2)
        model = TinyLM(hidden=8)
        add_adapters(model, AdapterConfig(rank=2, alpha=2))
        model.double()
        small = {
            task: TaskBatch(b.task, b.input_ids[:4], b.labels[:4], b.weight)
            for task, b in batches.items()
        }
        config = ManifestConfig()

        def loss_value():
            return combined_loss(task_losses(model, small), config)

        loss = loss_value()
        loss.backward()
        probes = [
            (model.fc.adapter_a, (0, 0)),
            (model.fc.adapter_b, (3, 1)),
            (model.head.adapter_a, (1, 2)),
            (model.head.adapter_b, (10, 0)),
        ]
        eps = 1e-5
        for param, index in probes:
            analytic = float(param.grad[index])
            with torch.no_grad():
                original = float(param[index])
                param[index] = original + eps
                plus = float(loss_value())
                param[index] = original - eps
                minus = float(loss_value())
                param[index] = original
            numeric = (plus - minus) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            assert abs(analytic - numeric) / denom < 1e-3, (index, analytic, numeric)


class TestSmokeTrain:
    def test_fifty_steps_decrease_loss_and_predictions_grade_cleanly(
        self, batches, tmp_path, caplog
    ):
        torch.manual_seed(3)
        model = TinyLM()
        add_adapters(model, AdapterConfig(rank=16, alpha=16))
        config = ManifestConfig()
        log_csv = tmp_path / "losses.csv"
        history = train(model, batches, config, steps=50, lr=1e-2, log_csv=str(log_csv))
        assert len(history) == 50
        assert history[-1].loss_final < history[0].loss_final
        assert log_csv.read_text().startswith("step,loss_sft,loss_rr,loss_mi,loss_final")

        problems = toy_problems(10)
        preds_path = tmp_path / "preds.jsonl"
        evaluate(model, problems, str(preds_path), max_new_tokens=16)
        predictions = evaluation.load_predictions(str(preds_path))
        assert len(predictions) == len(problems)
        with caplog.at_level(logging.WARNING, logger="mathaug.evaluation"):
            result = evaluation.grade(predictions, problems)
        warnings = [r for r in caplog.records if r.levelno >= logging.WARNING]
        assert warnings == []
        assert len(result.per_example) == len(problems)
        assert 0.0 <= result.accuracy <= 100.0
