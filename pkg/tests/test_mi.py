import json
from collections import Counter

import pytest

from mathaug import calc, corpus
from mathaug.augment_mi import (
    MIPolicy,
    NoNumericToken,
    NoOperator,
    NothingCorruptible,
    augment_corpus,
    corrupt_numeric,
    flip_operator,
    instance_from_json,
    instance_to_json,
    make_mi_instance,
)


def step_from(text: str, index: int = 0) -> corpus.Step:
    return corpus.Step(text, corpus.find_annotations(text), index)


def problem_from_steps(pid: str, texts: list[str]) -> corpus.MathProblem:
    answer = "\n".join(texts) + "\n#### 1"
    return corpus.parse_gsm8k_record({"question": "Q", "answer": answer}, pid)


class TestCorruptNumeric:
    def test_recompute_keeps_step_self_consistent(self):
        step = step_from("48/2 = <<48/2=24>>24")
        new_text, kind = corrupt_numeric(step, seed=1, recompute=True)
        assert new_text == "50/2 = <<50/2=25>>25"
        for ann in corpus.find_annotations(new_text):
            assert calc.verify_annotation(ann).status is calc.VerifyStatus.CONSISTENT

    def test_stale_value_is_detectable(self):
        step = step_from("48/2 = <<48/2=24>>24")
        for seed in range(20):
            new_text, kind = corrupt_numeric(step, seed=seed, recompute=False)
            statuses = [
                calc.verify_annotation(a).status
                for a in corpus.find_annotations(new_text)
            ]
            assert calc.VerifyStatus.INCONSISTENT in statuses, new_text

    def test_no_numeric_token(self):
        step = corpus.Step("no digits here", (), 0)
        with pytest.raises(NoNumericToken):
            corrupt_numeric(step, seed=0)

    def test_never_negative_counts(self):
        step = step_from("had 1 + 1 = <<1+1=2>>2 left")
        for seed in range(50):
            new_text, _ = corrupt_numeric(step, seed=seed, recompute=True)
            for tok in corpus.strip_annotations(new_text).split():
                assert not tok.startswith("-"), new_text

    def test_changes_text(self):
        step = step_from("21 * 2 = <<21*2=42>>42 total")
        for seed in range(30):
            new_text, _ = corrupt_numeric(step, seed=seed)
            assert new_text != step.text


class TestFlipOperator:
    def test_recompute_example(self):
        step = step_from("<<48/2=24>>")
        seen = set()
        for seed in range(40):
            new_text, kind = flip_operator(step, seed=seed, recompute=True)
            seen.add(new_text)
            assert kind.from_op == "/"
            assert kind.to_op in "+-*"
        assert "<<48*2=96>>" in seen
        assert "<<48+2=50>>" in seen
        assert "<<48-2=46>>" in seen

    def test_no_divide_by_zero_emitted(self):
        step = step_from("<<5+0=5>>")
        for seed in range(60):
            new_text, _ = flip_operator(step, seed=seed, recompute=True)
            for ann in corpus.find_annotations(new_text):
                status = calc.verify_annotation(ann).status
                assert status is calc.VerifyStatus.CONSISTENT, new_text

    def test_no_operator(self):
        step = step_from("just a sentence with 4 values")
        with pytest.raises(NoOperator):
            flip_operator(step, seed=0)

    def test_unary_minus_not_flipped(self):
        step = step_from("<<-5+8=3>>")
        for seed in range(20):
            _, kind = flip_operator(step, seed=seed, recompute=True)
            assert kind.position != 0  # the leading unary minus is not a site

    def test_stale_flip_detectable(self):
        step = step_from("<<10/2=5>>")
        for seed in range(20):
            new_text, _ = flip_operator(step, seed=seed, recompute=False)
            ann = corpus.find_annotations(new_text)[0]
            assert calc.verify_annotation(ann).status is calc.VerifyStatus.INCONSISTENT


class TestMakeInstance:
    def test_single_corruption(self):
        p = problem_from_steps("m1", [
            "a 2 + 3 = <<2+3=5>>5",
            "b 5 * 2 = <<5*2=10>>10",
            "c 10 - 1 = <<10-1=9>>9",
        ])
        inst = make_mi_instance(p, MIPolicy(p_negative=0.0), 3)
        assert sum(inst.labels) == 1
        assert len(inst.corruptions) == 1

    def test_negative_instance(self):
        p = problem_from_steps("m2", ["a 2 + 3 = <<2+3=5>>5"])
        inst = make_mi_instance(p, MIPolicy(p_negative=1.0), 0)
        assert not any(inst.labels)
        assert inst.corruptions == ()
        assert inst.steps == tuple(p.rationale.step_texts())

    def test_nothing_corruptible(self):
        p = problem_from_steps("m3", ["no numbers at all", "still none"])
        with pytest.raises(NothingCorruptible):
            make_mi_instance(p, MIPolicy(p_negative=0.0), 0)

    def test_reversibility(self):
        p = problem_from_steps("m4", [
            "x 4 * 4 = <<4*4=16>>16",
            "y 16 + 4 = <<16+4=20>>20",
        ])
        inst = make_mi_instance(p, MIPolicy(p_negative=0.0), 9)
        restored = list(inst.steps)
        for c in inst.corruptions:
            restored[c.step_index] = c.original_text
        assert restored == p.rationale.step_texts()

    def test_minimality(self):
        p = problem_from_steps("m5", [
            "x 4 * 4 = <<4*4=16>>16",
            "y 16 + 4 = <<16+4=20>>20",
            "z 20 / 4 = <<20/4=5>>5",
        ])
        inst = make_mi_instance(p, MIPolicy(p_negative=0.0), 11)
        originals = p.rationale.step_texts()
        for i, (label, text) in enumerate(zip(inst.labels, inst.steps)):
            assert (text != originals[i]) == label

    def test_determinism(self):
        p = problem_from_steps("m6", ["a 2 + 3 = <<2+3=5>>5", "b 1 * 2 = <<1*2=2>>2"])
        policy = MIPolicy(p_negative=0.3)
        assert make_mi_instance(p, policy, 5) == make_mi_instance(p, policy, 5)

    def test_position_uniformity(self, fixture_corpus):
        # positions of corrupted steps should be uniform over eligible steps
        policy = MIPolicy(p_negative=0.0)
        three_step = [
            p for p in fixture_corpus if len(p.rationale.steps) == 3
        ]
        counts = Counter()
        trials = 0
        for seed in range(400):
            for p in three_step:
                inst = make_mi_instance(p, policy, seed)
                counts[inst.erroneous_indices()[0]] += 1
                trials += 1
        for position in range(3):
            assert abs(counts[position] / trials - 1 / 3) < 0.03


class TestLabelSoundness:
    def test_soundness_over_fixture_corpus(self, fixture_corpus):
        policy = MIPolicy(p_negative=0.0, recompute=False)
        checked = 0
        for problem in fixture_corpus:
            inst = make_mi_instance(problem, policy, 21)
            for i, text in enumerate(inst.steps):
                annotations = corpus.find_annotations(text)
                if not annotations:
                    continue
                flagged = any(
                    calc.verify_annotation(a).status is calc.VerifyStatus.INCONSISTENT
                    for a in annotations
                )
                assert flagged == inst.labels[i], (problem.id, i, text)
                checked += 1
        assert checked > 0


class TestCorpusAugmentAndSerialization:
    def test_negative_rate(self, fixture_corpus):
        policy = MIPolicy(p_negative=0.5)
        instances, report = augment_corpus(fixture_corpus, policy, 13)
        assert report.emitted == len(instances)
        assert 0 < report.negatives < len(instances)

    def test_json_roundtrip(self):
        p = problem_from_steps("j1", ["a 2 + 3 = <<2+3=5>>5", "b 1 * 2 = <<1*2=2>>2"])
        inst = make_mi_instance(p, MIPolicy(p_negative=0.0), 17)
        line = instance_to_json(inst)
        obj = json.loads(line)
        assert obj["task"] == "MI"
        assert set(obj) == {
            "problem_id", "task", "steps", "erroneous_indices", "corruption_meta", "seed",
        }
        assert instance_from_json(line) == inst
