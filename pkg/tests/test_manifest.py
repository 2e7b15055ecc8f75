import json
import math

import pytest
from hypothesis import given, strategies as st

from mathaug import corpus, manifest
from mathaug.augment_mi import MIPolicy, make_mi_instance
from mathaug.augment_rr import make_rr_instance


@pytest.fixture()
def problem():
    return corpus.parse_gsm8k_record({"question": "Q", "answer": "A\nB\n#### 72"}, "p0")


@pytest.fixture()
def config():
    return manifest.ManifestConfig()


class TestConfig:
    def test_all_zero_lambdas_rejected(self):
        with pytest.raises(ValueError):
            manifest.ManifestConfig(lambda_sft=0, lambda_rr=0, lambda_mi=0)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            manifest.ManifestConfig(lambda_sft=-1)

    def test_template_placeholders_required(self):
        templates = {t: dict(v) for t, v in manifest.DEFAULT_TEMPLATES.items()}
        templates["RR"] = {"prompt": "no placeholder", "target": "{order}"}
        with pytest.raises(ValueError):
            manifest.ManifestConfig(templates=templates)

    def test_hash_is_stable(self, config):
        assert config.sha256() == manifest.ManifestConfig().sha256()


class TestRenderSFT:
    def test_default_template(self, problem, config):
        inst = manifest.render_sft(problem, config)
        assert inst.target == "A\nB\n#### 72"
        assert "Q" in inst.prompt
        assert inst.weight == config.lambda_sft

    def test_empty_question_rejected(self, config):
        p = corpus.parse_gsm8k_record({"question": " ", "answer": "A\n#### 1"}, "e0")
        with pytest.raises(manifest.EmptyField):
            manifest.render_sft(p, config)

    def test_paraphrase_same_target_different_prompt(self, problem, config):
        clone = corpus.MathProblem(
            id="p0#p1",
            source=problem.source,
            question="Reworded Q",
            rationale=problem.rationale,
            gold_answer=problem.gold_answer,
        )
        a = manifest.render_sft(problem, config)
        b = manifest.render_sft(clone, config)
        assert a.target == b.target
        assert a.prompt != b.prompt


class TestRenderRRMI:
    def test_rr_target_is_index_sequence(self, config):
        p = corpus.parse_gsm8k_record(
            {"question": "Q", "answer": "A\nB\nC\n#### 1"}, "r0"
        )
        rr = make_rr_instance(p, 42)
        inst = manifest.render_rr(rr, config, question=p.question)
        assert inst.target == " ".join(map(str, rr.target_order))
        assert manifest.parse_rr_target(inst.target) == list(rr.target_order)

    def test_mi_target_indices(self, config):
        p = corpus.parse_gsm8k_record(
            {"question": "Q", "answer": "a 2+3 = <<2+3=5>>5\nb 5*2 = <<5*2=10>>10\n#### 10"},
            "m0",
        )
        mi = make_mi_instance(p, MIPolicy(p_negative=0.0), 3)
        inst = manifest.render_mi(mi, config, question=p.question)
        assert manifest.parse_mi_target(inst.target) == mi.erroneous_indices()

    def test_mi_target_none_token(self, config):
        p = corpus.parse_gsm8k_record(
            {"question": "Q", "answer": "a 2+3 = <<2+3=5>>5\n#### 5"}, "m1"
        )
        mi = make_mi_instance(p, MIPolicy(p_negative=1.0), 0)
        inst = manifest.render_mi(mi, config, question=p.question)
        assert inst.target == "NONE"
        assert manifest.parse_mi_target(inst.target) == []


class TestEmit:
    def test_header_and_counts(self, tmp_path, problem, config):
        path = tmp_path / "m.jsonl"
        instances = [manifest.render_sft(problem, config)]
        summary = manifest.emit_manifest(instances, config, str(path))
        lines = path.read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])
        assert header["schema_version"] == manifest.SCHEMA_VERSION
        assert header["lambda"] == {"SFT": 1.0, "RR": 1.0, "MI": 1.0}
        assert "config_sha256" in header
        assert summary["counts"]["SFT"] == 1
        assert len(lines) == 2

    def test_determinism(self, tmp_path, fixture_corpus, config):
        instances = [manifest.render_sft(p, config) for p in fixture_corpus]
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        manifest.emit_manifest(list(reversed(instances)), config, str(a))
        manifest.emit_manifest(instances, config, str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_load_roundtrip(self, tmp_path, problem, config):
        path = tmp_path / "m.jsonl"
        instances = [manifest.render_sft(problem, config)]
        manifest.emit_manifest(instances, config, str(path))
        header, loaded = manifest.load_manifest(str(path))
        assert loaded == instances


class TestCombinedLoss:
    def test_equal_weights(self):
        config = manifest.ManifestConfig(1, 1, 1)
        assert manifest.combined_loss({"SFT": 2.0, "RR": 1.0, "MI": 0.5}, config) == 3.5

    def test_sft_only_reduction(self):
        config = manifest.ManifestConfig(1, 0, 0)
        assert manifest.combined_loss({"SFT": 2.0, "RR": 9.9, "MI": 9.9}, config) == 2.0

    def test_convex_mix(self):
        config = manifest.ManifestConfig(0.5, 0.25, 0.25)
        assert manifest.combined_loss({"SFT": 2, "RR": 2, "MI": 2}, config) == 2.0

    def test_absent_zero_weight_loss_warns(self, caplog):
        config = manifest.ManifestConfig(1, 0, 1)
        value = manifest.combined_loss({"SFT": 1.0, "MI": 1.0}, config)
        assert value == 2.0
        assert any("RR" in r.message for r in caplog.records)

    def test_absent_positive_weight_loss_errors(self):
        config = manifest.ManifestConfig(1, 1, 1)
        with pytest.raises(manifest.ManifestError):
            manifest.combined_loss({"SFT": 1.0}, config)

    def test_nonfinite_rejected(self):
        config = manifest.ManifestConfig(1, 1, 1)
        with pytest.raises(ValueError):
            manifest.combined_loss({"SFT": math.inf, "RR": 0, "MI": 0}, config)

    @given(
        st.floats(0, 100),
        st.floats(0, 100),
        st.floats(0, 100),
        st.floats(0.01, 10),
    )
    def test_scaling_all_lambdas_scales_loss(self, a, b, c, scale):
        base = manifest.ManifestConfig(1, 1, 1)
        scaled = manifest.ManifestConfig(scale, scale, scale)
        losses = {"SFT": a, "RR": b, "MI": c}
        lhs = manifest.combined_loss(losses, scaled)
        rhs = scale * manifest.combined_loss(losses, base)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    @given(st.floats(0, 100), st.floats(0, 100))
    def test_linearity_in_each_loss(self, x, y):
        config = manifest.ManifestConfig(1.0, 2.0, 0.5)
        base = {"SFT": 0.0, "RR": 3.0, "MI": 4.0}
        fx = manifest.combined_loss({**base, "SFT": x}, config)
        fy = manifest.combined_loss({**base, "SFT": y}, config)
        fxy = manifest.combined_loss({**base, "SFT": x + y}, config)
        f0 = manifest.combined_loss(base, config)
        assert fxy - f0 == pytest.approx((fx - f0) + (fy - f0), abs=1e-9)

    def test_breakdown_invariant(self):
        config = manifest.ManifestConfig(1.0, 0.5, 0.25)
        bd = manifest.LossBreakdown.compute(4.0, 2.0, 1.0, config)
        assert bd.loss_final == 4.0 + 1.0 + 0.25
