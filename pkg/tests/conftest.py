import json
import random

import pytest

from mathaug import corpus as corpus_mod


def _consistent_step(rng: random.Random, idx: int) -> tuple[str, int]:
    """One rationale line with a self-consistent <<expr=value>> annotation."""
    op = rng.choice("+-*/")
    if op == "/":
        b = rng.randint(2, 9)
        v = rng.randint(2, 40)
        a = b * v
    elif op == "-":
        b = rng.randint(1, 50)
        a = b + rng.randint(1, 200)
        v = a - b
    elif op == "+":
        a, b = rng.randint(1, 200), rng.randint(1, 200)
        v = a + b
    else:
        a, b = rng.randint(2, 30), rng.randint(2, 12)
        v = a * b
    noun = rng.choice(["apples", "clips", "dollars", "marbles", "pages"])
    text = f"Step {idx}: that makes {a} {op} {b} = <<{a}{op}{b}={v}>>{v} {noun}."
    return text, v


def make_gsm8k_line(rng: random.Random, i: int, n_steps: int) -> str:
    steps = []
    value = 0
    for s in range(n_steps):
        text, value = _consistent_step(rng, s)
        steps.append(text)
    question = (
        f"Problem {i}: Jamie starts with {rng.randint(1, 99)} items and keeps "
        f"trading for {n_steps} rounds. How many items remain?"
    )
    answer = "\n".join(steps) + f"\n#### {value}"
    return json.dumps({"question": question, "answer": answer}, ensure_ascii=False)


def build_gsm8k_lines(n: int = 220, seed: int = 1234) -> list[str]:
    rng = random.Random(seed)
    return [make_gsm8k_line(rng, i, 2 + i % 11) for i in range(n)]


@pytest.fixture(scope="session")
def gsm8k_lines() -> list[str]:
    return build_gsm8k_lines()


@pytest.fixture(scope="session")
def fixture_corpus(gsm8k_lines) -> list[corpus_mod.MathProblem]:
    problems, report = corpus_mod.ingest_lines(gsm8k_lines, corpus_mod.Source.GSM8K)
    assert report.skipped == 0
    return problems


@pytest.fixture()
def gsm8k_file(tmp_path, gsm8k_lines):
    path = tmp_path / "gsm8k.jsonl"
    path.write_text("\n".join(gsm8k_lines) + "\n", encoding="utf-8")
    return path
