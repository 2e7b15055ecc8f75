"""Command-line entry point wiring ingest → augmentation → manifest → eval.

Exit codes: 0 success, 1 validation error, 2 I/O or endpoint error.
Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from . import SCHEMA_VERSION, __version__
from . import augment_mi, augment_rr, calc, evaluation, manifest as manifest_mod, paraphrase
from .corpus import (
    CorpusError,
    Source,
    atomic_write,
    ingest_file,
    load_corpus,
    save_corpus,
)

log = logging.getLogger("mathaug")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps(
            {"level": record.levelname, "logger": record.name, "message": record.getMessage()}
        )


def _setup_logging(json_logs: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        handler.setFormatter(_JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=logging.INFO, handlers=[handler], force=True)


@dataclass
class RunConfig:
    global_seed: int = 0
    jobs: int = 1
    endpoint: paraphrase.EndpointConfig = field(default_factory=paraphrase.EndpointConfig)
    manifest: manifest_mod.ManifestConfig = field(default_factory=manifest_mod.ManifestConfig)
    mi_policy: augment_mi.MIPolicy = field(default_factory=augment_mi.MIPolicy)

    def sha256(self) -> str:
        payload = {
            "global_seed": self.global_seed,
            "endpoint": {
                "base_url": self.endpoint.base_url,
                "model_name": self.endpoint.model_name,
                "requests_per_minute": self.endpoint.requests_per_minute,
            },
            "manifest": self.manifest.lambdas(),
            "mi_policy": {
                "k": self.mi_policy.corruptions_per_instance,
                "numeric_ratio": self.mi_policy.numeric_ratio,
                "p_negative": self.mi_policy.p_negative,
                "recompute": self.mi_policy.recompute,
            },
        }
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")
        ).hexdigest()


def load_run_config(path: Optional[str]) -> RunConfig:
    """Read the sectioned key/value config file; flags override afterwards."""
    config = RunConfig()
    if not path:
        return config
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if parser.has_section("run"):
        run = parser["run"]
        config.global_seed = run.getint("seed", config.global_seed)
        config.jobs = run.getint("jobs", config.jobs)
    if parser.has_section("endpoint"):
        ep = parser["endpoint"]
        config.endpoint = paraphrase.EndpointConfig(
            base_url=ep.get("base_url", config.endpoint.base_url),
            model_name=ep.get("model_name", config.endpoint.model_name),
            api_key_env_name=ep.get("api_key_env_name", config.endpoint.api_key_env_name),
            max_concurrent_requests=ep.getint(
                "max_concurrent_requests", config.endpoint.max_concurrent_requests
            ),
            requests_per_minute=ep.getint(
                "requests_per_minute", config.endpoint.requests_per_minute
            ),
            timeout_seconds=ep.getfloat("timeout_seconds", config.endpoint.timeout_seconds),
            max_retries=ep.getint("max_retries", config.endpoint.max_retries),
        )
    if parser.has_section("manifest"):
        mf = parser["manifest"]
        config.manifest = manifest_mod.ManifestConfig(
            lambda_sft=mf.getfloat("lambda_sft", 1.0),
            lambda_rr=mf.getfloat("lambda_rr", 1.0),
            lambda_mi=mf.getfloat("lambda_mi", 1.0),
        )
    if parser.has_section("mi"):
        mi = parser["mi"]
        config.mi_policy = augment_mi.MIPolicy(
            corruptions_per_instance=mi.getint("k", 1),
            numeric_ratio=mi.getfloat("numeric_ratio", 0.5),
            p_negative=mi.getfloat("p_negative", 0.5),
            recompute=mi.getboolean("recompute", False),
        )
    return config


def _artifact_header(kind: str, config: RunConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "config_sha256": config.sha256(),
    }


def _write_jsonl(path: str, header: dict, lines: list[str]) -> None:
    payload = [json.dumps(header, sort_keys=True, ensure_ascii=False)] + lines
    atomic_write(path, ("\n".join(payload) + "\n").encode("utf-8"))


def _read_jsonl_body(path: str) -> list[str]:
    """All non-empty lines minus a leading artifact header, if present."""
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if lines and '"schema_version"' in lines[0] and '"kind"' in lines[0]:
        return lines[1:]
    return lines


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Subcommands

def cmd_ingest(args, config: RunConfig) -> int:
    source = Source(args.format.replace("-", "_"))
    mapping = None
    if args.mapping:
        with open(args.mapping, encoding="utf-8") as fh:
            mapping = json.load(fh)
    problems, report = ingest_file(args.input, source, mapping)
    save_corpus(problems, args.output, header=_artifact_header("corpus", config))
    print(
        f"ingested {report.parsed} records, skipped {report.skipped}",
        file=sys.stderr,
    )
    return 0


def cmd_augment_rr(args, config: RunConfig) -> int:
    problems = load_corpus(args.corpus)
    results = _parallel_map(
        lambda p: _try_rr(p, config.global_seed), problems, config.jobs
    )
    instances = [r for r in results if r is not None]
    skipped = len(results) - len(instances)
    lines = [augment_rr.instance_to_json(i) for i in instances]
    _write_jsonl(args.output, _artifact_header("rr", config), lines)
    print(f"rr: emitted {len(instances)}, skipped {skipped}", file=sys.stderr)
    return 0


def _try_rr(problem, seed):
    try:
        return augment_rr.make_rr_instance(problem, seed)
    except augment_rr.TooFewSteps:
        return None


def cmd_augment_mi(args, config: RunConfig) -> int:
    problems = load_corpus(args.corpus)
    policy = config.mi_policy
    results = _parallel_map(
        lambda p: _try_mi(p, policy, config.global_seed), problems, config.jobs
    )
    instances = [r for r in results if r is not None]
    skipped = len(results) - len(instances)
    lines = [augment_mi.instance_to_json(i) for i in instances]
    _write_jsonl(args.output, _artifact_header("mi", config), lines)
    print(f"mi: emitted {len(instances)}, skipped {skipped}", file=sys.stderr)
    return 0


def _try_mi(problem, policy, seed):
    try:
        return augment_mi.make_mi_instance(problem, policy, seed)
    except augment_mi.CorruptionError:
        return None


def cmd_paraphrase(args, config: RunConfig) -> int:
    problems = load_corpus(args.corpus)
    mode = "replay" if args.replay_only else ("record" if args.record else "auto")
    endpoint = config.endpoint
    if args.endpoint_config:
        endpoint_config = load_run_config(args.endpoint_config)
        endpoint = endpoint_config.endpoint
    client = paraphrase.ChatClient(endpoint, cache_path=args.cache, mode=mode)
    templates = (
        paraphrase.PromptTemplates.from_file(args.templates)
        if args.templates
        else paraphrase.PromptTemplates()
    )
    augmented, report = paraphrase.paraphrase_corpus(
        problems, args.n_per_question, client, templates
    )
    save_corpus(augmented, args.output, header=_artifact_header("corpus", config))
    print(
        f"paraphrase: generated {report.generated}, validated {report.validated}, "
        f"rejected {report.rejected}",
        file=sys.stderr,
    )
    return 0


def cmd_manifest(args, config: RunConfig) -> int:
    problems = load_corpus(args.corpus)
    by_id = {p.id: p for p in problems}
    mconfig = manifest_mod.ManifestConfig(
        lambda_sft=args.lambda_sft if args.lambda_sft is not None else config.manifest.lambda_sft,
        lambda_rr=args.lambda_rr if args.lambda_rr is not None else config.manifest.lambda_rr,
        lambda_mi=args.lambda_mi if args.lambda_mi is not None else config.manifest.lambda_mi,
    )
    instances = [manifest_mod.render_sft(p, mconfig) for p in problems]
    if args.rr:
        for line in _read_jsonl_body(args.rr):
            rr = augment_rr.instance_from_json(line)
            question = by_id[rr.problem_id].question if rr.problem_id in by_id else ""
            instances.append(manifest_mod.render_rr(rr, mconfig, question))
    if args.mi:
        for line in _read_jsonl_body(args.mi):
            mi = augment_mi.instance_from_json(line)
            question = by_id[mi.problem_id].question if mi.problem_id in by_id else ""
            instances.append(manifest_mod.render_mi(mi, mconfig, question))
    summary = manifest_mod.emit_manifest(instances, mconfig, args.output)
    print(json.dumps(summary), file=sys.stderr)
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    problems = load_corpus(args.corpus)
    predictions = evaluation.load_predictions(args.predictions)
    result = evaluation.grade(predictions, problems)
    report = evaluation.bin_by_steps(result, problems)
    summary = {
        "accuracy": result.accuracy,
        "correct": result.n_correct,
        "total": len(result.per_example),
        "bins": report.bins,
    }
    if args.json_out:
        atomic_write(args.json_out, (json.dumps(summary, indent=2) + "\n").encode("utf-8"))
    print(f"accuracy: {result.accuracy:.2f} ({result.n_correct}/{len(result.per_example)})")
    for label in evaluation.STEP_BINS:
        entry = report.bins[label]
        print(f"  steps {label}: {entry['accuracy']:.2f} ({entry['correct']}/{entry['count']})")
    return 0


def cmd_analyze(args, config: RunConfig) -> int:
    with open(args.table, encoding="utf-8") as fh:
        table = evaluation.AccuracyTable.from_csv(fh.read())
    deltas = evaluation.mean_improvement(table, args.baseline, args.method)
    for dataset, delta in deltas.items():
        print(f"{dataset}: {delta:+.2f}")
    if args.json_flag:
        print(json.dumps(deltas))
    return 0


def cmd_calc(args, config: RunConfig) -> int:
    value = calc.evaluate(args.expr)
    print(value if value.denominator > 1 else value.numerator)
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mathaug", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mathaug {__version__} (schema {SCHEMA_VERSION})")
    parser.add_argument("--config", help="run config file (INI sections: run, endpoint, manifest, mi)")
    parser.add_argument("--seed", type=int, help="global seed (overrides config)")
    parser.add_argument("--jobs", type=int, help="worker threads (overrides config)")
    parser.add_argument("--log-json", action="store_true", help="line-oriented JSON logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a dataset file into the canonical corpus schema")
    p.add_argument("input")
    p.add_argument("--format", required=True, choices=["gsm8k", "math", "gsm-hard", "svamp"])
    p.add_argument("--mapping", help="JSON field-name mapping file")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("augment-rr", help="emit step-reordering instances")
    p.add_argument("corpus")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_augment_rr)

    p = sub.add_parser("augment-mi", help="emit mistake-injection instances")
    p.add_argument("corpus")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_augment_mi)

    p = sub.add_parser("paraphrase", help="generate and validate question paraphrases")
    p.add_argument("corpus")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--n-per-question", type=int, default=3)
    p.add_argument("--cache", help="request cache JSONL path")
    p.add_argument("--replay-only", action="store_true")
    p.add_argument("--record", action="store_true")
    p.add_argument("--endpoint-config", help="config file with an [endpoint] section")
    p.add_argument("--templates", help="JSON file with generation/validation prompts")
    p.set_defaults(func=cmd_paraphrase)

    p = sub.add_parser("manifest", help="render instances into a training manifest")
    p.add_argument("corpus")
    p.add_argument("--rr", help="RR instances JSONL")
    p.add_argument("--mi", help="MI instances JSONL")
    p.add_argument("--lambda-sft", type=float, default=None)
    p.add_argument("--lambda-rr", type=float, default=None)
    p.add_argument("--lambda-mi", type=float, default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("eval", help="grade predictions against a corpus")
    p.add_argument("predictions")
    p.add_argument("corpus")
    p.add_argument("--json-out", help="write the summary JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="per-dataset mean improvement between two methods")
    p.add_argument("table", help="accuracy-grid CSV (method,model,<datasets...>)")
    p.add_argument("--baseline", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--json", dest="json_flag", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("calc", help="exact arithmetic utilities")
    calc_sub = p.add_subparsers(dest="calc_command", required=True)
    pe = calc_sub.add_parser("eval", help="evaluate an expression exactly")
    pe.add_argument("expr")
    pe.set_defaults(func=cmd_calc)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_json)
    try:
        config = load_run_config(args.config)
        if args.seed is not None:
            config.global_seed = args.seed
        if args.jobs is not None:
            config.jobs = args.jobs
        return args.func(args, config)
    except (
        CorpusError,
        calc.CalcError,
        manifest_mod.ManifestError,
        ValueError,
    ) as exc:
        log.error("%s", exc)
        return 1
    except (OSError, paraphrase.ParaphraseError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
