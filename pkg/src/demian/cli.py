"""Single entry point exposing all workflows as subcommands.

Exit codes: 0 success, 1 validation error (bad arguments, bad config, bad
input values), 2 runtime failure (I/O, client transport, unexpected).
Logs go to stderr as JSON lines {timestamp, level, subcommand, message};
data goes to stdout or to files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import accounting, aggregation
from .annotation_pipeline import ASPECT_ORDER, AspectKind, load_caption_index, run_batch
from .async_runtime import (
    RolloutConfig,
    RolloutMode,
    ScriptedPolicy,
    parse_latency,
    run_episodes,
    summarize_traces,
)
from .composite_runner import (
    EXAMPLE_SUITE,
    PromptMode,
    aggregate_composite,
    load_suite,
    run_suite,
)
from .ingestion import Dataset, load_corpus, split_episode
from .instructor_data import load_reward_table, sample_sft_dataset, write_sft_dataset
from .vlm_client import ClientConfig, ClientError, HttpVlmClient, MockVlmClient

logger = logging.getLogger("demian.cli")


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad usage; the contract here is 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _ArgumentError(message)


class _JsonLineFormatter(logging.Formatter):
    def __init__(self, subcommand: str):
        super().__init__()
        self._subcommand = subcommand

    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {
                "timestamp": self.formatTime(record, "%Y-%m-%dT%H:%M:%S%z"),
                "level": record.levelname,
                "subcommand": self._subcommand,
                "message": record.getMessage(),
            }
        )


def _setup_logging(subcommand: str) -> None:
    root = logging.getLogger("demian")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLineFormatter(subcommand))
    root.addHandler(handler)
    root.setLevel(logging.INFO)


_PATH_KEYS = {"corpus", "annotations", "reward_table", "outputs"}
_CLIENT_KEYS = {"endpoint_url", "model_id", "max_retries", "base_backoff", "rate_limit", "timeout"}
_DEFAULT_KEYS = {"chunk_horizon", "step_duration", "done_threshold", "seed"}


@dataclass(frozen=True)
class GlobalConfig:
    paths: Mapping[str, str]
    client: Mapping[str, object]
    defaults: Mapping[str, object]

    @classmethod
    def empty(cls) -> "GlobalConfig":
        return cls(paths={}, client={}, defaults={})


def load_config(path) -> GlobalConfig:
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    unknown = set(doc) - {"paths", "client", "defaults"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    for section, allowed in (
        ("paths", _PATH_KEYS),
        ("client", _CLIENT_KEYS),
        ("defaults", _DEFAULT_KEYS),
    ):
        extra = set(doc.get(section, {})) - allowed
        if extra:
            raise ValueError(f"unknown keys in [{section}]: {sorted(extra)}")
    return GlobalConfig(
        paths=doc.get("paths", {}),
        client=doc.get("client", {}),
        defaults=doc.get("defaults", {}),
    )


def _pick(flag_value, section: Mapping, key: str, fallback):
    if flag_value is not None:
        return flag_value
    if key in section:
        return section[key]
    return fallback


def _parse_aspects(text: str) -> list[AspectKind]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise ValueError("no aspects given")
    try:
        return [AspectKind(n) for n in names]
    except ValueError:
        known = ", ".join(a.value for a in ASPECT_ORDER)
        raise ValueError(f"unknown aspect in {text!r}; known aspects: {known}") from None


def _build_client(args, config: GlobalConfig):
    client_cfg = config.client
    endpoint = _pick(args.endpoint, client_cfg, "endpoint_url", "")
    kwargs = {
        "model_id": _pick(args.model, client_cfg, "model_id", None),
        "max_retries": _pick(args.max_retries, client_cfg, "max_retries", None),
        "base_backoff": _pick(args.base_backoff, client_cfg, "base_backoff", None),
        "rate_limit": _pick(args.rate_limit, client_cfg, "rate_limit", None),
        "timeout": _pick(args.timeout, client_cfg, "timeout", None),
    }
    kwargs = {k: v for k, v in kwargs.items() if v is not None}
    if args.mock:
        cfg = ClientConfig(endpoint_url="mock://", **kwargs)
        return MockVlmClient(config=cfg, jitter_rng=random.Random(args.seed))
    if not endpoint:
        raise ValueError("an endpoint URL is required unless --mock is given")
    return HttpVlmClient(ClientConfig(endpoint_url=endpoint, **kwargs))


def _cmd_annotate(args, config: GlobalConfig) -> int:
    corpus = _pick(args.corpus, config.paths, "corpus", None)
    if corpus is None:
        raise ValueError("a corpus path is required (--corpus or [paths] corpus)")
    sink = _pick(args.out, config.paths, "annotations", None)
    if sink is None:
        raise ValueError("a sink path is required (--out or [paths] annotations)")
    checkpoint = args.checkpoint if args.checkpoint is not None else f"{sink}.ckpt"
    aspects = _parse_aspects(args.aspects)
    dataset = Dataset(args.dataset)

    segments = []
    primitive_sequences: dict[str, list[str]] = {}
    for episode in load_corpus(corpus, dataset, on_error=args.on_error):
        if episode.primitive_spans:
            primitive_sequences[episode.episode_id] = [
                label for label, _, _ in episode.primitive_spans
            ]
        segments.extend(split_episode(episode))
    logger.info("annotating %d segments x %d aspects", len(segments), len(aspects))

    client = _build_client(args, config)
    report = run_batch(
        segments,
        aspects,
        client,
        sink,
        checkpoint,
        workers=args.workers,
        failure_path=args.failures,
        primitive_sequences=primitive_sequences,
        f_max=args.f_max,
        max_sentences=args.max_sentences,
    )
    logger.info(
        "batch done: %d completed, %d failed, %d skipped",
        report.completed,
        report.failed,
        report.skipped,
    )
    print(json.dumps(report.to_dict()))
    return 0


def _cmd_sft_gen(args, config: GlobalConfig) -> int:
    reward_path = _pick(args.reward_table, config.paths, "reward_table", None)
    if reward_path is None:
        raise ValueError("a reward table path is required (--reward-table or [paths] reward_table)")
    annotations_path = _pick(args.annotations, config.paths, "annotations", None)
    if annotations_path is None:
        raise ValueError("an annotations path is required (--annotations or [paths] annotations)")
    corpus = _pick(args.corpus, config.paths, "corpus", None)
    if corpus is None:
        raise ValueError("a corpus path is required (--corpus or [paths] corpus)")

    rt = load_reward_table(reward_path)
    captions = load_caption_index(annotations_path)
    episodes = list(load_corpus(corpus, Dataset(args.dataset)))
    seed = int(_pick(args.seed, config.defaults, "seed", 0))
    examples, skipped = sample_sft_dataset(
        rt,
        captions,
        episodes,
        seed,
        args.n,
        temperature=args.temperature,
        top_k=args.top_k,
        strategy=args.strategy,
    )
    write_sft_dataset(examples, args.out)
    logger.info("wrote %d examples (%d draws skipped) to %s", len(examples), skipped, args.out)
    print(json.dumps({"written": len(examples), "skipped": skipped}))
    return 0


def _cmd_simulate(args, config: GlobalConfig) -> int:
    cfg = RolloutConfig(
        mode=RolloutMode(args.mode),
        latency_model=parse_latency(args.latency),
        chunk_horizon=int(_pick(args.chunk, config.defaults, "chunk_horizon", 8)),
        step_duration=float(_pick(args.dt, config.defaults, "step_duration", 0.085)),
        max_steps=args.steps,
        rng_seed=int(_pick(args.seed, config.defaults, "seed", 0)),
    )
    policy = None
    if args.success_base is not None or args.success_instructed is not None:
        policy = ScriptedPolicy(
            success_base=args.success_base or 0.0,
            success_instructed=args.success_instructed or 0.0,
        )
    traces = run_episodes(cfg, args.episodes, policy=policy, task_prompt=args.prompt)
    summary = summarize_traces(traces)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as f:
            for i, trace in enumerate(traces):
                for event in trace.events:
                    f.write(json.dumps({"episode": i, **event.to_dict()}) + "\n")
        logger.info("wrote %d traces to %s", len(traces), args.trace)
    if args.plot:
        from . import report

        steps = [t.injected_step for t in traces if t.injected_step is not None]
        if steps:
            report.render_injection_histogram(
                steps, args.plot, title=f"{args.mode}, latency {args.latency}"
            )
            logger.info("wrote %s", args.plot)
        else:
            logger.info("no injections to plot; skipping %s", args.plot)
    print(json.dumps(summary.to_dict()))
    return 0


def _stub_instructor(task_description: str) -> str:
    # Deterministic stand-in for a trained instructor.
    return f"Focus on the current subgoal: {task_description}"


def _cmd_composite(args, config: GlobalConfig) -> int:
    suite = load_suite(args.suite) if args.suite else list(EXAMPLE_SUITE)
    mode = PromptMode.from_cli(args.mode)
    results = run_suite(
        suite,
        mode,
        episodes=args.episodes,
        done_threshold=float(_pick(args.threshold, config.defaults, "done_threshold", 0.5)),
        max_steps=args.max_steps,
        chunk_horizon=int(_pick(args.chunk, config.defaults, "chunk_horizon", 8)),
        base_seed=int(_pick(args.seed, config.defaults, "seed", 0)),
        instructor=_stub_instructor if mode is PromptMode.DYNAMIC_INSTRUCTOR else None,
    )
    table = aggregate_composite(results)
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["mode", "phase1", "phase2", "full_task"])
    for m, rates in table.items():
        writer.writerow([m.value, repr(rates.phase1), repr(rates.phase2), repr(rates.full_task)])
    text = buffer.getvalue()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        logger.info("wrote %s", args.out)
    else:
        sys.stdout.write(text)
    if args.plot:
        from . import report

        report.render_composite_rates(
            {m.value: rates.to_dict() for m, rates in table.items()}, args.plot
        )
        logger.info("wrote %s", args.plot)
    return 0


def _cmd_cost(args, config: GlobalConfig) -> int:
    cm = accounting.CostModel(
        active_params=args.params,
        input_tokens=args.input_tokens,
        output_tokens=args.output_tokens,
        price_in=args.price_in,
        price_out=args.price_out,
    )
    print(f"flops_per_call {accounting.flops_per_call(cm):e}")
    print(f"corpus_flops {accounting.corpus_flops(cm, args.clips, args.aspects):e}")
    print(f"corpus_dollars {accounting.corpus_dollars(cm, args.clips, args.aspects):.2f}")
    return 0


def _cmd_aggregate(args, config: GlobalConfig) -> int:
    matrix = aggregation.read_matrix_csv(args.matrix)
    if args.families:
        spec = aggregation.load_family_spec(args.families)
        matrix = aggregation.summarize_families(matrix, spec, include_avg=False)
    if args.oracle_over:
        over = [r.strip() for r in args.oracle_over.split(",") if r.strip()]
        matrix = matrix.with_row("oracle", aggregation.oracle_row(matrix, over))
    if not args.no_avg:
        matrix = aggregation.with_avg_column(matrix)
    if args.out:
        aggregation.write_matrix_csv(matrix, args.out, display=not args.full_precision)
        logger.info("wrote %s", args.out)
    else:
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        writer.writerow(["condition", *matrix.columns])
        for row_id, row in zip(matrix.rows, matrix.values):
            if args.full_precision:
                cells = [repr(v) for v in row]
            else:
                cells = [f"{aggregation.round_display(v):.2f}" for v in row]
            writer.writerow([row_id, *cells])
        sys.stdout.write(buffer.getvalue())
    if args.plot:
        from . import report

        display = [[aggregation.round_display(v) for v in row] for row in matrix.values]
        report.render_matrix_heatmap(matrix.rows, matrix.columns, display, args.plot)
        logger.info("wrote %s", args.plot)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="demian", description="Annotation, simulation, and aggregation tooling.")
    parser.add_argument("--config", help="TOML config file; flags override its values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", parents=[], help="run the VLM re-annotation batch")
    p.add_argument("--corpus", help="episode JSONL file or directory")
    p.add_argument(
        "--dataset", required=True, choices=[d.value for d in Dataset], help="corpus dataset id"
    )
    p.add_argument("--out", help="annotation sink JSONL path")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>.ckpt)")
    p.add_argument("--failures", help="failure log JSONL path")
    p.add_argument(
        "--aspects",
        default=",".join(a.value for a in ASPECT_ORDER),
        help="comma-separated aspect names",
    )
    p.add_argument("--on-error", default="abort", choices=["abort", "skip"])
    p.add_argument("--f-max", type=int, default=10, help="frame sample cap per segment")
    p.add_argument("--max-sentences", type=int, default=2)
    p.add_argument("--workers", type=int, default=1, help="parallel (segment, aspect) calls")
    p.add_argument("--endpoint", help="chat-completions base URL")
    p.add_argument("--model", help="model id")
    p.add_argument("--max-retries", type=int)
    p.add_argument("--base-backoff", type=float)
    p.add_argument("--rate-limit", type=float)
    p.add_argument("--timeout", type=float)
    p.add_argument("--mock", action="store_true", help="use the deterministic mock client")
    p.add_argument("--seed", type=int, default=0, help="mock client jitter seed")
    p.set_defaults(handler=_cmd_annotate)

    p = sub.add_parser("sft-gen", help="sample the reward-weighted SFT dataset")
    p.add_argument("--reward-table", help="reward table JSON path")
    p.add_argument("--annotations", help="annotation sink JSONL path")
    p.add_argument("--corpus", help="episode JSONL file or directory")
    p.add_argument(
        "--dataset", required=True, choices=[d.value for d in Dataset], help="corpus dataset id"
    )
    p.add_argument("--out", required=True, help="SFT dataset JSONL path")
    p.add_argument("--n", type=int, default=1000, help="number of examples to draw")
    p.add_argument("--seed", type=int)
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--strategy", default="softmax", choices=["softmax", "top1"])
    p.set_defaults(handler=_cmd_sft_gen)

    p = sub.add_parser("simulate", help="run the instruction-injection simulator")
    p.add_argument("--mode", required=True, choices=[m.value for m in RolloutMode])
    p.add_argument(
        "--latency",
        default="constant:1.86",
        help="constant:S | gaussian:MEAN,STD | empirical:a,b,...",
    )
    p.add_argument("--chunk", type=int, help="action chunk horizon H")
    p.add_argument("--dt", type=float, help="step duration in seconds")
    p.add_argument("--steps", type=int, default=400, help="max steps per episode")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--prompt", default="", help="task prompt text")
    p.add_argument("--success-base", type=float)
    p.add_argument("--success-instructed", type=float)
    p.add_argument("--trace", help="write per-event JSONL here")
    p.add_argument("--plot", help="write injected-step histogram PNG here")
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("composite", help="run the composite-task state machine")
    p.add_argument("--suite", help="composite suite JSON (default: built-in 3-task suite)")
    p.add_argument(
        "--mode", required=True, choices=["fix", "dynamic-gt", "dynamic-instructor"]
    )
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--max-steps", type=int, default=1200)
    p.add_argument("--threshold", type=float, help="done-flag threshold in (0,1)")
    p.add_argument("--chunk", type=int, help="action chunk horizon H")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write rates CSV here instead of stdout")
    p.add_argument("--plot", help="write rates bar chart PNG here")
    p.set_defaults(handler=_cmd_composite)

    p = sub.add_parser("cost", help="FLOPs and dollar cost of annotation generation")
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--aspects", type=int, required=True)
    p.add_argument("--params", type=float, default=3e9, help="active parameter count")
    p.add_argument("--in", dest="input_tokens", type=float, default=8200.0)
    p.add_argument("--out", dest="output_tokens", type=float, default=150.0)
    p.add_argument("--price-in", type=float, default=0.13, help="dollars per 1e6 input tokens")
    p.add_argument("--price-out", type=float, default=0.52, help="dollars per 1e6 output tokens")
    p.set_defaults(handler=_cmd_cost)

    p = sub.add_parser("aggregate", help="summarize a results matrix")
    p.add_argument("--matrix", required=True, help="results matrix CSV")
    p.add_argument("--oracle-over", help="comma-separated condition rows for the oracle")
    p.add_argument("--families", help="family spec JSON")
    p.add_argument("--no-avg", action="store_true", help="skip the trailing Avg column")
    p.add_argument("--full-precision", action="store_true", help="emit full-precision cells")
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.add_argument("--plot", help="write heatmap PNG here")
    p.set_defaults(handler=_cmd_aggregate)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help paths
        return 0 if exc.code in (None, 0) else int(exc.code)
    _setup_logging(args.command)
    try:
        if args.config:
            config = load_config(args.config)
        else:
            config = GlobalConfig.empty()
        return args.handler(args, config)
    except ValueError as exc:
        logger.error("%s", exc)
        return 1
    except ClientError as exc:
        logger.error("client failure: %s", exc)
        return 2
    except OSError as exc:
        logger.error("i/o failure: %s", exc)
        return 2
    except Exception as exc:  # pragma: no cover - last-resort mapping
        logger.error("unexpected failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
