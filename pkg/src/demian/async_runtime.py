"""Deterministic discrete-event simulation of instruction delivery.

A policy actor emits fixed-size action chunks at its native cadence while an
instructor actor produces an instruction after a sampled latency. In async
mode the instruction splices in at the next chunk-generation instant and the
policy never waits; in sync mode the first chunk blocks until the instruction
is ready. Everything runs on a virtual clock, so a given seed yields a
byte-identical trace.
"""

from __future__ import annotations

import heapq
import json
import math
import random
import statistics
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Mapping, Sequence, Union


class RolloutMode(Enum):
    BASELINE = "baseline"
    SYNC = "sync"
    ASYNC = "async"


class EventKind(Enum):
    # Listing order is the tie-break priority at equal virtual time.
    INSTRUCTION_REQUESTED = "instruction_requested"
    INSTRUCTION_READY = "instruction_ready"
    CHUNK_GENERATED = "chunk_generated"
    INSTRUCTION_INJECTED = "instruction_injected"
    STEP_EXECUTED = "step_executed"
    ROLLOUT_END = "rollout_end"


_KIND_RANK = {kind: i for i, kind in enumerate(EventKind)}


@dataclass(frozen=True)
class ConstantLatency:
    seconds: float

    def __post_init__(self):
        if self.seconds < 0:
            raise ValueError(f"latency must be >= 0, got {self.seconds}")

    def sample(self, rng: random.Random) -> float:
        return self.seconds


@dataclass(frozen=True)
class GaussianLatency:
    mean: float
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ValueError(f"std must be >= 0, got {self.std}")

    def sample(self, rng: random.Random) -> float:
        return max(0.0, rng.gauss(self.mean, self.std))


@dataclass(frozen=True)
class EmpiricalLatency:
    samples: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise ValueError("empirical latency needs at least one sample")
        if any(s < 0 for s in self.samples):
            raise ValueError("latency samples must be >= 0")

    def sample(self, rng: random.Random) -> float:
        return rng.choice(self.samples)


LatencyModel = Union[ConstantLatency, GaussianLatency, EmpiricalLatency]


def parse_latency(text: str) -> LatencyModel:
    """Parse "constant:1.86", "gaussian:1.87,0.05", or "empirical:a,b,c"."""
    kind, sep, rest = text.partition(":")
    if not sep:
        raise ValueError(f"latency spec {text!r} must look like kind:params")
    try:
        if kind == "constant":
            return ConstantLatency(float(rest))
        if kind == "gaussian":
            mean, std = rest.split(",")
            return GaussianLatency(float(mean), float(std))
        if kind == "empirical":
            return EmpiricalLatency(tuple(float(x) for x in rest.split(",")))
    except ValueError as exc:
        raise ValueError(f"bad latency spec {text!r}: {exc}") from exc
    raise ValueError(f"unknown latency kind {kind!r}")


@dataclass(frozen=True)
class RolloutConfig:
    mode: RolloutMode
    latency_model: LatencyModel
    chunk_horizon: int = 8
    step_duration: float = 0.085  # calibration default; not a protocol constant
    max_steps: int = 400
    rng_seed: int = 0

    def __post_init__(self):
        if self.chunk_horizon < 1:
            raise ValueError(f"chunk_horizon must be >= 1, got {self.chunk_horizon}")
        if self.step_duration <= 0:
            raise ValueError(f"step_duration must be > 0, got {self.step_duration}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")


@dataclass(frozen=True)
class TraceEvent:
    time: float
    kind: EventKind
    payload: Mapping[str, object]

    def to_dict(self) -> dict:
        d = {"time": self.time, "kind": self.kind.value}
        d.update(self.payload)
        return d


@dataclass(frozen=True)
class RolloutTrace:
    events: tuple[TraceEvent, ...]
    injected_step: int | None
    injected_time: float | None
    wall_clock: float
    success: bool | None = None

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(ev.to_dict()) for ev in self.events)


@dataclass(frozen=True)
class ScriptedPolicy:
    """Reports episode success with a probability that depends on whether the
    instruction was injected."""

    success_base: float = 0.0
    success_instructed: float = 0.0

    def success(self, instructed: bool, rng: random.Random) -> bool:
        p = self.success_instructed if instructed else self.success_base
        return rng.random() < p


InstructorStub = Callable[[str], str]


def run_rollout(
    cfg: RolloutConfig,
    policy: ScriptedPolicy | None = None,
    task_prompt: str = "",
    instruction_source: InstructorStub | None = None,
) -> RolloutTrace:
    """Simulate one rollout and return its ordered event trace.

    The latency sample is the first consumption of the seeded RNG, so it can
    be re-derived independently from cfg.rng_seed.
    """
    rng = random.Random(cfg.rng_seed)
    H = cfg.chunk_horizon
    dt = cfg.step_duration
    S = cfg.max_steps
    chunk_duration = H * dt
    n_chunks = math.ceil(S / H)
    baseline_wall = S * dt

    heap: list[tuple[float, int, int, EventKind, dict]] = []
    seq = 0

    def push(time: float, kind: EventKind, payload: dict) -> None:
        nonlocal seq
        heapq.heappush(heap, (time, _KIND_RANK[kind], seq, kind, payload))
        seq += 1

    latency: float | None = None
    injected_step: int | None = None
    injected_time: float | None = None
    offset = 0.0
    instruction = ""
    if cfg.mode is not RolloutMode.BASELINE:
        latency = cfg.latency_model.sample(rng)
        instruction = (
            instruction_source(task_prompt)
            if instruction_source is not None
            else "follow the annotated instruction"
        )
        push(0.0, EventKind.INSTRUCTION_REQUESTED, {"prompt": task_prompt})
        push(latency, EventKind.INSTRUCTION_READY, {"latency": latency})

    if cfg.mode is RolloutMode.SYNC:
        # The whole schedule waits for the instruction; by the reporting
        # convention the injected time is 0 and the delay lands in wall_clock.
        offset = latency
        injected_step = 1
        injected_time = 0.0
        push(latency, EventKind.INSTRUCTION_INJECTED, {"step": 1, "latency": latency})
        wall_clock = baseline_wall + latency
    elif cfg.mode is RolloutMode.ASYNC:
        boundary = math.ceil(latency / chunk_duration)
        if boundary < n_chunks:
            injected_step = boundary * H + 1
            injected_time = latency
            push(
                boundary * chunk_duration,
                EventKind.INSTRUCTION_INJECTED,
                {"step": injected_step, "latency": latency},
            )
        wall_clock = baseline_wall
    else:
        wall_clock = baseline_wall

    for k in range(n_chunks):
        first_step = k * H + 1
        last_step = min((k + 1) * H, S)
        prompt = task_prompt
        if cfg.mode is RolloutMode.SYNC or (
            cfg.mode is RolloutMode.ASYNC
            and injected_step is not None
            and first_step >= injected_step
        ):
            prompt = task_prompt + "\n" + instruction if task_prompt else instruction
        push(
            offset + k * chunk_duration,
            EventKind.CHUNK_GENERATED,
            {"chunk_index": k, "first_step": first_step, "prompt": prompt},
        )
        for s in range(first_step, last_step + 1):
            push(offset + (s - 1) * dt, EventKind.STEP_EXECUTED, {"step": s})

    push(wall_clock, EventKind.ROLLOUT_END, {})

    events = []
    while heap:
        time, _, _, kind, payload = heapq.heappop(heap)
        events.append(TraceEvent(time=time, kind=kind, payload=payload))

    success = policy.success(injected_step is not None, rng) if policy else None
    return RolloutTrace(
        events=tuple(events),
        injected_step=injected_step,
        injected_time=injected_time,
        wall_clock=wall_clock,
        success=success,
    )


def derive_episode_seed(base_seed: int, index: int) -> int:
    # String seeding hashes via sha512, stable across processes.
    return random.Random(f"{base_seed}:{index}").getrandbits(63)


def run_episodes(
    cfg: RolloutConfig,
    episodes: int,
    policy: ScriptedPolicy | None = None,
    task_prompt: str = "",
    instruction_source: InstructorStub | None = None,
) -> list[RolloutTrace]:
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    traces = []
    for i in range(episodes):
        episode_cfg = replace(cfg, rng_seed=derive_episode_seed(cfg.rng_seed, i))
        traces.append(run_rollout(episode_cfg, policy, task_prompt, instruction_source))
    return traces


@dataclass(frozen=True)
class TraceSummary:
    episodes: int
    injected: int
    never_injected: int
    mean_injected_step: float | None
    median_injected_step: float | None
    mean_injected_time: float | None
    median_injected_time: float | None
    success_rate: float | None

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "injected": self.injected,
            "never_injected": self.never_injected,
            "mean_injected_step": self.mean_injected_step,
            "median_injected_step": self.median_injected_step,
            "mean_injected_time": self.mean_injected_time,
            "median_injected_time": self.median_injected_time,
            "success_rate": self.success_rate,
        }


def summarize_traces(traces: Sequence[RolloutTrace]) -> TraceSummary:
    """Means/medians over traces with an injection; never-injected traces are
    counted separately."""
    if not traces:
        raise ValueError("cannot summarize an empty trace list")
    injected = [t for t in traces if t.injected_step is not None]
    steps = [t.injected_step for t in injected]
    times = [t.injected_time for t in injected]
    reported = [t.success for t in traces if t.success is not None]
    return TraceSummary(
        episodes=len(traces),
        injected=len(injected),
        never_injected=len(traces) - len(injected),
        mean_injected_step=statistics.mean(steps) if steps else None,
        median_injected_step=statistics.median(steps) if steps else None,
        mean_injected_time=statistics.mean(times) if times else None,
        median_injected_time=statistics.median(times) if times else None,
        success_rate=sum(reported) / len(reported) if reported else None,
    )
