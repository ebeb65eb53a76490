"""Phase state machine for composite tasks.

A composite task is an ordered list of atomic phases. Milestones (strict
checkers) are evaluated every step regardless of prompting and must be
reached in order. In dynamic modes a separate advancement rule (done-flag
above threshold AND the current phase's lenient trigger, at the same step)
moves the active prompt to the next atomic instruction; the swap itself
lands at the next chunk boundary. Fix mode keeps the composite description
for the whole episode.

Environments are scripted predicate machines, not physics; they give the
state machine a falsifiable test surface.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping, Sequence


class PromptMode(Enum):
    FIX = "fix"
    DYNAMIC_GT = "dynamic_gt"
    DYNAMIC_INSTRUCTOR = "dynamic_instructor"

    @classmethod
    def from_cli(cls, text: str) -> "PromptMode":
        try:
            return cls(text.replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown prompt mode {text!r}") from None


@dataclass(frozen=True)
class PhaseSpec:
    atomic_instruction: str
    lenient_trigger: str
    strict_checker: str

    def __post_init__(self):
        if not self.atomic_instruction:
            raise ValueError("atomic_instruction must be non-empty")
        for name in ("lenient_trigger", "strict_checker"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be a non-empty predicate id")


@dataclass(frozen=True)
class CompositeTaskSpec:
    task_id: str
    composite_description: str
    phases: tuple[PhaseSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if len(self.phases) < 2:
            raise ValueError(
                f"composite task {self.task_id!r} needs >= 2 phases, got {len(self.phases)}"
            )


@dataclass(frozen=True)
class PhaseOutcome:
    phase_index: int  # 1-based
    reached: bool
    reached_step: int | None = None

    def __post_init__(self):
        if self.reached != (self.reached_step is not None):
            raise ValueError("reached_step must be present iff reached")


@dataclass(frozen=True)
class PromptEvent:
    step: int
    phase_index: int | None  # None in fix mode
    prompt: str


@dataclass(frozen=True)
class CompositeEpisodeResult:
    task_id: str
    mode: PromptMode
    phase_outcomes: tuple[PhaseOutcome, ...]
    full_success: bool
    prompt_history: tuple[PromptEvent, ...]


@dataclass(frozen=True)
class ConstantDoneFlag:
    value: float = 1.0

    def done_flag(self, step: int) -> float:
        return self.value


@dataclass(frozen=True)
class ScriptedDoneFlag:
    fn: Callable[[int], float]

    def done_flag(self, step: int) -> float:
        return self.fn(step)


@dataclass(frozen=True)
class ScriptedEnv:
    predicates: Mapping[str, Callable[[int], bool]]

    def check(self, pred_id: str, step: int) -> bool:
        try:
            pred = self.predicates[pred_id]
        except KeyError:
            raise ValueError(f"predicate id {pred_id!r} not in environment registry") from None
        return pred(step)


def resolve_predicate(pred_id: str, rng: random.Random) -> Callable[[int], bool]:
    """Resolve a predicate id to a step predicate.

    Forms: "always", "never", "step>=N", "window:A-B", "prob:P@N". The prob
    form draws once at resolve time: with probability P it behaves as
    step>=N, otherwise it never fires.
    """
    if pred_id == "always":
        return lambda s: True
    if pred_id == "never":
        return lambda s: False
    if pred_id.startswith("step>="):
        n = int(pred_id[len("step>="):])
        return lambda s: s >= n
    if pred_id.startswith("window:"):
        lo_text, sep, hi_text = pred_id[len("window:"):].partition("-")
        if not sep:
            raise ValueError(f"bad window predicate {pred_id!r}")
        lo, hi = int(lo_text), int(hi_text)
        if lo > hi:
            raise ValueError(f"window predicate {pred_id!r} has lo > hi")
        return lambda s: lo <= s <= hi
    if pred_id.startswith("prob:"):
        p_text, sep, n_text = pred_id[len("prob:"):].partition("@")
        if not sep:
            raise ValueError(f"bad prob predicate {pred_id!r}")
        p, n = float(p_text), int(n_text)
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"prob predicate {pred_id!r} needs P in [0,1]")
        if rng.random() < p:
            return lambda s: s >= n
        return lambda s: False
    raise ValueError(f"unknown predicate id {pred_id!r}")


def build_scripted_env(spec: CompositeTaskSpec, episode_seed: int) -> ScriptedEnv:
    """Resolve every predicate id used by spec with a per-episode RNG.

    Identical ids within one episode share one resolution; phases are
    resolved in order (lenient then strict) so the RNG consumption is
    deterministic.
    """
    rng = random.Random(episode_seed)
    predicates: dict[str, Callable[[int], bool]] = {}
    for phase in spec.phases:
        for pred_id in (phase.lenient_trigger, phase.strict_checker):
            if pred_id not in predicates:
                predicates[pred_id] = resolve_predicate(pred_id, rng)
    return ScriptedEnv(predicates=predicates)


def run_composite_episode(
    spec: CompositeTaskSpec,
    mode: PromptMode,
    env: ScriptedEnv,
    policy,
    done_threshold: float = 0.5,
    max_steps: int = 1200,
    *,
    chunk_horizon: int = 8,
    instructor: Callable[[str], str] | None = None,
) -> CompositeEpisodeResult:
    """Run one episode and report milestones, full success, and prompts.

    Per-step order: prompt swap (chunk boundaries only), then milestone
    checks (in phase order, any number per step), then at most one prompt
    advancement.
    """
    if not 0.0 < done_threshold < 1.0:
        raise ValueError(f"done_threshold must be in (0,1), got {done_threshold}")
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    if chunk_horizon < 1:
        raise ValueError(f"chunk_horizon must be >= 1, got {chunk_horizon}")
    if mode is PromptMode.DYNAMIC_INSTRUCTOR and instructor is None:
        raise ValueError("dynamic_instructor mode requires an instructor callable")
    for phase in spec.phases:
        for pred_id in (phase.lenient_trigger, phase.strict_checker):
            if pred_id not in env.predicates:
                raise ValueError(f"predicate id {pred_id!r} not in environment registry")

    n = len(spec.phases)
    reached_step: list[int | None] = [None] * n
    next_milestone = 0
    logical_phase = 0  # 0-based phase the policy should pursue
    prompt_phase: int | None = None  # 0-based phase of the active prompt
    prompt_history: list[PromptEvent] = []

    if mode is PromptMode.FIX:
        prompt_history.append(
            PromptEvent(step=1, phase_index=None, prompt=spec.composite_description)
        )

    for s in range(1, max_steps + 1):
        if (
            mode is not PromptMode.FIX
            and (s - 1) % chunk_horizon == 0
            and prompt_phase != logical_phase
        ):
            phase = spec.phases[logical_phase]
            if mode is PromptMode.DYNAMIC_GT:
                text = phase.atomic_instruction
            else:
                text = instructor(phase.atomic_instruction)
            prompt_history.append(
                PromptEvent(step=s, phase_index=logical_phase + 1, prompt=text)
            )
            prompt_phase = logical_phase
        while next_milestone < n and env.check(spec.phases[next_milestone].strict_checker, s):
            reached_step[next_milestone] = s
            next_milestone += 1
        if next_milestone == n:
            break
        if (
            mode is not PromptMode.FIX
            and logical_phase < n - 1
            and policy.done_flag(s) > done_threshold
            and env.check(spec.phases[logical_phase].lenient_trigger, s)
        ):
            logical_phase += 1

    outcomes = tuple(
        PhaseOutcome(phase_index=i + 1, reached=step is not None, reached_step=step)
        for i, step in enumerate(reached_step)
    )
    return CompositeEpisodeResult(
        task_id=spec.task_id,
        mode=mode,
        phase_outcomes=outcomes,
        full_success=reached_step[n - 1] is not None,
        prompt_history=tuple(prompt_history),
    )


def _episode_seed(base_seed: int, task_id: str, index: int) -> int:
    # Mode-independent, so fix and dynamic runs pair up on common seeds.
    return random.Random(f"{base_seed}:{task_id}:{index}").getrandbits(63)


def run_suite(
    suite: Sequence[CompositeTaskSpec],
    mode: PromptMode,
    *,
    episodes: int = 20,
    done_threshold: float = 0.5,
    max_steps: int = 1200,
    chunk_horizon: int = 8,
    base_seed: int = 0,
    policy=None,
    instructor: Callable[[str], str] | None = None,
) -> dict[tuple[str, PromptMode], list[CompositeEpisodeResult]]:
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    if not suite:
        raise ValueError("suite must contain at least one task")
    policy = policy if policy is not None else ConstantDoneFlag(1.0)
    results: dict[tuple[str, PromptMode], list[CompositeEpisodeResult]] = {}
    for spec in suite:
        episode_results = []
        for i in range(episodes):
            env = build_scripted_env(spec, _episode_seed(base_seed, spec.task_id, i))
            episode_results.append(
                run_composite_episode(
                    spec,
                    mode,
                    env,
                    policy,
                    done_threshold,
                    max_steps,
                    chunk_horizon=chunk_horizon,
                    instructor=instructor,
                )
            )
        results[(spec.task_id, mode)] = episode_results
    return results


@dataclass(frozen=True)
class CompositeRates:
    phase1: float
    phase2: float
    full_task: float

    def to_dict(self) -> dict:
        return {"phase1": self.phase1, "phase2": self.phase2, "full_task": self.full_task}


def aggregate_composite(
    results: Mapping[tuple[str, PromptMode], Sequence[CompositeEpisodeResult]],
) -> dict[PromptMode, CompositeRates]:
    """Unweighted mean over tasks of per-task episode fractions.

    Every mode must cover the same task set, with at least one episode per
    (task, mode) cell.
    """
    if not results:
        raise ValueError("no results to aggregate")
    modes = sorted({mode for _, mode in results}, key=lambda m: m.value)
    tasks = sorted({task for task, _ in results})
    table: dict[PromptMode, CompositeRates] = {}
    for mode in modes:
        phase1_fracs, phase2_fracs, full_fracs = [], [], []
        for task in tasks:
            episodes = results.get((task, mode))
            if not episodes:
                raise ValueError(f"empty cell for task {task!r}, mode {mode.value!r}")
            n = len(episodes)
            phase1_fracs.append(sum(r.phase_outcomes[0].reached for r in episodes) / n)
            phase2_fracs.append(sum(r.phase_outcomes[1].reached for r in episodes) / n)
            full_fracs.append(sum(r.full_success for r in episodes) / n)
        table[mode] = CompositeRates(
            phase1=sum(phase1_fracs) / len(tasks),
            phase2=sum(phase2_fracs) / len(tasks),
            full_task=sum(full_fracs) / len(tasks),
        )
    return table


_PHASE_KEYS = {"atomic_instruction", "lenient_trigger", "strict_checker"}
_SPEC_KEYS = {"task_id", "composite_description", "phases"}


def spec_from_dict(d: Mapping) -> CompositeTaskSpec:
    unknown = set(d) - _SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown task keys: {sorted(unknown)}")
    phases = []
    for i, pd in enumerate(d.get("phases", ())):
        unknown = set(pd) - _PHASE_KEYS
        if unknown:
            raise ValueError(f"unknown phase keys at index {i}: {sorted(unknown)}")
        missing = _PHASE_KEYS - set(pd)
        if missing:
            raise ValueError(f"phase at index {i} missing keys: {sorted(missing)}")
        phases.append(PhaseSpec(**pd))
    return CompositeTaskSpec(
        task_id=d.get("task_id", ""),
        composite_description=d.get("composite_description", ""),
        phases=tuple(phases),
    )


def spec_to_dict(spec: CompositeTaskSpec) -> dict:
    return {
        "task_id": spec.task_id,
        "composite_description": spec.composite_description,
        "phases": [
            {
                "atomic_instruction": p.atomic_instruction,
                "lenient_trigger": p.lenient_trigger,
                "strict_checker": p.strict_checker,
            }
            for p in spec.phases
        ],
    }


def load_suite(path) -> list[CompositeTaskSpec]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict) or set(doc) != {"tasks"}:
        raise ValueError('suite file must be a JSON object with a single "tasks" key')
    specs = [spec_from_dict(d) for d in doc["tasks"]]
    seen = set()
    for spec in specs:
        if spec.task_id in seen:
            raise ValueError(f"duplicate task_id {spec.task_id!r} in suite")
        seen.add(spec.task_id)
    return specs


def save_suite(specs: Sequence[CompositeTaskSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"tasks": [spec_to_dict(s) for s in specs]}, f, indent=2)
        f.write("\n")


EXAMPLE_SUITE: tuple[CompositeTaskSpec, ...] = (
    CompositeTaskSpec(
        task_id="PrepareCoffee",
        composite_description=(
            "Pick up the mug from the cabinet, place it under the coffee machine "
            "dispenser, then press the start button to brew coffee."
        ),
        phases=(
            PhaseSpec(
                atomic_instruction="Pick up the mug from the cabinet.",
                lenient_trigger="step>=90",
                strict_checker="prob:0.85@100",
            ),
            PhaseSpec(
                atomic_instruction="Place the mug under the coffee machine dispenser.",
                lenient_trigger="step>=230",
                strict_checker="prob:0.6@250",
            ),
            PhaseSpec(
                atomic_instruction="Press the start button on the coffee machine.",
                lenient_trigger="never",
                strict_checker="prob:0.35@380",
            ),
        ),
    ),
    CompositeTaskSpec(
        task_id="StackBowls",
        composite_description="Stack the small bowl inside the large bowl on the counter.",
        phases=(
            PhaseSpec(
                atomic_instruction="Pick up the small bowl from the counter.",
                lenient_trigger="step>=40",
                strict_checker="prob:0.9@48",
            ),
            PhaseSpec(
                atomic_instruction="Place the small bowl inside the large bowl.",
                lenient_trigger="window:120-400",
                strict_checker="prob:0.55@160",
            ),
        ),
    ),
    CompositeTaskSpec(
        task_id="MicrowaveMug",
        composite_description="Put the mug in the microwave and close the door.",
        phases=(
            PhaseSpec(
                atomic_instruction="Open the microwave door.",
                lenient_trigger="step>=60",
                strict_checker="prob:0.8@64",
            ),
            PhaseSpec(
                atomic_instruction="Place the mug inside the microwave and close the door.",
                lenient_trigger="prob:0.7@180",
                strict_checker="prob:0.5@200",
            ),
        ),
    ),
)
