"""Reward table and the instructor's SFT data factory.

Targets are sampled from a temperature softmax over per-task aspect rewards
with top-k truncation; tasks where every aspect strictly underperforms the
no-annotation baseline abstain (empty target).
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .annotation_pipeline import ASPECT_ORDER, AspectKind, aspect_rank
from .ingestion import EpisodeMeta

logger = logging.getLogger(__name__)

ABSTAIN = "abstain"

DEFAULT_TEMPERATURE = 2.0
DEFAULT_TOP_K = 3


@dataclass(frozen=True)
class RewardTable:
    tasks: tuple[str, ...]
    w: Mapping[str, Mapping[AspectKind, float]]
    baseline: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError("task ids must be unique")
        for task in self.tasks:
            if task not in self.w:
                raise ValueError(f"task {task!r} has no reward row")
            if task not in self.baseline:
                raise ValueError(f"task {task!r} has no baseline entry")
            row = self.w[task]
            for aspect in ASPECT_ORDER:
                if aspect not in row:
                    raise ValueError(f"task {task!r} missing aspect {aspect.value!r}")
                _check_sr(row[aspect], f"w({task}, {aspect.value})")
            _check_sr(self.baseline[task], f"baseline({task})")

    def to_json(self) -> str:
        return json.dumps(
            {
                "tasks": list(self.tasks),
                "aspects": [a.value for a in ASPECT_ORDER],
                "w": [[self.w[t][a] for a in ASPECT_ORDER] for t in self.tasks],
                "baseline": [self.baseline[t] for t in self.tasks],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "RewardTable":
        d = json.loads(text)
        aspects = [AspectKind(a) for a in d["aspects"]]
        if aspects != list(ASPECT_ORDER):
            raise ValueError(f"aspect list {d['aspects']} is not the canonical order")
        tasks = [str(t) for t in d["tasks"]]
        if len(d["w"]) != len(tasks) or len(d["baseline"]) != len(tasks):
            raise ValueError("w and baseline must have one entry per task")
        w = {
            task: dict(zip(aspects, map(float, row)))
            for task, row in zip(tasks, d["w"])
        }
        baseline = {task: float(b) for task, b in zip(tasks, d["baseline"])}
        return cls(tasks=tuple(tasks), w=w, baseline=baseline)


def _check_sr(value: float, name: str) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


def save_reward_table(rt: RewardTable, path: str | Path) -> None:
    Path(path).write_text(rt.to_json() + "\n", encoding="utf-8")


def load_reward_table(path: str | Path) -> RewardTable:
    return RewardTable.from_json(Path(path).read_text(encoding="utf-8"))


def build_reward_table(matrix) -> RewardTable:
    """Copy baseline + four aspect rows of a results matrix into a RewardTable.

    ``matrix`` is an aggregation.ResultsMatrix whose columns are task ids and
    whose rows include "baseline" and the four aspect names.
    """
    conditions = ["baseline"] + [a.value for a in ASPECT_ORDER]
    w: dict[str, dict[AspectKind, float]] = {}
    baseline: dict[str, float] = {}
    for task in matrix.columns:
        for condition in conditions:
            try:
                value = matrix.cell(condition, task)
            except (KeyError, ValueError) as exc:
                raise ValueError(f"missing cell ({task}, {condition})") from exc
            if condition == "baseline":
                baseline[task] = value
            else:
                w.setdefault(task, {})[AspectKind(condition)] = value
    return RewardTable(tasks=tuple(matrix.columns), w=w, baseline=baseline)


@dataclass(frozen=True)
class AspectDistribution:
    """Probabilities over the top-k support, plus an abstain mass of 0 or 1."""

    probs: Mapping[AspectKind, float]
    abstain: float

    def total(self) -> float:
        return sum(self.probs.values()) + self.abstain

    def sample(self, rng: random.Random):
        r = rng.random()
        cum = 0.0
        last: AspectKind | None = None
        for aspect, p in self.probs.items():
            if p <= 0.0:
                continue
            last = aspect
            cum += p
            if r < cum:
                return aspect
        if last is not None and self.abstain == 0.0:
            return last  # absorb float residue at the top of the CDF
        return ABSTAIN


def aspect_distribution(
    rt: RewardTable,
    task: str,
    temperature: float = DEFAULT_TEMPERATURE,
    top_k: int = DEFAULT_TOP_K,
) -> AspectDistribution:
    """Softmax over raw rewards with top-k truncation, or pure abstention when
    every aspect is strictly below the task baseline."""
    if task not in rt.w:
        raise KeyError(f"unknown task {task!r}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if not 1 <= top_k <= len(ASPECT_ORDER):
        raise ValueError(f"top_k must be in [1, {len(ASPECT_ORDER)}], got {top_k}")
    row = rt.w[task]
    if max(row.values()) < rt.baseline[task]:
        return AspectDistribution(probs={}, abstain=1.0)
    support = sorted(ASPECT_ORDER, key=lambda a: (-row[a], aspect_rank(a)))[:top_k]
    support = sorted(support, key=aspect_rank)
    exps = {a: math.exp(row[a] / temperature) for a in support}
    norm = sum(exps.values())
    return AspectDistribution(
        probs={a: exps[a] / norm for a in support}, abstain=0.0
    )


def top1_targets(rt: RewardTable, task: str):
    """Single highest-reward aspect, or ABSTAIN under the same strict rule."""
    if task not in rt.w:
        raise KeyError(f"unknown task {task!r}")
    row = rt.w[task]
    best = max(row.values())
    if best < rt.baseline[task]:
        return ABSTAIN
    for aspect in ASPECT_ORDER:
        if row[aspect] == best:
            return aspect
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class SftExample:
    task_id: str
    frame_refs: tuple[str, str, str]
    task_description: str
    target_caption: str
    target_aspect: AspectKind | None

    def __post_init__(self):
        object.__setattr__(self, "frame_refs", tuple(self.frame_refs))
        if len(self.frame_refs) != 3:
            raise ValueError(f"frame_refs must have exactly 3 entries, got {len(self.frame_refs)}")
        if (self.target_caption == "") != (self.target_aspect is None):
            raise ValueError("target_caption is empty iff target_aspect is absent")

    def to_dict(self) -> dict:
        d = {
            "task_id": self.task_id,
            "frame_refs": list(self.frame_refs),
            "task_description": self.task_description,
            "target_caption": self.target_caption,
        }
        if self.target_aspect is not None:
            d["target_aspect"] = self.target_aspect.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SftExample":
        return cls(
            task_id=d["task_id"],
            frame_refs=tuple(d["frame_refs"]),
            task_description=d["task_description"],
            target_caption=d["target_caption"],
            target_aspect=AspectKind(d["target_aspect"]) if "target_aspect" in d else None,
        )


def sample_sft_dataset(
    rt: RewardTable,
    annotations: Mapping[tuple[str, AspectKind], str],
    episodes: Iterable[EpisodeMeta],
    rng_seed: int,
    n_examples: int,
    *,
    temperature: float = DEFAULT_TEMPERATURE,
    top_k: int = DEFAULT_TOP_K,
    strategy: str = "softmax",
) -> tuple[list[SftExample], int]:
    """Draw episodes uniformly with replacement and emit one SFT example each.

    Episodes whose task label is not in the reward table, or whose sampled
    aspect has no stored caption, are skipped and counted. Deterministic for a
    fixed seed. Returns (examples, skipped).
    """
    if strategy not in ("softmax", "top1"):
        raise ValueError(f"strategy must be 'softmax' or 'top1', got {strategy!r}")
    if n_examples < 0:
        raise ValueError(f"n_examples must be >= 0, got {n_examples}")
    episode_list = list(episodes)
    if not episode_list and n_examples > 0:
        raise ValueError("no episodes to sample from")

    # Caption per (episode, aspect): lexicographically first segment wins.
    by_episode: dict[str, dict[AspectKind, str]] = {}
    for (segment_id, aspect), caption in sorted(
        annotations.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
    ):
        episode_id = segment_id.split("#", 1)[0]
        by_episode.setdefault(episode_id, {}).setdefault(aspect, caption)

    known_tasks = set(rt.tasks)
    dist_cache: dict[str, AspectDistribution] = {}
    rng = random.Random(rng_seed)
    examples: list[SftExample] = []
    skipped = 0
    for _ in range(n_examples):
        ep = episode_list[rng.randrange(len(episode_list))]
        task = ep.task_label
        if task not in known_tasks:
            skipped += 1
            continue
        if strategy == "softmax":
            if task not in dist_cache:
                dist_cache[task] = aspect_distribution(rt, task, temperature, top_k)
            target = dist_cache[task].sample(rng)
        else:
            target = top1_targets(rt, task)
        frame_refs = tuple(f"{ep.episode_id}/frame/{i}" for i in range(3))
        if target == ABSTAIN:
            examples.append(
                SftExample(
                    task_id=task,
                    frame_refs=frame_refs,
                    task_description=ep.task_label,
                    target_caption="",
                    target_aspect=None,
                )
            )
            continue
        caption = by_episode.get(ep.episode_id, {}).get(target)
        if caption is None:
            skipped += 1
            continue
        examples.append(
            SftExample(
                task_id=task,
                frame_refs=frame_refs,
                task_description=ep.task_label,
                target_caption=caption,
                target_aspect=target,
            )
        )
    if skipped:
        logger.info("sft sampling skipped %d draws", skipped)
    return examples, skipped


def write_sft_dataset(examples: Sequence[SftExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")


def load_sft_dataset(path: str | Path) -> list[SftExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                examples.append(SftExample.from_dict(json.loads(line)))
    return examples
