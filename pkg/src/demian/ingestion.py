"""Episode metadata loading and single-primitive segmentation.

Episodes arrive as JSON-Lines metadata records. Long demonstrations are split
into one segment per primitive span; episodes without spans become a single
whole-episode segment. Everything here is pure metadata: frames are referenced
by index only and pixel data is resolved downstream.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

logger = logging.getLogger(__name__)


class Dataset(Enum):
    ROBOCASA365 = "robocasa365"
    MOLMOBOT = "molmobot"
    EGOVERSE = "egoverse"


class CorpusRecordError(ValueError):
    """A malformed corpus record, tagged with the episode id when known."""

    def __init__(self, message: str, episode_id: str | None = None):
        super().__init__(message)
        self.episode_id = episode_id


@dataclass(frozen=True)
class EpisodeMeta:
    episode_id: str
    dataset: Dataset
    frame_count: int
    task_label: str
    scene_descriptor: str = ""
    object_list: tuple[str, ...] = ()
    primitive_spans: tuple[tuple[str, int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "object_list", tuple(self.object_list))
        object.__setattr__(
            self,
            "primitive_spans",
            tuple((str(l), int(s), int(e)) for l, s, e in self.primitive_spans),
        )
        if not self.episode_id:
            raise ValueError("episode_id must be non-empty")
        if self.frame_count < 1:
            raise ValueError(f"frame_count must be >= 1, got {self.frame_count}")
        prev_end = None
        for label, start, end in self.primitive_spans:
            if not (0 <= start < end <= self.frame_count):
                raise ValueError(
                    f"span ({label!r}, {start}, {end}) outside [0, {self.frame_count}]"
                )
            if prev_end is not None and start < prev_end:
                raise ValueError(
                    f"span ({label!r}, {start}, {end}) overlaps previous span ending at {prev_end}"
                )
            prev_end = end


@dataclass(frozen=True)
class ContextBlock:
    task_description: str
    scene_descriptor: str = ""
    object_list: tuple[str, ...] = ()
    prev_label: str | None = None
    next_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "object_list", tuple(self.object_list))

    def to_dict(self) -> dict:
        return {
            "task_description": self.task_description,
            "scene_descriptor": self.scene_descriptor,
            "object_list": list(self.object_list),
            "prev_label": self.prev_label,
            "next_label": self.next_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContextBlock":
        return cls(
            task_description=d["task_description"],
            scene_descriptor=d.get("scene_descriptor", ""),
            object_list=tuple(d.get("object_list", ())),
            prev_label=d.get("prev_label"),
            next_label=d.get("next_label"),
        )


@dataclass(frozen=True)
class Segment:
    segment_id: str
    episode_id: str
    dataset: Dataset
    start_frame: int
    end_frame: int
    label: str
    context: ContextBlock

    def __post_init__(self):
        if not (0 <= self.start_frame < self.end_frame):
            raise ValueError(
                f"invalid frame range [{self.start_frame}, {self.end_frame})"
            )

    @property
    def frame_count(self) -> int:
        return self.end_frame - self.start_frame

    def to_dict(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "episode_id": self.episode_id,
            "dataset": self.dataset.value,
            "start_frame": self.start_frame,
            "end_frame": self.end_frame,
            "label": self.label,
            "context": self.context.to_dict(),
        }


_EPISODE_KEYS = {
    "episode_id",
    "dataset",
    "frame_count",
    "task_label",
    "scene_descriptor",
    "object_list",
    "primitive_spans",
}


def episode_from_dict(d: dict, default_dataset: Dataset | None = None) -> EpisodeMeta:
    if not isinstance(d, dict):
        raise ValueError(f"episode record must be an object, got {type(d).__name__}")
    unknown = set(d) - _EPISODE_KEYS
    if unknown:
        raise ValueError(f"unknown keys in episode record: {sorted(unknown)}")
    for key in ("episode_id", "frame_count", "task_label"):
        if key not in d:
            raise ValueError(f"episode record missing required key {key!r}")
    raw = d.get("dataset")
    if raw is None:
        if default_dataset is None:
            raise ValueError("episode record missing 'dataset' and no default given")
        dataset = default_dataset
    else:
        dataset = Dataset(raw)
    return EpisodeMeta(
        episode_id=str(d["episode_id"]),
        dataset=dataset,
        frame_count=int(d["frame_count"]),
        task_label=str(d["task_label"]),
        scene_descriptor=str(d.get("scene_descriptor", "")),
        object_list=tuple(d.get("object_list", ())),
        primitive_spans=tuple(tuple(span) for span in d.get("primitive_spans", ())),
    )


def episode_to_dict(ep: EpisodeMeta) -> dict:
    return {
        "episode_id": ep.episode_id,
        "dataset": ep.dataset.value,
        "frame_count": ep.frame_count,
        "task_label": ep.task_label,
        "scene_descriptor": ep.scene_descriptor,
        "object_list": list(ep.object_list),
        "primitive_spans": [list(span) for span in ep.primitive_spans],
    }


def load_corpus(
    path: str | Path,
    dataset: Dataset,
    on_error: str = "abort",
) -> Iterator[EpisodeMeta]:
    """Yield episodes from a JSONL file, or every *.jsonl inside a directory.

    Episodes come out sorted lexicographically by episode_id regardless of file
    order. ``on_error`` controls malformed-record handling: "abort" raises,
    "skip" logs and drops the record.
    """
    if on_error not in ("abort", "skip"):
        raise ValueError(f"on_error must be 'abort' or 'skip', got {on_error!r}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"corpus path does not exist: {p}")
    files = [p] if p.is_file() else sorted(p.glob("*.jsonl"))
    episodes: list[EpisodeMeta] = []
    seen: set[str] = set()
    for f in files:
        with open(f, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    ep = episode_from_dict(record, default_dataset=dataset)
                    if ep.dataset is not dataset:
                        raise CorpusRecordError(
                            f"record dataset {ep.dataset.value!r} does not match "
                            f"requested {dataset.value!r}",
                            episode_id=ep.episode_id,
                        )
                    if ep.episode_id in seen:
                        raise CorpusRecordError(
                            f"duplicate episode_id {ep.episode_id!r}",
                            episode_id=ep.episode_id,
                        )
                except (ValueError, KeyError, TypeError) as exc:
                    if isinstance(exc, CorpusRecordError):
                        err = exc
                    else:
                        err = CorpusRecordError(f"{f.name}:{lineno}: {exc}")
                    if on_error == "abort":
                        raise err from exc
                    logger.warning("skipping malformed record at %s:%d: %s", f.name, lineno, exc)
                    continue
                seen.add(ep.episode_id)
                episodes.append(ep)
    episodes.sort(key=lambda e: e.episode_id)
    yield from episodes


def split_episode(ep: EpisodeMeta) -> list[Segment]:
    """One Segment per primitive span; spanless episodes become one whole segment."""
    if not ep.primitive_spans:
        return [
            Segment(
                segment_id=f"{ep.episode_id}#0000",
                episode_id=ep.episode_id,
                dataset=ep.dataset,
                start_frame=0,
                end_frame=ep.frame_count,
                label=ep.task_label,
                context=ContextBlock(
                    task_description=ep.task_label,
                    scene_descriptor=ep.scene_descriptor,
                    object_list=ep.object_list,
                ),
            )
        ]
    spans = ep.primitive_spans
    segments = []
    for i, (label, start, end) in enumerate(spans):
        segments.append(
            Segment(
                segment_id=f"{ep.episode_id}#{i:04d}",
                episode_id=ep.episode_id,
                dataset=ep.dataset,
                start_frame=start,
                end_frame=end,
                label=label,
                context=ContextBlock(
                    task_description=ep.task_label,
                    scene_descriptor=ep.scene_descriptor,
                    object_list=ep.object_list,
                    prev_label=spans[i - 1][0] if i > 0 else None,
                    next_label=spans[i + 1][0] if i < len(spans) - 1 else None,
                ),
            )
        )
    return segments
