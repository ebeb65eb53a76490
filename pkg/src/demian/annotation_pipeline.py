"""Multi-aspect captioning pipeline: frame sampling, prompt assembly, strict
response validation, and a checkpointed batch runner with crash-safe resume.

Each segment yields up to four captions, one per aspect, via independent VLM
calls. Responses must be a single JSON object {"aspect", "caption"} whose
caption fits a sentence cap; violations are retried with a corrective suffix
and ledgered on exhaustion.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .ingestion import Dataset, Segment
from .vlm_client import (
    Clock,
    PermanentClientError,
    SystemClock,
    TransientClientError,
    VlmClient,
    VlmRequest,
)

logger = logging.getLogger(__name__)

DEFAULT_FRAME_CAP = 10
DEFAULT_MAX_SENTENCES = 2
DEFAULT_RESPONSE_RETRIES = 3

SYSTEM_TEXT = "You are a precise video-segment annotator. Follow the output format exactly."


class AspectKind(Enum):
    # Listing order is the tie-break order used elsewhere; do not reorder.
    PHYSICAL_MOTION = "physical_motion"
    SCENE_COMPOSITION = "scene_composition"
    ARM_POSE = "arm_pose"
    REASONING = "reasoning"


ASPECT_ORDER: tuple[AspectKind, ...] = tuple(AspectKind)
_ASPECT_RANK = {aspect: i for i, aspect in enumerate(ASPECT_ORDER)}


def aspect_rank(aspect: AspectKind) -> int:
    return _ASPECT_RANK[aspect]


class PromptSet(Enum):
    ROBOT = "robot"
    EGOCENTRIC = "egocentric"

    def template(self, aspect: AspectKind) -> str:
        return _TEMPLATES[(self, aspect)]


_TEMPLATES: dict[tuple[PromptSet, AspectKind], str] = {
    (PromptSet.ROBOT, AspectKind.PHYSICAL_MOTION): (
        "Describe the physical movement of the agent. For example, if the agent is moving its arm, describe the movement of the arm. If the agent is moving its hand (or the gripper of a robot arm), describe the movement of the hand or the gripper. If the agent is grasping the object, describe the grasping movement of the gripper or hand. If the agent is moving the object, describe the movement of the object. Focus only on the movements within the given frames. Do not hallucinate or make up the action."
    ),
    (PromptSet.ROBOT, AspectKind.SCENE_COMPOSITION): (
        "Describe the physical environment shown in the video. List the room type, major fixtures, and visible objects on the surfaces (such as specific food items, appliances, or tools)."
    ),
    (PromptSet.ROBOT, AspectKind.ARM_POSE): (
        "Describe the exact physical posture and spatial location of the agent's arm throughout the trajectory. Focus strictly on the arm's pose (posture, gripper state, orientation) relative to the environment at the start, middle, and end of the clip, without describing the action itself."
    ),
    (PromptSet.ROBOT, AspectKind.REASONING): (
        "Reason about the agent's action and environment in the video clips given the task description. The reasoning should be detailed and specific to the video clips, e.g., why the agent is doing this action, what is the goal of the action, what was the previous action, what was the current action, what should be the next action, is the task completed, etc."
    ),
    (PromptSet.EGOCENTRIC, AspectKind.PHYSICAL_MOTION): (
        "Describe the physical movements of the person's hands in this clip. Focus on what each hand is doing: reaching, grasping, lifting, pouring, stirring, placing, etc. Mention the objects being manipulated and the direction of movement. Focus only on the movements within the given frames. Do not hallucinate or make up actions."
    ),
    (PromptSet.EGOCENTRIC, AspectKind.SCENE_COMPOSITION): (
        "Describe the physical environment shown in the images. List the setting, workspace surfaces, and visible objects (such as tools, containers, food items, or appliances). Note their spatial arrangement."
    ),
    (PromptSet.EGOCENTRIC, AspectKind.ARM_POSE): (
        "Describe the exact position and posture of the person's hands at the very first frame. What are they holding, touching, or hovering over? Focus strictly on the hands' state relative to the objects and workspace, without describing the action."
    ),
    (PromptSet.EGOCENTRIC, AspectKind.REASONING): (
        "Reason about what the person is doing and why, given the task description and the current action annotation. What is the goal of this action segment? What was likely done before this, and what will likely come next? Is this a preparatory step, the main manipulation, or a cleanup step?"
    ),
}


def prompt_set_for(dataset: Dataset) -> PromptSet:
    return PromptSet.EGOCENTRIC if dataset is Dataset.EGOVERSE else PromptSet.ROBOT


def sample_frames(n_frames: int, f_max: int = DEFAULT_FRAME_CAP) -> list[int]:
    """Uniformly spaced frame indices: k = min(n_frames, f_max) indices that
    always include the first and last frame."""
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    if f_max < 1:
        raise ValueError(f"f_max must be >= 1, got {f_max}")
    k = min(n_frames, f_max)
    if k == 1:
        return [0]
    return [i * (n_frames - 1) // (k - 1) for i in range(k)]


def build_prompt(
    seg: Segment,
    aspect: AspectKind,
    ps: PromptSet,
    primitive_sequence: Iterable[str] | None = None,
    max_sentences: int = DEFAULT_MAX_SENTENCES,
) -> str:
    """Context block + verbatim aspect template + output-format directive.

    The primitive sequence line appears only for the reasoning aspect on
    robocasa365 segments.
    """
    expected = prompt_set_for(seg.dataset)
    if ps is not expected:
        raise ValueError(
            f"prompt set {ps.value!r} does not match dataset {seg.dataset.value!r}"
        )
    ctx = seg.context
    lines = [f"Task: {ctx.task_description}"]
    if ctx.scene_descriptor:
        lines.append(f"Scene: {ctx.scene_descriptor}")
    if ctx.object_list:
        lines.append("Objects: " + ", ".join(ctx.object_list))
    if ctx.prev_label:
        lines.append(f"Previous segment: {ctx.prev_label}")
    if ctx.next_label:
        lines.append(f"Next segment: {ctx.next_label}")
    if (
        aspect is AspectKind.REASONING
        and seg.dataset is Dataset.ROBOCASA365
        and primitive_sequence
    ):
        lines.append("Primitive sequence: " + " -> ".join(primitive_sequence))
    directive = (
        'Respond with exactly one JSON object with keys "aspect" and "caption", '
        f'e.g. {{"aspect": "{aspect.value}", "caption": "..."}}. '
        f"The caption must be at most {max_sentences} sentences."
    )
    return "\n".join(lines) + "\n\n" + ps.template(aspect) + "\n\n" + directive


def count_sentences(text: str) -> int:
    """A boundary is '.', '!' or '?' followed by whitespace or end-of-string;
    a trailing unterminated fragment counts as one sentence."""
    count = 0
    tail_start = 0
    for i, ch in enumerate(text):
        if ch in ".!?" and (i + 1 == len(text) or text[i + 1].isspace()):
            count += 1
            tail_start = i + 1
    if text[tail_start:].strip():
        count += 1
    return count


def validate_caption(caption: str, max_sentences: int = DEFAULT_MAX_SENTENCES) -> bool:
    return count_sentences(caption) <= max_sentences


class ResponseError(Exception):
    """Retryable validation failure of a model completion."""


class SchemaError(ResponseError):
    pass


class AspectMismatch(ResponseError):
    pass


class LengthViolation(ResponseError):
    pass


def _strip_fences(text: str) -> str:
    if text.startswith("```"):
        lines = text.split("\n")
        lines = lines[1:]
        if lines and lines[-1].strip() == "```":
            lines = lines[:-1]
        text = "\n".join(lines).strip()
    return text


def parse_response(
    raw_text: str,
    expected_aspect: AspectKind,
    max_sentences: int = DEFAULT_MAX_SENTENCES,
) -> str:
    """Extract and validate the caption from a raw completion."""
    text = _strip_fences(raw_text.strip())
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError(f"expected a JSON object, got {type(obj).__name__}")
    if set(obj) != {"aspect", "caption"}:
        raise SchemaError(f"keys {sorted(obj)} do not match ['aspect', 'caption']")
    if not isinstance(obj["aspect"], str) or not isinstance(obj["caption"], str):
        raise SchemaError("aspect and caption must both be strings")
    if obj["aspect"] != expected_aspect.value:
        raise AspectMismatch(
            f"aspect {obj['aspect']!r} does not match expected {expected_aspect.value!r}"
        )
    caption = obj["caption"]
    if not validate_caption(caption, max_sentences):
        raise LengthViolation(
            f"caption has {count_sentences(caption)} sentences, cap is {max_sentences}"
        )
    return caption


@dataclass(frozen=True)
class AnnotationRecord:
    segment_id: str
    aspect: AspectKind
    caption: str
    model_id: str
    input_tokens: int
    output_tokens: int
    created_at: str  # ISO-8601 UTC

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be >= 0")

    def to_dict(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "aspect": self.aspect.value,
            "caption": self.caption,
            "model_id": self.model_id,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(
            segment_id=d["segment_id"],
            aspect=AspectKind(d["aspect"]),
            caption=d["caption"],
            model_id=d["model_id"],
            input_tokens=int(d["input_tokens"]),
            output_tokens=int(d["output_tokens"]),
            created_at=d["created_at"],
        )


@dataclass(frozen=True)
class AnnotationFailure:
    segment_id: str
    aspect: AspectKind
    error_kind: str
    message: str

    def to_dict(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "aspect": self.aspect.value,
            "error_kind": self.error_kind,
            "message": self.message,
        }


def _error_kind(exc: Exception) -> str:
    if isinstance(exc, SchemaError):
        return "schema_error"
    if isinstance(exc, AspectMismatch):
        return "aspect_mismatch"
    if isinstance(exc, LengthViolation):
        return "length_violation"
    if isinstance(exc, PermanentClientError):
        return "permanent_client_error"
    if isinstance(exc, TransientClientError):
        return "transient_client_error"
    return "error"


FrameSource = Callable[[Segment, list[int]], list[str]]


def stub_frame_source(seg: Segment, indices: list[int]) -> list[str]:
    # Opaque references; real frame extraction is out of scope.
    return [f"{seg.segment_id}/frame/{i}" for i in indices]


def _iso_utc(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).isoformat()


def annotate_segment(
    seg: Segment,
    aspects: Iterable[AspectKind],
    client: VlmClient,
    *,
    frame_source: FrameSource = stub_frame_source,
    primitive_sequence: Iterable[str] | None = None,
    f_max: int = DEFAULT_FRAME_CAP,
    max_sentences: int = DEFAULT_MAX_SENTENCES,
    max_output_tokens: int = 256,
    response_retries: int = DEFAULT_RESPONSE_RETRIES,
    clock: Clock | None = None,
) -> tuple[list[AnnotationRecord], list[AnnotationFailure]]:
    """One independent VLM call per requested aspect.

    A failed aspect (after retries) becomes an AnnotationFailure and does not
    discard sibling aspects.
    """
    aspects = sorted(set(aspects), key=aspect_rank)
    if not aspects:
        raise ValueError("aspects must be non-empty")
    if clock is None:
        clock = getattr(client, "clock", None) or SystemClock()
    ps = prompt_set_for(seg.dataset)
    indices = [seg.start_frame + j for j in sample_frames(seg.frame_count, f_max)]
    refs = tuple(frame_source(seg, indices))

    records: list[AnnotationRecord] = []
    failures: list[AnnotationFailure] = []
    for aspect in aspects:
        base_prompt = build_prompt(
            seg, aspect, ps, primitive_sequence=primitive_sequence, max_sentences=max_sentences
        )
        prompt = base_prompt
        last_error: Exception | None = None
        for _ in range(response_retries + 1):
            req = VlmRequest(
                frames=refs,
                system_text=SYSTEM_TEXT,
                user_text=prompt,
                max_output_tokens=max_output_tokens,
                metadata={"segment_id": seg.segment_id, "aspect": aspect.value},
            )
            try:
                resp = client.complete(req)
            except (TransientClientError, PermanentClientError) as exc:
                last_error = exc
                break
            try:
                caption = parse_response(resp.raw_text, aspect, max_sentences)
            except ResponseError as exc:
                last_error = exc
                prompt = base_prompt + "\n\n" + (
                    f"Previous reply was rejected ({exc}). Reply with exactly one JSON "
                    f'object {{"aspect": "{aspect.value}", "caption": "..."}} and keep '
                    f"the caption to at most {max_sentences} sentences."
                )
                continue
            records.append(
                AnnotationRecord(
                    segment_id=seg.segment_id,
                    aspect=aspect,
                    caption=caption,
                    model_id=client.config.model_id,
                    input_tokens=resp.input_tokens,
                    output_tokens=resp.output_tokens,
                    created_at=_iso_utc(clock.now()),
                )
            )
            last_error = None
            break
        if last_error is not None:
            failures.append(
                AnnotationFailure(
                    segment_id=seg.segment_id,
                    aspect=aspect,
                    error_kind=_error_kind(last_error),
                    message=str(last_error),
                )
            )
    return records, failures


# --- persistence -----------------------------------------------------------


def scan_sink_pairs(path: str | Path) -> set[tuple[str, str]]:
    """Lenient scan of a sink for completed (segment_id, aspect) pairs.

    Torn or malformed lines (e.g. from an interrupted write) are skipped so a
    resumed batch can proceed past them.
    """
    p = Path(path)
    pairs: set[tuple[str, str]] = set()
    if not p.exists():
        return pairs
    with open(p, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                pairs.add((d["segment_id"], d["aspect"]))
            except (ValueError, KeyError, TypeError):
                logger.warning("ignoring malformed sink line %s:%d", p.name, lineno)
    return pairs


def load_records(path: str | Path) -> list[AnnotationRecord]:
    """Strict loader; malformed lines raise."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(AnnotationRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return records


def load_caption_index(path: str | Path) -> dict[tuple[str, AspectKind], str]:
    return {(r.segment_id, r.aspect): r.caption for r in load_records(path)}


def load_checkpoint(path: str | Path) -> set[tuple[str, str]]:
    p = Path(path)
    pairs: set[tuple[str, str]] = set()
    if not p.exists():
        return pairs
    with open(p, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line or "\t" not in line or not raw.endswith("\n"):
                continue  # torn trailing line
            segment_id, aspect = line.split("\t", 1)
            pairs.add((segment_id, aspect))
    return pairs


@dataclass(frozen=True)
class BatchReport:
    completed: int
    failed: int
    skipped: int

    def to_dict(self) -> dict:
        return {"completed": self.completed, "failed": self.failed, "skipped": self.skipped}


def run_batch(
    segments: Iterable[Segment],
    aspects: Iterable[AspectKind],
    client: VlmClient,
    sink_path: str | Path,
    checkpoint_path: str | Path,
    *,
    workers: int = 1,
    failure_path: str | Path | None = None,
    primitive_sequences: Mapping[str, list[str]] | None = None,
    f_max: int = DEFAULT_FRAME_CAP,
    max_sentences: int = DEFAULT_MAX_SENTENCES,
    response_retries: int = DEFAULT_RESPONSE_RETRIES,
) -> BatchReport:
    """Process (segment, aspect) pairs with bounded parallelism and resume.

    Pairs already present in the sink or checkpoint are skipped. Each record is
    appended to the sink and then checkpointed, both flushed, so interruption
    loses at most in-flight calls; re-running converges to a complete corpus.
    An unexpected exception aborts the batch with the checkpoint intact.
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    aspect_list = sorted(set(aspects), key=aspect_rank)
    if not aspect_list:
        raise ValueError("aspects must be non-empty")
    segment_list = list(segments)
    primitive_sequences = primitive_sequences or {}

    done = scan_sink_pairs(sink_path) | load_checkpoint(checkpoint_path)
    jobs = [
        (seg, aspect)
        for seg in segment_list
        for aspect in aspect_list
        if (seg.segment_id, aspect.value) not in done
    ]
    skipped = len(segment_list) * len(aspect_list) - len(jobs)

    completed = 0
    failed = 0
    write_lock = threading.Lock()

    def work(seg: Segment, aspect: AspectKind):
        return annotate_segment(
            seg,
            [aspect],
            client,
            primitive_sequence=primitive_sequences.get(seg.episode_id),
            f_max=f_max,
            max_sentences=max_sentences,
            response_retries=response_retries,
        )

    sink_f = open(sink_path, "a", encoding="utf-8")
    ckpt_f = open(checkpoint_path, "a", encoding="utf-8")
    failure_f = open(failure_path, "a", encoding="utf-8") if failure_path else None
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(work, seg, aspect): (seg, aspect) for seg, aspect in jobs}
            try:
                for fut in as_completed(futures):
                    records, failures = fut.result()
                    with write_lock:
                        for record in records:
                            if not validate_caption(record.caption, max_sentences):
                                raise ValueError(
                                    f"caption failed validation at write time: {record.segment_id}"
                                )
                            sink_f.write(json.dumps(record.to_dict()) + "\n")
                            sink_f.flush()
                            ckpt_f.write(f"{record.segment_id}\t{record.aspect.value}\n")
                            ckpt_f.flush()
                            completed += 1
                        for failure in failures:
                            if failure_f is not None:
                                failure_f.write(json.dumps(failure.to_dict()) + "\n")
                                failure_f.flush()
                            failed += 1
            except BaseException:
                pool.shutdown(wait=True, cancel_futures=True)
                raise
    finally:
        sink_f.close()
        ckpt_f.close()
        if failure_f is not None:
            failure_f.close()
    logger.info(
        "batch finished: completed=%d failed=%d skipped=%d", completed, failed, skipped
    )
    return BatchReport(completed=completed, failed=failed, skipped=skipped)
