"""Four-metric evaluation harness with a pluggable scorer contract.

Metrics: VQA yes-probability over attribute questions and CLIP-style
image-text alignment per scene; pairwise image similarity and perceptual
similarity across a story's scenes. Real scorer backends plug in through
:class:`ScorerContract`; the shipped stub derives deterministic pseudo-scores
from content hashes so the whole harness runs and regression-tests offline.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence, runtime_checkable

__all__ = [
    "METRIC_COLUMNS",
    "ScorerContract",
    "StubScorer",
    "SceneResult",
    "SceneScores",
    "ConsistencyScores",
    "StoryRow",
    "MetricReport",
    "ImageLoadError",
    "IncompleteStoryError",
    "question_from_pair",
    "score_scene",
    "score_story_consistency",
    "aggregate_report",
    "render_text_table",
    "load_run_scenes",
    "score_run",
]

# Report columns, in order. These labels are the exact strings emitted in
# both the JSON and the text table.
METRIC_COLUMNS = ("VQA-Score", "CLIP-T", "CLIP-I", "DreamSim")

REPORT_FORMAT_VERSION = "1"

Pair = tuple[str, str]


class ImageLoadError(OSError):
    """A scene's image reference cannot be read."""

    def __init__(self, path: Path) -> None:
        super().__init__(f"cannot read image {path}")
        self.path = Path(path)


class IncompleteStoryError(ValueError):
    """A story is missing scene or consistency scores."""

    def __init__(self, story_id: str, missing: str) -> None:
        super().__init__(f"story {story_id!r} is incomplete: {missing}")
        self.story_id = story_id


@runtime_checkable
class ScorerContract(Protocol):
    """Callable surface a scoring backend exposes.

    All callables must be deterministic for fixed inputs and a fixed scorer
    identity. Ranges: text_alignment and image_similarity in [-1, 1],
    vqa_yes_probability and perceptual_similarity in [0, 1].
    """

    identity: str

    def text_alignment(self, image: Path, text: str) -> float: ...

    def vqa_yes_probability(self, image: Path, question: str) -> float: ...

    def image_similarity(self, image_a: Path, image_b: Path) -> float: ...

    def perceptual_similarity(self, image_a: Path, image_b: Path) -> float: ...


def _unit_hash(*parts: bytes) -> float:
    digest = hashlib.sha256(b"\x1f".join(parts)).digest()
    return int.from_bytes(digest[:8], "big") / float(1 << 64)


class StubScorer:
    """Deterministic pseudo-scorer over artifact bytes.

    Scores are sha256 hashes of (identity, file bytes, text) mapped into the
    metric's range, so identical inputs reproduce byte-identical reports and
    any content change moves the scores. Pair metrics sort their two inputs'
    bytes first and are therefore symmetric.
    """

    identity = "stub-hash-v1"

    def _read(self, image: Path) -> bytes:
        try:
            return Path(image).read_bytes()
        except OSError:
            raise ImageLoadError(Path(image))

    def text_alignment(self, image: Path, text: str) -> float:
        u = _unit_hash(self.identity.encode(), b"clip-t", self._read(image), text.encode())
        return 2.0 * u - 1.0

    def vqa_yes_probability(self, image: Path, question: str) -> float:
        return _unit_hash(self.identity.encode(), b"vqa", self._read(image), question.encode())

    def image_similarity(self, image_a: Path, image_b: Path) -> float:
        lo, hi = sorted((self._read(image_a), self._read(image_b)))
        return 2.0 * _unit_hash(self.identity.encode(), b"clip-i", lo, hi) - 1.0

    def perceptual_similarity(self, image_a: Path, image_b: Path) -> float:
        lo, hi = sorted((self._read(image_a), self._read(image_b)))
        return _unit_hash(self.identity.encode(), b"dreamsim", lo, hi)


@dataclass(frozen=True)
class SceneResult:
    """One generated scene ready for scoring."""

    story_id: str
    scene_index: int
    image: Path
    prompt: str
    positive_pairs: tuple[Pair, ...]
    negative_pairs: tuple[Pair, ...] = ()


@dataclass(frozen=True)
class SceneScores:
    vqa: float
    clip_t: float
    vqa_negative: float | None = None


@dataclass(frozen=True)
class ConsistencyScores:
    clip_i: float
    dreamsim: float


def question_from_pair(pair: Pair) -> str:
    """Attribute question for a pair: ``Is the {object} {attribute}?``"""
    attribute, obj = (pair[0].strip(), pair[1].strip())
    if not attribute or not obj:
        raise ValueError(f"pair has an empty field: {pair!r}")
    return f"Is the {obj} {attribute}?"


def score_scene(result: SceneResult, scorer: ScorerContract) -> SceneScores:
    """Per-scene scores: mean VQA yes-probability over the positive-pair
    questions, plus image-text alignment against the full scene prompt.

    Negative pairs, when present, are scored into a separate diagnostic mean
    (a correctly bound image should answer their questions with a low yes
    probability); they never enter the headline VQA score.
    """
    image = Path(result.image)
    if not image.is_file():
        raise ImageLoadError(image)
    if not result.positive_pairs:
        raise ValueError(f"scene {result.story_id}/{result.scene_index} has no positive pairs")
    yes = [
        scorer.vqa_yes_probability(image, question_from_pair(pair))
        for pair in result.positive_pairs
    ]
    vqa_negative = None
    if result.negative_pairs:
        noes = [
            scorer.vqa_yes_probability(image, question_from_pair(pair))
            for pair in result.negative_pairs
        ]
        vqa_negative = sum(noes) / len(noes)
    return SceneScores(
        vqa=sum(yes) / len(yes),
        clip_t=scorer.text_alignment(image, result.prompt),
        vqa_negative=vqa_negative,
    )


def score_story_consistency(
    images: Sequence[Path], scorer: ScorerContract
) -> ConsistencyScores:
    """Mean pairwise similarity over all unordered image pairs (10 for 5 scenes)."""
    if len(images) < 2:
        raise ValueError(f"need at least 2 images for consistency, got {len(images)}")
    for image in images:
        if not Path(image).is_file():
            raise ImageLoadError(Path(image))
    clip_values = []
    dream_values = []
    for a, b in itertools.combinations(images, 2):
        clip_values.append(scorer.image_similarity(Path(a), Path(b)))
        dream_values.append(scorer.perceptual_similarity(Path(a), Path(b)))
    n = len(clip_values)
    return ConsistencyScores(clip_i=sum(clip_values) / n, dreamsim=sum(dream_values) / n)


@dataclass(frozen=True)
class StoryRow:
    story_id: str
    vqa_score: float
    clip_t: float
    clip_i: float
    dreamsim: float
    scene_count: int
    vqa_negative: float | None = None


@dataclass
class MetricReport:
    """Per-story rows plus the benchmark aggregate, in the four-column shape."""

    method_label: str
    scorer_identity: str
    rows: list[StoryRow] = field(default_factory=list)

    @property
    def aggregate(self) -> dict[str, float]:
        n = len(self.rows)
        if n == 0:
            return {label: 0.0 for label in METRIC_COLUMNS} | {"stories": 0}
        return {
            "VQA-Score": sum(r.vqa_score for r in self.rows) / n,
            "CLIP-T": sum(r.clip_t for r in self.rows) / n,
            "CLIP-I": sum(r.clip_i for r in self.rows) / n,
            "DreamSim": sum(r.dreamsim for r in self.rows) / n,
            "stories": n,
        }

    def to_json_obj(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "method": self.method_label,
            "scorer": self.scorer_identity,
            "metadata": {
                "vqa_aggregation": "mean over positive-pair questions per scene, "
                "mean over scenes per story, mean over stories",
                "dreamsim_direction": "similarity; higher means more similar",
                "columns": list(METRIC_COLUMNS),
            },
            "aggregate": self.aggregate,
            "stories": [
                {
                    "story_id": r.story_id,
                    "VQA-Score": r.vqa_score,
                    "CLIP-T": r.clip_t,
                    "CLIP-I": r.clip_i,
                    "DreamSim": r.dreamsim,
                    "scene_count": r.scene_count,
                    "vqa_negative": r.vqa_negative,
                }
                for r in sorted(self.rows, key=lambda r: r.story_id)
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2, ensure_ascii=False) + "\n"

    def write_json(self, path: Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "MetricReport":
        report = cls(method_label=obj["method"], scorer_identity=obj["scorer"])
        for row in obj["stories"]:
            report.rows.append(
                StoryRow(
                    story_id=row["story_id"],
                    vqa_score=row["VQA-Score"],
                    clip_t=row["CLIP-T"],
                    clip_i=row["CLIP-I"],
                    dreamsim=row["DreamSim"],
                    scene_count=row["scene_count"],
                    vqa_negative=row.get("vqa_negative"),
                )
            )
        return report

    @classmethod
    def read_json(cls, path: Path) -> "MetricReport":
        return cls.from_json_obj(json.loads(Path(path).read_text(encoding="utf-8")))


def aggregate_report(
    scene_scores: Mapping[str, Sequence[SceneScores]],
    story_scores: Mapping[str, ConsistencyScores],
    method_label: str,
    scorer_identity: str = "",
    expected_scenes: int = 5,
) -> MetricReport:
    """Fold scene and consistency scores into per-story rows and the aggregate.

    Every story must carry ``expected_scenes`` scene scores and one
    consistency score; anything missing raises :class:`IncompleteStoryError`
    naming the gap.
    """
    report = MetricReport(method_label=method_label, scorer_identity=scorer_identity)
    for story_id in sorted(set(scene_scores) | set(story_scores)):
        scenes = list(scene_scores.get(story_id, ()))
        if len(scenes) != expected_scenes:
            raise IncompleteStoryError(
                story_id, f"has {len(scenes)} scene scores, expected {expected_scenes}"
            )
        consistency = story_scores.get(story_id)
        if consistency is None:
            raise IncompleteStoryError(story_id, "has no consistency score")
        negatives = [s.vqa_negative for s in scenes if s.vqa_negative is not None]
        report.rows.append(
            StoryRow(
                story_id=story_id,
                vqa_score=sum(s.vqa for s in scenes) / len(scenes),
                clip_t=sum(s.clip_t for s in scenes) / len(scenes),
                clip_i=consistency.clip_i,
                dreamsim=consistency.dreamsim,
                scene_count=len(scenes),
                vqa_negative=sum(negatives) / len(negatives) if negatives else None,
            )
        )
    return report


def render_text_table(reports: Sequence[MetricReport]) -> str:
    """Aligned method-by-metric table; one row per report."""
    header = ["Method", *METRIC_COLUMNS]
    rows = []
    for report in reports:
        agg = report.aggregate
        rows.append(
            [report.method_label] + [f"{agg[label]:.4f}" for label in METRIC_COLUMNS]
        )
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = []
    for r in [header, *rows]:
        cells = [r[0].ljust(widths[0])] + [
            cell.rjust(widths[i + 1]) for i, cell in enumerate(r[1:])
        ]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Run-directory input
# ---------------------------------------------------------------------------


def load_run_scenes(run_dir: Path) -> list[SceneResult]:
    """Scene results from a run directory's manifest.

    The manifest (``run_manifest.json``) binds each scene's artifact file to
    its prompt and pairs; relative image paths resolve against the run
    directory. Externally produced runs only need to match this file shape.
    """
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "run_manifest.json").read_text(encoding="utf-8"))
    results = []
    for story in manifest["stories"]:
        for scene in story["scenes"]:
            if scene.get("status", "ok") != "ok":
                continue
            image = Path(scene["image"])
            if not image.is_absolute():
                image = run_dir / image
            results.append(
                SceneResult(
                    story_id=story["story_id"],
                    scene_index=int(scene["index"]),
                    image=image,
                    prompt=scene["prompt"],
                    positive_pairs=tuple((a, o) for a, o in scene.get("positive_pairs", [])),
                    negative_pairs=tuple((a, o) for a, o in scene.get("negative_pairs", [])),
                )
            )
    return results


def score_run(
    run_dir: Path,
    scorer: ScorerContract,
    method_label: str,
    expected_scenes: int = 5,
) -> tuple[MetricReport, list[str]]:
    """Score a whole run directory; returns (report, problems).

    Stories with unreadable images or missing scenes are dropped from the
    report and described in ``problems``, so a partial report is still
    produced.
    """
    scenes = load_run_scenes(run_dir)
    problems: list[str] = []
    by_story: dict[str, list[SceneResult]] = {}
    for scene in scenes:
        by_story.setdefault(scene.story_id, []).append(scene)

    scene_scores: dict[str, list[SceneScores]] = {}
    story_scores: dict[str, ConsistencyScores] = {}
    for story_id, story_scenes in sorted(by_story.items()):
        story_scenes.sort(key=lambda s: s.scene_index)
        try:
            scores = [score_scene(s, scorer) for s in story_scenes]
            images = [s.image for s in story_scenes]
            consistency = score_story_consistency(images, scorer)
        except (ImageLoadError, ValueError) as err:
            problems.append(f"{story_id}: {err}")
            continue
        if len(scores) != expected_scenes:
            problems.append(
                f"{story_id}: has {len(scores)} scored scenes, expected {expected_scenes}"
            )
            continue
        scene_scores[story_id] = scores
        story_scores[story_id] = consistency

    report = aggregate_report(
        scene_scores,
        story_scores,
        method_label=method_label,
        scorer_identity=scorer.identity,
        expected_scenes=expected_scenes,
    )
    return report, problems
