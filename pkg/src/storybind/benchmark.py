"""Story benchmark toolchain.

Owns the story data model and file format, the scene prompt template, the
negative-pair derivation helper, structural validation, dataset statistics,
and LLM-driven generation against an abstract text-generation client. A
deterministic stub client makes the whole pipeline runnable offline.
"""

from __future__ import annotations

import itertools
import json
import random
import re
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol, Sequence, runtime_checkable

__all__ = [
    "STYLES",
    "FORMAT_VERSION",
    "Scene",
    "Story",
    "Violation",
    "BenchmarkStats",
    "TextGenClient",
    "StubTextGenClient",
    "ReplayTextGenClient",
    "EmptyComponentError",
    "InsufficientDiversityError",
    "ParseFailureError",
    "StoryValidationError",
    "build_scene_prompt",
    "derive_negative_pairs",
    "generate_story",
    "generate_story_with_report",
    "validate_story",
    "compute_stats",
    "load_lexicon",
    "categorize_attribute",
    "load_instruction_template",
    "render_instruction",
    "story_to_json_obj",
    "story_from_json_obj",
    "dumps_story",
    "save_story",
    "load_story",
    "write_benchmark",
    "read_benchmark",
]

# The ten artistic styles of the benchmark, stored lowercase and matched
# case-insensitively.
STYLES: tuple[str, ...] = (
    "photo",
    "cartoon style",
    "3d animation",
    "watercolor illustration",
    "oil painting",
    "crayon drawing",
    "neon punk style",
    "pixar-style",
    "hyperrealistic digital painting",
    "pastel color painting",
)

SCENES_PER_STORY = 5
PAIRS_MIN = 2
PAIRS_MAX = 5
FORMAT_VERSION = "1"


class EmptyComponentError(ValueError):
    """A prompt template component is empty."""


class InsufficientDiversityError(ValueError):
    """No valid negative-pair derangement exists for the positive set."""


class ParseFailureError(ValueError):
    """The client response could not be parsed after all retries."""

    def __init__(self, message: str, raw_response: str = "") -> None:
        super().__init__(message)
        self.raw_response = raw_response


class StoryValidationError(ValueError):
    """A generated story violates the benchmark structure."""

    def __init__(self, story_id: str, violations: list["Violation"]) -> None:
        lines = "; ".join(v.message for v in violations)
        super().__init__(f"story {story_id!r} failed validation: {lines}")
        self.story_id = story_id
        self.violations = violations


Pair = tuple[str, str]


@dataclass(frozen=True)
class Scene:
    narrative: str
    positive_pairs: tuple[Pair, ...]
    negative_pairs: tuple[Pair, ...] = ()


@dataclass(frozen=True)
class Story:
    id: str
    style: str
    character_description: str
    scenes: tuple[Scene, ...]


@dataclass(frozen=True)
class Violation:
    """One structural problem found by the validator; data, not an exception."""

    story_id: str
    scene_index: int | None
    code: str
    message: str


@dataclass(frozen=True)
class BenchmarkStats:
    story_count: int
    style_histogram: dict[str, int]
    scenes_per_story: dict[int, int]
    pair_count_histogram: dict[int, int]
    attribute_category_histogram: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "story_count": self.story_count,
            "style_histogram": dict(sorted(self.style_histogram.items())),
            "scenes_per_story": {str(k): v for k, v in sorted(self.scenes_per_story.items())},
            "pair_count_histogram": {
                str(k): v for k, v in sorted(self.pair_count_histogram.items())
            },
            "attribute_category_histogram": dict(
                sorted(self.attribute_category_histogram.items())
            ),
        }


# ---------------------------------------------------------------------------
# Prompt template
# ---------------------------------------------------------------------------


def build_scene_prompt(style: str, character_description: str, scene_narrative: str) -> str:
    """Unified scene prompt: ``A {style} of {character_description}, {narrative}.``"""
    parts = {
        "style": style.strip(),
        "character description": character_description.strip(),
        "scene narrative": scene_narrative.strip(),
    }
    for name, value in parts.items():
        if not value:
            raise EmptyComponentError(f"{name} is empty")
    narrative = parts["scene narrative"].rstrip(".")
    return f"A {parts['style']} of {parts['character description']}, {narrative}."


# ---------------------------------------------------------------------------
# Word presence (whole-word, case-insensitive, multi-word phrases allowed)
# ---------------------------------------------------------------------------


def _norm_word(word: str) -> str:
    return "".join(ch for ch in word.lower() if ch.isalnum())


def _word_present(text: str, phrase: str) -> bool:
    words = [_norm_word(w) for w in text.split()]
    parts = [_norm_word(p) for p in phrase.split()]
    if not parts or not all(parts):
        return False
    for i in range(len(words) - len(parts) + 1):
        if words[i : i + len(parts)] == parts:
            return True
    return False


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def story_to_json_obj(story: Story) -> dict:
    return {
        "id": story.id,
        "style": story.style,
        "character_description": story.character_description,
        "scenes": [
            {
                "narrative": scene.narrative,
                "positive_pairs": [list(p) for p in scene.positive_pairs],
                "negative_pairs": [list(p) for p in scene.negative_pairs],
            }
            for scene in story.scenes
        ],
    }


def story_from_json_obj(obj: Mapping) -> Story:
    scenes = tuple(
        Scene(
            narrative=s["narrative"],
            positive_pairs=tuple((a, o) for a, o in s.get("positive_pairs", [])),
            negative_pairs=tuple((a, o) for a, o in s.get("negative_pairs", [])),
        )
        for s in obj["scenes"]
    )
    return Story(
        id=obj["id"],
        style=obj["style"],
        character_description=obj["character_description"],
        scenes=scenes,
    )


def dumps_story(story: Story) -> str:
    """Canonical story serialization; re-serializing a parsed file is byte-identical."""
    return json.dumps(story_to_json_obj(story), indent=2, ensure_ascii=False) + "\n"


def save_story(story: Story, path: Path) -> None:
    Path(path).write_text(dumps_story(story), encoding="utf-8")


def load_story(path: Path) -> Story:
    return story_from_json_obj(json.loads(Path(path).read_text(encoding="utf-8")))


def write_benchmark(stories: Sequence[Story], out_dir: Path) -> Path:
    """One JSON file per story plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for story in stories:
        name = f"{story.id}.json"
        save_story(story, out_dir / name)
        names.append(name)
    manifest = {"format_version": FORMAT_VERSION, "stories": sorted(names)}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def read_benchmark(benchmark_dir: Path) -> list[Story]:
    benchmark_dir = Path(benchmark_dir)
    manifest_path = benchmark_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported benchmark format version {manifest.get('format_version')!r}"
        )
    return [load_story(benchmark_dir / name) for name in manifest["stories"]]


# ---------------------------------------------------------------------------
# Lexicon and instruction template (editable package data)
# ---------------------------------------------------------------------------


def load_lexicon(path: Path | None = None) -> dict[str, list[str]]:
    if path is not None:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    text = resources.files("storybind.data").joinpath("lexicon.json").read_text("utf-8")
    return json.loads(text)


def categorize_attribute(attribute: str, lexicon: Mapping[str, list[str]]) -> str:
    """Category of an attribute word or phrase; first hit wins in lexicon order."""
    tokens = {_norm_word(t) for t in attribute.split()}
    for category in ("color", "texture", "material"):
        members = {_norm_word(m) for m in lexicon.get(category, ())}
        if tokens & members:
            return category
    return "other"


def load_instruction_template(path: Path | None = None) -> str:
    if path is not None:
        return Path(path).read_text(encoding="utf-8")
    return resources.files("storybind.data").joinpath("instruction_template.txt").read_text(
        "utf-8"
    )


def render_instruction(
    template: str,
    style: str,
    scene_count: int = SCENES_PER_STORY,
    pair_min: int = PAIRS_MIN,
    pair_max: int = PAIRS_MAX,
) -> str:
    return template.format(
        style=style, scene_count=scene_count, pair_min=pair_min, pair_max=pair_max
    )


# ---------------------------------------------------------------------------
# Negative-pair derivation
# ---------------------------------------------------------------------------


def derive_negative_pairs(positive: Sequence[Pair]) -> list[Pair]:
    """Swap objects across the positive attributes: a derangement-style reassignment.

    Attribute order is preserved; each attribute receives another positive
    pair's object such that no produced pair reproduces a positive pair.
    Permutations are tried in lexicographic index order so the result is
    deterministic.
    """
    positive = [(a, o) for a, o in positive]
    if len(positive) < 2:
        raise InsufficientDiversityError("need at least 2 positive pairs to derive negatives")
    attrs = [a for a, _ in positive]
    objects = [o for _, o in positive]
    if len(set(attrs)) < 2:
        raise InsufficientDiversityError("need at least 2 distinct attributes")
    positive_set = set(positive)
    for perm in itertools.permutations(range(len(positive))):
        if all(i != j for i, j in enumerate(perm)):
            candidate = [(attrs[i], objects[perm[i]]) for i in range(len(positive))]
            if not (set(candidate) & positive_set):
                return candidate
    raise InsufficientDiversityError(
        "every object reassignment reproduces an existing positive pair"
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_story(story: Story, lexicon: Mapping[str, list[str]] | None = None) -> list[Violation]:
    """Structural checks; an empty list means the story is valid."""
    lexicon = lexicon or load_lexicon()
    violations: list[Violation] = []

    def flag(scene_index: int | None, code: str, message: str) -> None:
        violations.append(Violation(story.id, scene_index, code, message))

    if len(story.scenes) != SCENES_PER_STORY:
        flag(None, "scene-count", f"expected {SCENES_PER_STORY} scenes, found {len(story.scenes)}")
    if story.style.strip().lower() not in STYLES:
        flag(None, "style", f"style {story.style!r} is not one of the benchmark styles")
    if not story.character_description.strip():
        flag(None, "character", "character description is empty")

    categories: set[str] = set()
    for index, scene in enumerate(story.scenes):
        if not scene.narrative.strip():
            flag(index, "empty-narrative", f"scene {index} has an empty narrative")
            continue
        n_pos = len(scene.positive_pairs)
        if not (PAIRS_MIN <= n_pos <= PAIRS_MAX):
            flag(
                index,
                "pair-count",
                f"scene {index} has {n_pos} positive pairs, expected {PAIRS_MIN}..{PAIRS_MAX}",
            )
        overlap = set(scene.positive_pairs) & set(scene.negative_pairs)
        if overlap:
            flag(
                index,
                "pairs-overlap",
                f"scene {index} lists pairs as both positive and negative: {sorted(overlap)}",
            )
        try:
            prompt = build_scene_prompt(story.style, story.character_description, scene.narrative)
        except EmptyComponentError:
            prompt = scene.narrative
        for attr, obj in (*scene.positive_pairs, *scene.negative_pairs):
            for word in (attr, obj):
                if not _word_present(prompt, word):
                    flag(
                        index,
                        "word-missing",
                        f"scene {index} pair word {word!r} does not appear in the scene prompt",
                    )
        for attr, _ in scene.positive_pairs:
            categories.add(categorize_attribute(attr, lexicon))

    if story.scenes and len(categories) < 2:
        flag(
            None,
            "category-diversity",
            f"positive-pair attributes cover only {sorted(categories)}, expected >= 2 categories",
        )
    return violations


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@runtime_checkable
class TextGenClient(Protocol):
    """Structured instruction text in, raw response text out."""

    def __call__(self, instruction: str) -> str: ...


class ReplayTextGenClient:
    """Replays a fixed list of responses in order; for fixtures and retry tests."""

    def __init__(self, responses: Sequence[str]) -> None:
        self._responses = list(responses)
        self.calls = 0

    def __call__(self, instruction: str) -> str:
        if self.calls >= len(self._responses):
            raise RuntimeError("replay client ran out of fixture responses")
        response = self._responses[self.calls]
        self.calls += 1
        return response


_NAMES = ("Maya", "Oliver", "Imani", "Sora", "Nadia", "Felix", "Aria", "Luka", "Tomas", "Ines")
_PERSONS = ("girl", "boy", "woman", "man", "painter", "sailor", "gardener", "violinist")
_HAIR = ("curly brown", "sandy blond", "jet black", "auburn", "silver", "copper")
_EYES = ("brown", "green", "hazel", "blue", "grey", "amber")
_OBJECTS = (
    "dress", "hoodie", "scarf", "umbrella", "satchel", "lantern", "kite",
    "jacket", "boots", "cape", "basket", "canoe", "bicycle", "banner",
)
_SETTINGS = (
    "near the old harbor",
    "under the plane trees",
    "on the market square",
    "along the river path",
    "at the edge of the meadow",
    "beneath the railway arches",
    "outside the tiny bakery",
    "on the rooftop terrace",
)
_VERB_SLOTS = (
    "wearing {art} {attr} {obj}",
    "carrying {art} {attr} {obj}",
    "holding {art} {attr} {obj}",
    "walking beside {art} {attr} {obj}",
    "reaching for {art} {attr} {obj}",
)


def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


class StubTextGenClient:
    """Deterministic offline stand-in for an LLM.

    Synthesizes a structurally valid story response per call. Output depends
    only on the seed, the instruction text, and the call counter, so a fixed
    call sequence replays byte-identically.
    """

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self._calls = 0

    def __call__(self, instruction: str) -> str:
        rng = random.Random(
            (zlib.crc32(instruction.encode("utf-8")) << 20)
            ^ (self.seed << 8)
            ^ self._calls
        )
        self._calls += 1
        lexicon = load_lexicon()
        name = rng.choice(_NAMES)
        description = (
            f"{name}, a {rng.randrange(7, 70)}-year-old {rng.choice(_PERSONS)} "
            f"with {rng.choice(_HAIR)} hair and {rng.choice(_EYES)} eyes"
        )
        scenes = []
        for scene_index in range(SCENES_PER_STORY):
            n_pairs = rng.randint(PAIRS_MIN, PAIRS_MAX)
            # Force category spread: the first scene draws colors, the second
            # textures/materials, so every story covers >= 2 categories.
            if scene_index == 0:
                pool = list(lexicon["color"])
            elif scene_index == 1:
                pool = list(lexicon["texture"]) + list(lexicon["material"])
            else:
                pool = list(lexicon["color"]) + list(lexicon["texture"]) + list(
                    lexicon["material"]
                )
            attrs = rng.sample(pool, n_pairs)
            objects = rng.sample(_OBJECTS, n_pairs)
            positive = list(zip(attrs, objects))
            negative = derive_negative_pairs(positive)
            phrases = [
                slot.format(art=_article(attr), attr=attr, obj=obj)
                for slot, (attr, obj) in zip(itertools.cycle(_VERB_SLOTS), positive)
            ]
            if len(phrases) == 1:
                action = phrases[0]
            else:
                action = ", ".join(phrases[:-1]) + " and " + phrases[-1]
            narrative = f"{action} {rng.choice(_SETTINGS)}"
            scenes.append(
                {
                    "narrative": narrative,
                    "positive_pairs": [list(p) for p in positive],
                    "negative_pairs": [list(p) for p in negative],
                }
            )
        return json.dumps(
            {"character_description": description, "scenes": scenes}, ensure_ascii=False
        )


_FENCE_RE = re.compile(r"^```[a-zA-Z]*\n|\n?```$")


def _parse_story_payload(raw: str) -> dict:
    text = raw.strip()
    text = _FENCE_RE.sub("", text).strip()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseFailureError(f"response is not valid JSON: {err}", raw_response=raw)
    if not isinstance(payload, dict):
        raise ParseFailureError("response JSON is not an object", raw_response=raw)
    description = payload.get("character_description")
    scenes = payload.get("scenes")
    if not isinstance(description, str) or not description.strip():
        raise ParseFailureError("missing character_description", raw_response=raw)
    if not isinstance(scenes, list) or not scenes:
        raise ParseFailureError("missing scenes list", raw_response=raw)
    for k, scene in enumerate(scenes):
        if not isinstance(scene, dict) or not isinstance(scene.get("narrative"), str):
            raise ParseFailureError(f"scene {k} lacks a narrative", raw_response=raw)
        for key in ("positive_pairs", "negative_pairs"):
            pairs = scene.get(key, [])
            if not isinstance(pairs, list) or any(
                not isinstance(p, (list, tuple)) or len(p) != 2 for p in pairs
            ):
                raise ParseFailureError(
                    f"scene {k} field {key} is not a list of [attribute, object] pairs",
                    raw_response=raw,
                )
    return payload


_REPAIR_SUFFIX = (
    "\n\nYour previous reply could not be parsed ({error}). "
    "Reply again with only the JSON object described above."
)


def _style_slug(style: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", style.lower()).strip("-")


def generate_story_with_report(
    client: TextGenClient,
    style: str,
    instruction_template: str | None = None,
    seed: int = 0,
    max_retries: int = 2,
    story_id: str | None = None,
) -> tuple[Story, int]:
    """Generate and validate one story; returns (story, parse retries used)."""
    template = instruction_template or load_instruction_template()
    instruction = render_instruction(template, style=style)
    retries = 0
    payload: dict | None = None
    last_error: ParseFailureError | None = None
    for attempt in range(max_retries + 1):
        request = instruction
        if attempt > 0 and last_error is not None:
            request = instruction + _REPAIR_SUFFIX.format(error=last_error)
        raw = client(request)
        try:
            payload = _parse_story_payload(raw)
            break
        except ParseFailureError as err:
            last_error = err
            retries = attempt + 1
    if payload is None:
        assert last_error is not None
        raise ParseFailureError(
            f"unparseable after {max_retries} retries: {last_error}",
            raw_response=last_error.raw_response,
        )

    story = Story(
        id=story_id or f"{_style_slug(style)}-{seed:04d}",
        style=style,
        character_description=payload["character_description"].strip(),
        scenes=tuple(
            Scene(
                narrative=s["narrative"].strip(),
                positive_pairs=tuple((str(a), str(o)) for a, o in s.get("positive_pairs", [])),
                negative_pairs=tuple((str(a), str(o)) for a, o in s.get("negative_pairs", [])),
            )
            for s in payload["scenes"]
        ),
    )
    violations = validate_story(story)
    if violations:
        raise StoryValidationError(story.id, violations)
    return story, retries


def generate_story(
    client: TextGenClient,
    style: str,
    instruction_template: str | None = None,
    seed: int = 0,
    max_retries: int = 2,
    story_id: str | None = None,
) -> Story:
    story, _ = generate_story_with_report(
        client, style, instruction_template, seed, max_retries, story_id
    )
    return story


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def compute_stats(
    stories: Sequence[Story], lexicon: Mapping[str, list[str]] | None = None
) -> BenchmarkStats:
    lexicon = lexicon or load_lexicon()
    style_hist: dict[str, int] = {}
    scenes_hist: dict[int, int] = {}
    pair_hist: dict[int, int] = {}
    category_hist: dict[str, int] = {}
    for story in stories:
        style_hist[story.style] = style_hist.get(story.style, 0) + 1
        scenes_hist[len(story.scenes)] = scenes_hist.get(len(story.scenes), 0) + 1
        for scene in story.scenes:
            n = len(scene.positive_pairs)
            pair_hist[n] = pair_hist.get(n, 0) + 1
            for attr, _ in scene.positive_pairs:
                cat = categorize_attribute(attr, lexicon)
                category_hist[cat] = category_hist.get(cat, 0) + 1
    return BenchmarkStats(
        story_count=len(stories),
        style_histogram=style_hist,
        scenes_per_story=scenes_hist,
        pair_count_histogram=pair_hist,
        attribute_category_histogram=category_hist,
    )
