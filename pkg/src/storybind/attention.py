"""Cross-attention map handling and the differentiable pair-overlap objective.

This module owns the per-token attention map representation, the alignment
between prompt words and tokenizer positions, the aggregation of raw
per-layer/per-head attention grids into one map per word, and the soft-IoU
binding loss that the guidance loop differentiates.

Everything here is a pure function over immutable inputs; all tensor math is
float64 and keeps the autograd graph intact so gradients can flow back to
whatever produced the raw grids.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "AttentionMap",
    "TokenSpan",
    "AttributePairSet",
    "AggregationPolicy",
    "ShapeMismatchError",
    "DomainError",
    "AlignmentError",
    "WordNotFoundError",
    "EmptyLayerSelectionError",
    "ResolutionError",
    "MissingMapError",
    "align_tokens",
    "find_word_span",
    "aggregate_attention",
    "soft_iou",
    "pair_overlaps",
    "binding_loss",
    "export_attention_map",
]

# Floor for min-max rescaling of near-constant maps; constant maps rescale to
# all zeros instead of dividing by zero.
_RESCALE_FLOOR = 1e-12


class ShapeMismatchError(ValueError):
    """Two attention maps that must share a shape do not."""


class DomainError(ValueError):
    """An attention map cell lies outside [0, 1]."""


class AlignmentError(ValueError):
    """The subtoken sequence cannot be aligned with the prompt words."""


class WordNotFoundError(KeyError):
    """A requested pair word has no subtoken coverage in the prompt."""

    def __init__(self, word: str) -> None:
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"word {self.word!r} has no subtoken coverage in the prompt"


class EmptyLayerSelectionError(ValueError):
    """The aggregation policy selected no cross-attention layers."""


class ResolutionError(ValueError):
    """A layer grid cannot be resampled to the target resolution."""


class MissingMapError(KeyError):
    """A pair names a word with no aggregated attention map."""

    def __init__(self, word: str) -> None:
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"no attention map for pair word {self.word!r}"


@dataclass(frozen=True)
class AttentionMap:
    """One token's spatial attention grid, values in [0, 1]."""

    values: Tensor
    token_label: str

    def __post_init__(self) -> None:
        if self.values.dim() != 2:
            raise ShapeMismatchError(
                f"attention map must be 2-D, got shape {tuple(self.values.shape)}"
            )
        h, w = self.values.shape
        if h < 1 or w < 1:
            raise ShapeMismatchError(f"attention map needs H, W >= 1, got {h}x{w}")
        _check_unit_range(self.values, self.token_label)

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.values.shape[0]), int(self.values.shape[1]))


def _check_unit_range(values: Tensor, label: str) -> None:
    vmin = float(values.detach().min())
    vmax = float(values.detach().max())
    if not np.isfinite(vmin) or not np.isfinite(vmax):
        raise DomainError(f"map {label!r} contains non-finite values")
    if vmin < 0.0 or vmax > 1.0:
        raise DomainError(
            f"map {label!r} has values outside [0, 1] (min={vmin:g}, max={vmax:g})"
        )


@dataclass(frozen=True)
class TokenSpan:
    """A prompt word together with the conditioning-sequence positions covering it."""

    word: str
    subtoken_indices: tuple[int, ...]

    def __post_init__(self) -> None:
        idx = self.subtoken_indices
        if not idx:
            raise ValueError(f"span for {self.word!r} has no subtoken indices")
        if any(i < 0 for i in idx):
            raise ValueError(f"span for {self.word!r} has negative indices: {idx}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"span indices for {self.word!r} must be strictly increasing: {idx}")


@dataclass(frozen=True)
class AttributePairSet:
    """Positive pairs that should co-occur spatially and negative pairs that should not."""

    positive: tuple[tuple[str, str], ...] = ()
    negative: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        overlap = set(self.positive) & set(self.negative)
        if overlap:
            raise ValueError(f"pairs appear in both positive and negative sets: {sorted(overlap)}")

    @classmethod
    def from_lists(
        cls,
        positive: Iterable[Sequence[str]],
        negative: Iterable[Sequence[str]] = (),
    ) -> "AttributePairSet":
        return cls(
            positive=tuple((str(a), str(o)) for a, o in positive),
            negative=tuple((str(a), str(o)) for a, o in negative),
        )

    def __bool__(self) -> bool:
        return bool(self.positive or self.negative)

    @property
    def words(self) -> tuple[str, ...]:
        """Distinct pair words in first-appearance order."""
        seen: dict[str, None] = {}
        for attr, obj in (*self.positive, *self.negative):
            seen.setdefault(attr)
            seen.setdefault(obj)
        return tuple(seen)

    def missing_words(self, prompt: str) -> list[str]:
        """Pair words (or word phrases) absent from the prompt, whole-word matched."""
        prompt_words = [_normalize_word(w) for w in prompt.split()]
        missing = []
        for word in self.words:
            parts = [_normalize_word(p) for p in word.split()]
            if not _contains_subsequence(prompt_words, parts):
                missing.append(word)
        return missing


def _contains_subsequence(words: list[str], parts: list[str]) -> bool:
    if not parts:
        return False
    for i in range(len(words) - len(parts) + 1):
        if words[i : i + len(parts)] == parts:
            return True
    return False


@dataclass(frozen=True)
class AggregationPolicy:
    """How raw per-layer/head/subtoken grids collapse into one map per word.

    ``layer_selector`` of ``None`` means every layer in the raw maps; reductions
    over heads and layers are means, made order-insensitive at the bit level by
    sorting values before the reduction. ``rescale`` applies a per-map min-max
    rescale to [0, 1] after aggregation.
    """

    layer_selector: tuple[str, ...] | None = None
    target_resolution: tuple[int, int] = (16, 16)
    head_reduction: str = "mean"
    layer_reduction: str = "mean"
    rescale: bool = True

    def __post_init__(self) -> None:
        h, w = self.target_resolution
        if h < 1 or w < 1:
            raise ResolutionError(f"target resolution must be positive, got {h}x{w}")
        if self.head_reduction != "mean" or self.layer_reduction != "mean":
            raise ValueError("only 'mean' reductions are supported")

    def to_dict(self) -> dict:
        return {
            "layer_selector": list(self.layer_selector) if self.layer_selector else None,
            "target_resolution": list(self.target_resolution),
            "head_reduction": self.head_reduction,
            "layer_reduction": self.layer_reduction,
            "rescale": self.rescale,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "AggregationPolicy":
        selector = payload.get("layer_selector")
        return cls(
            layer_selector=tuple(selector) if selector else None,
            target_resolution=tuple(payload.get("target_resolution", (16, 16))),
            head_reduction=payload.get("head_reduction", "mean"),
            layer_reduction=payload.get("layer_reduction", "mean"),
            rescale=bool(payload.get("rescale", True)),
        )


# ---------------------------------------------------------------------------
# Token alignment
# ---------------------------------------------------------------------------

_BPE_MARKERS = ("</w>", "Ġ", "▁", "##")


def _is_sentinel(surface: str) -> bool:
    s = surface.strip()
    return not s or (s.startswith("<") and s.endswith(">"))


def _clean_subtoken(surface: str) -> str:
    s = surface
    for marker in _BPE_MARKERS:
        s = s.replace(marker, "")
    return "".join(ch for ch in s.lower() if ch.isalnum())


def _normalize_word(word: str) -> str:
    return "".join(ch for ch in word.lower() if ch.isalnum())


def align_tokens(
    prompt: str, subtoken_sequence: Sequence[tuple[int, str]]
) -> list[TokenSpan]:
    """Map each prompt word to the subtoken indices that cover it.

    ``subtoken_sequence`` is the conditioning tokenization as (index, surface)
    pairs; begin/end sentinels (``<...>`` or empty surfaces) and padding are
    skipped. Comparison is on lowercased alphanumeric content, so punctuation
    splits and BPE markers do not matter. A word that occurs more than once
    gets a single span holding the union of its occurrences' indices.
    """
    words: list[tuple[str, str]] = []  # (display word, normalized)
    for raw in prompt.split():
        stripped = raw.strip(string.punctuation)
        norm = _normalize_word(raw)
        if norm:
            words.append((stripped or raw, norm))

    occurrences: list[tuple[str, str, list[int]]] = []
    wi = 0
    buf = ""
    buf_indices: list[int] = []
    for index, surface in subtoken_sequence:
        if _is_sentinel(surface):
            continue
        piece = _clean_subtoken(surface)
        if not piece:
            # Punctuation-only subtoken: part of the current word if one is
            # being assembled, otherwise free-standing and ignored.
            if buf:
                buf_indices.append(index)
            continue
        if wi >= len(words):
            raise AlignmentError(
                f"subtoken {surface!r} at position {index} extends past the prompt words"
            )
        display, target = words[wi]
        candidate = buf + piece
        if not target.startswith(candidate):
            raise AlignmentError(
                f"subtoken {surface!r} at position {index} does not continue word {display!r}"
            )
        buf = candidate
        buf_indices.append(index)
        if buf == target:
            occurrences.append((display, target, buf_indices))
            wi += 1
            buf = ""
            buf_indices = []

    if buf:
        raise AlignmentError(f"tokenization ends mid-word in {words[wi][0]!r}")
    if wi < len(words):
        missing = ", ".join(display for display, _ in words[wi:])
        raise AlignmentError(f"no subtoken coverage for prompt word(s): {missing}")

    merged: dict[str, tuple[str, list[int]]] = {}
    for display, norm, indices in occurrences:
        if norm in merged:
            merged[norm][1].extend(indices)
        else:
            merged[norm] = (display, list(indices))
    return [
        TokenSpan(word=display, subtoken_indices=tuple(sorted(indices)))
        for display, indices in merged.values()
    ]


def find_word_span(spans: Sequence[TokenSpan], word: str) -> TokenSpan:
    """Resolve a pair word (possibly a multi-word phrase) to a span.

    Phrase words resolve to the union of their component words' indices.
    Raises :class:`WordNotFoundError` when any component has no coverage.
    """
    by_norm = {_normalize_word(s.word): s for s in spans}
    indices: list[int] = []
    for part in word.split():
        norm = _normalize_word(part)
        span = by_norm.get(norm)
        if span is None:
            raise WordNotFoundError(word)
        indices.extend(span.subtoken_indices)
    if not indices:
        raise WordNotFoundError(word)
    return TokenSpan(word=word, subtoken_indices=tuple(sorted(set(indices))))


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _order_invariant_mean(values: Tensor, dim: int) -> Tensor:
    # Sorting before the reduction makes the mean bit-identical under any
    # permutation of the inputs along `dim`.
    return torch.sort(values, dim=dim).values.mean(dim=dim)


def _rescale_unit(values: Tensor) -> Tensor:
    vmin = values.min()
    vmax = values.max()
    return (values - vmin) / torch.clamp(vmax - vmin, min=_RESCALE_FLOOR)


def aggregate_attention(
    raw_maps: Mapping[str, Tensor],
    spans: Sequence[TokenSpan],
    policy: AggregationPolicy,
) -> dict[str, AttentionMap]:
    """Collapse raw grids into one map per word.

    ``raw_maps`` maps a layer name to a (heads, subtokens, h, w) grid. Per
    word: mean over the word's subtoken maps, mean over heads, bilinear
    resample of each layer's grid to the target resolution, then mean over
    layers. Layers are taken in sorted-name order and head/layer means sort
    their inputs first, so the result does not depend on input ordering.
    The whole computation stays on the autograd graph of ``raw_maps``.
    """
    if policy.layer_selector is None:
        selected = sorted(raw_maps)
    else:
        selected = sorted(policy.layer_selector)
        for name in selected:
            if name not in raw_maps:
                raise KeyError(f"selected layer {name!r} not present in raw maps")
    if not selected:
        raise EmptyLayerSelectionError("no cross-attention layers selected")

    target_h, target_w = policy.target_resolution
    out: dict[str, AttentionMap] = {}
    for span in spans:
        per_layer: list[Tensor] = []
        for name in selected:
            grid = raw_maps[name]
            if grid.dim() != 4:
                raise ShapeMismatchError(
                    f"layer {name!r} grid must be (heads, subtokens, h, w), "
                    f"got shape {tuple(grid.shape)}"
                )
            heads, tokens, h, w = grid.shape
            if h < 1 or w < 1:
                raise ResolutionError(f"layer {name!r} grid has empty spatial dims {h}x{w}")
            if max(span.subtoken_indices) >= tokens:
                raise IndexError(
                    f"span {span.word!r} indexes subtoken "
                    f"{max(span.subtoken_indices)} but layer {name!r} has {tokens}"
                )
            sub = grid.to(torch.float64)[:, list(span.subtoken_indices)]
            word_grid = sub.mean(dim=1)  # (heads, h, w); indices are canonical order
            head_grid = _order_invariant_mean(word_grid, dim=0)  # (h, w)
            if (h, w) != (target_h, target_w):
                head_grid = F.interpolate(
                    head_grid.unsqueeze(0).unsqueeze(0),
                    size=(target_h, target_w),
                    mode="bilinear",
                    align_corners=False,
                ).squeeze(0).squeeze(0)
            per_layer.append(head_grid)
        layered = _order_invariant_mean(torch.stack(per_layer, dim=0), dim=0)
        if policy.rescale:
            layered = _rescale_unit(layered)
        layered = layered.clamp(0.0, 1.0)
        out[span.word] = AttentionMap(values=layered, token_label=span.word)
    return out


# ---------------------------------------------------------------------------
# Soft IoU and the binding objective
# ---------------------------------------------------------------------------


def soft_iou(a: AttentionMap, b: AttentionMap, epsilon: float = 1e-8) -> Tensor:
    """Differentiable Jaccard overlap between two attention maps.

    Intersection is the cell-wise product, union the inclusion-exclusion sum;
    both are reduced over all cells before dividing, and the denominator is
    floored at ``epsilon``. Returns a 0-dim tensor in [0, 1] on the autograd
    graph of both inputs.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError(
            f"map shapes differ: {tuple(a.values.shape)} vs {tuple(b.values.shape)}"
        )
    _check_unit_range(a.values, a.token_label)
    _check_unit_range(b.values, b.token_label)
    inter = (a.values * b.values).sum()
    union = (a.values + b.values - a.values * b.values).sum()
    return inter / torch.clamp(union, min=epsilon)


def pair_overlaps(
    maps: Mapping[str, AttentionMap],
    pairs: AttributePairSet,
    epsilon: float = 1e-8,
) -> dict[tuple[str, str, str], Tensor]:
    """Soft IoU for every pair, keyed by (polarity, attribute, object)."""
    out: dict[tuple[str, str, str], Tensor] = {}
    for polarity, pair_list in (("positive", pairs.positive), ("negative", pairs.negative)):
        for attr, obj in pair_list:
            for word in (attr, obj):
                if word not in maps:
                    raise MissingMapError(word)
            out[(polarity, attr, obj)] = soft_iou(maps[attr], maps[obj], epsilon)
    return out


def binding_loss(
    maps: Mapping[str, AttentionMap],
    pairs: AttributePairSet,
    epsilon: float = 1e-8,
) -> Tensor:
    """Pair-overlap objective: minus the positive-pair IoUs plus the negative ones.

    Minimizing it pulls positive attribute-object pairs into spatial overlap
    and pushes negative pairs apart. The value lies in [-|positive|, |negative|]
    and stays differentiable with respect to every input map.
    """
    overlaps = pair_overlaps(maps, pairs, epsilon)
    loss = torch.zeros((), dtype=torch.float64)
    for (polarity, _, _), value in overlaps.items():
        loss = loss - value if polarity == "positive" else loss + value
    return loss


# ---------------------------------------------------------------------------
# Diagnostic export
# ---------------------------------------------------------------------------


def export_attention_map(m: AttentionMap, stem: Path, policy: AggregationPolicy) -> None:
    """Write a map as a portable .npy float grid with a JSON sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    np.save(stem.with_suffix(".npy"), m.values.detach().cpu().numpy().astype(np.float64))
    sidecar = {
        "word": m.token_label,
        "layer_selector": list(policy.layer_selector) if policy.layer_selector else None,
        "target_resolution": list(policy.target_resolution),
        "resolution": list(m.shape),
        "rescale": policy.rescale,
    }
    stem.with_suffix(".json").write_text(
        json.dumps(sidecar, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
