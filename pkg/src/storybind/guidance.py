"""Latent optimization over the early denoising timesteps.

The loop differentiates the pair-overlap objective through a host pipeline's
cross-attention grids and nudges the latent before each scheduler transition.
Hosts plug in through :class:`DenoiserAdapter`; nothing here knows about any
particular backbone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence, runtime_checkable

import torch
from torch import Tensor

from .attention import (
    AggregationPolicy,
    AttributePairSet,
    TokenSpan,
    WordNotFoundError,
    aggregate_attention,
    align_tokens,
    find_word_span,
    pair_overlaps,
)

__all__ = [
    "GuidanceConfig",
    "LatentState",
    "DenoiserAdapter",
    "GuidanceStepOutcome",
    "TimestepRecord",
    "GuidanceTrace",
    "MomentState",
    "NonFiniteLatentError",
    "make_schedule",
    "guidance_step",
    "run_guided_denoise",
]

STEP_RULES = ("plain-gradient", "adaptive-moment")


class NonFiniteLatentError(RuntimeError):
    """The latent picked up NaN/Inf values during the denoising loop."""


@dataclass(frozen=True)
class GuidanceConfig:
    """Knobs for the guided denoising loop.

    Defaults follow the reference setup: 50 denoising steps with the first
    half guided, one adaptive-moment update per guided timestep at learning
    rate 0.01. ``learning_rate`` of exactly 0 is allowed so a guided run can
    be diffed against an unguided one without touching the code path.
    """

    total_steps: int = 50
    guided_fraction: float = 0.5
    step_rule: str = "adaptive-moment"
    learning_rate: float = 0.01
    updates_per_timestep: int = 1
    epsilon: float = 1e-8
    aggregation: AggregationPolicy = field(default_factory=AggregationPolicy)

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not (0.0 < self.guided_fraction <= 1.0):
            raise ValueError(f"guided_fraction must lie in (0, 1], got {self.guided_fraction}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}")
        if self.learning_rate < 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.updates_per_timestep < 1:
            raise ValueError(f"updates_per_timestep must be >= 1, got {self.updates_per_timestep}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "guided_fraction": self.guided_fraction,
            "step_rule": self.step_rule,
            "learning_rate": self.learning_rate,
            "updates_per_timestep": self.updates_per_timestep,
            "epsilon": self.epsilon,
            "aggregation": self.aggregation.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "GuidanceConfig":
        aggregation = payload.get("aggregation")
        return cls(
            total_steps=int(payload.get("total_steps", 50)),
            guided_fraction=float(payload.get("guided_fraction", 0.5)),
            step_rule=payload.get("step_rule", "adaptive-moment"),
            learning_rate=float(payload.get("learning_rate", 0.01)),
            updates_per_timestep=int(payload.get("updates_per_timestep", 1)),
            epsilon=float(payload.get("epsilon", 1e-8)),
            aggregation=(
                AggregationPolicy.from_dict(aggregation) if aggregation else AggregationPolicy()
            ),
        )

    @classmethod
    def from_json_file(cls, path: Path) -> "GuidanceConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def write_json_file(self, path: Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )


@dataclass(frozen=True)
class LatentState:
    """A latent tensor at a given point of the denoising order."""

    tensor: Tensor
    timestep_index: int = 0

    def __post_init__(self) -> None:
        if self.timestep_index < 0:
            raise ValueError(f"timestep_index must be >= 0, got {self.timestep_index}")
        if not bool(torch.isfinite(self.tensor).all()):
            raise NonFiniteLatentError(
                f"latent at timestep {self.timestep_index} contains non-finite values"
            )


@runtime_checkable
class DenoiserAdapter(Protocol):
    """Behavioral contract a host denoising pipeline exposes to the loop.

    Implementations must be deterministic: identical inputs and identical
    random state produce identical outputs. ``predict`` must return attention
    grids that are differentiable with respect to the latent tensor.
    """

    name: str

    def latent_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) of the latent tensor."""
        ...

    def tokenize(self, prompt: str) -> list[tuple[int, str]]:
        """Conditioning tokenization as (index, surface) pairs, sentinels included."""
        ...

    def initial_latent(self, seed: int) -> Tensor:
        """Seeded starting latent."""
        ...

    def predict(
        self, latent: Tensor, prompt: str, timestep_index: int
    ) -> tuple[Tensor, dict[str, Tensor]]:
        """Noise/score prediction plus raw per-layer (heads, subtokens, h, w) attention grids."""
        ...

    def advance(self, latent: Tensor, noise_pred: Tensor, timestep_index: int) -> Tensor:
        """Scheduler transition to the next latent."""
        ...


@dataclass
class MomentState:
    """First/second moment buffers for the adaptive-moment step rule."""

    m: Tensor
    v: Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, tensor: Tensor) -> "MomentState":
        return cls(m=torch.zeros_like(tensor), v=torch.zeros_like(tensor), step=0)


_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


def _adaptive_moment_update(
    latent: Tensor, grad: Tensor, state: MomentState, lr: float, weight_decay: float = 0.0
) -> tuple[Tensor, MomentState]:
    step = state.step + 1
    m = _ADAM_BETA1 * state.m + (1.0 - _ADAM_BETA1) * grad
    v = _ADAM_BETA2 * state.v + (1.0 - _ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - _ADAM_BETA1**step)
    v_hat = v / (1.0 - _ADAM_BETA2**step)
    update = m_hat / (v_hat.sqrt() + _ADAM_EPS)
    new = latent - lr * update - lr * weight_decay * latent
    return new, MomentState(m=m, v=v, step=step)


@dataclass(frozen=True)
class GuidanceStepOutcome:
    """What one guidance step computed and whether it touched the latent."""

    loss: float
    pair_ious: dict[str, float]
    grad_norm: float
    applied: bool
    note: str | None = None


@dataclass(frozen=True)
class TimestepRecord:
    timestep_index: int
    applied: bool
    loss: float | None = None
    pair_ious: dict[str, float] | None = None
    grad_norm: float | None = None
    note: str | None = None

    def to_json_obj(self) -> dict:
        return {
            "timestep_index": self.timestep_index,
            "applied": self.applied,
            "loss": self.loss,
            "pair_ious": self.pair_ious,
            "grad_norm": self.grad_norm,
            "note": self.note,
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "TimestepRecord":
        return cls(
            timestep_index=int(obj["timestep_index"]),
            applied=bool(obj["applied"]),
            loss=obj.get("loss"),
            pair_ious=obj.get("pair_ious"),
            grad_norm=obj.get("grad_norm"),
            note=obj.get("note"),
        )


@dataclass
class GuidanceTrace:
    """One record per denoising timestep, serializable as line-delimited JSON."""

    records: list[TimestepRecord] = field(default_factory=list)

    def append(self, record: TimestepRecord) -> None:
        expected = len(self.records) + 1
        if record.timestep_index != expected:
            raise ValueError(
                f"trace records must be contiguous: expected timestep {expected}, "
                f"got {record.timestep_index}"
            )
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(r.to_json_obj(), ensure_ascii=False, sort_keys=True) + "\n"
            for r in self.records
        )

    def write(self, path: Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> "GuidanceTrace":
        trace = cls()
        for line in text.splitlines():
            if line.strip():
                trace.append(TimestepRecord.from_json_obj(json.loads(line)))
        return trace

    @classmethod
    def read(cls, path: Path) -> "GuidanceTrace":
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


def make_schedule(config: GuidanceConfig) -> frozenset[int]:
    """Guided timestep indices: the first ceil(fraction * total) of the denoising order.

    Indices are 1-based with 1 the noisiest step. The product is rounded to
    nine decimals before the ceiling so binary float fuzz cannot add a step.
    """
    count = math.ceil(round(config.guided_fraction * config.total_steps, 9))
    count = min(max(count, 1), config.total_steps)
    return frozenset(range(1, count + 1))


def _iou_key(polarity: str, attr: str, obj: str) -> str:
    return f"{polarity}:{attr}|{obj}"


def resolve_pair_spans(
    spans: Sequence[TokenSpan], pairs: AttributePairSet
) -> list[TokenSpan]:
    """One span per distinct pair word, multi-word phrases merged."""
    return [find_word_span(spans, word) for word in pairs.words]


def guidance_step(
    state: LatentState,
    adapter: DenoiserAdapter,
    prompt: str,
    pairs: AttributePairSet,
    spans: Sequence[TokenSpan],
    config: GuidanceConfig,
    opt_state: MomentState | None = None,
) -> tuple[LatentState, GuidanceStepOutcome, MomentState | None]:
    """One latent update against the pair-overlap objective.

    Differentiates the objective through the adapter's attention grids with
    respect to the latent tensor; the noise prediction never enters the loss.
    With the plain-gradient rule the update is exactly
    ``latent - learning_rate * grad``; the adaptive-moment rule applies a
    bias-corrected Adam step with decoupled (zero by default) weight decay.
    A non-finite gradient skips the update and leaves the latent untouched.
    """
    if not pairs.positive:
        raise ValueError("guidance requires a non-empty positive pair set")
    pair_spans = resolve_pair_spans(spans, pairs)

    leaf = state.tensor.detach().clone().requires_grad_(True)
    _, raw_maps = adapter.predict(leaf, prompt, state.timestep_index)
    maps = aggregate_attention(raw_maps, pair_spans, config.aggregation)
    overlaps = pair_overlaps(maps, pairs, config.epsilon)
    loss = torch.zeros((), dtype=torch.float64)
    ious: dict[str, float] = {}
    for (polarity, attr, obj), value in overlaps.items():
        loss = loss - value if polarity == "positive" else loss + value
        ious[_iou_key(polarity, attr, obj)] = float(value.detach())

    (grad,) = torch.autograd.grad(loss, leaf)
    loss_value = float(loss.detach())

    if not bool(torch.isfinite(grad).all()):
        outcome = GuidanceStepOutcome(
            loss=loss_value,
            pair_ious=ious,
            grad_norm=float("nan"),
            applied=False,
            note="non-finite-gradient",
        )
        return LatentState(state.tensor, state.timestep_index), outcome, opt_state

    grad_norm = float(grad.norm())
    if config.step_rule == "plain-gradient":
        new_tensor = state.tensor - config.learning_rate * grad
        new_opt = opt_state
    else:
        if opt_state is None:
            opt_state = MomentState.zeros_like(state.tensor)
        new_tensor, new_opt = _adaptive_moment_update(
            state.tensor, grad, opt_state, config.learning_rate
        )

    outcome = GuidanceStepOutcome(
        loss=loss_value, pair_ious=ious, grad_norm=grad_norm, applied=True
    )
    return LatentState(new_tensor.detach(), state.timestep_index), outcome, new_opt


def run_guided_denoise(
    adapter: DenoiserAdapter,
    prompt: str,
    pairs: AttributePairSet,
    config: GuidanceConfig,
    seed: int,
    apply_guidance: bool = True,
) -> tuple[LatentState, GuidanceTrace]:
    """Full denoising loop with guidance updates at the scheduled early timesteps.

    At each guided timestep, ``updates_per_timestep`` guidance steps run
    before the scheduler transition; moment buffers are reset between
    timesteps. An empty pair set or ``apply_guidance=False`` degrades to the
    plain unguided loop. Identical inputs and seed reproduce identical traces.
    """
    if pairs:
        missing = pairs.missing_words(prompt)
        if missing:
            raise WordNotFoundError(missing[0])
    spans = align_tokens(prompt, adapter.tokenize(prompt))
    if pairs:
        resolve_pair_spans(spans, pairs)  # fail fast on uncovered pair words

    schedule = make_schedule(config)
    guiding = apply_guidance and bool(pairs.positive)
    latent = adapter.initial_latent(seed)
    trace = GuidanceTrace()

    for t in range(1, config.total_steps + 1):
        state = LatentState(latent, t)
        if guiding and t in schedule:
            opt_state: MomentState | None = None
            outcome: GuidanceStepOutcome | None = None
            for _ in range(config.updates_per_timestep):
                state, outcome, opt_state = guidance_step(
                    state, adapter, prompt, pairs, spans, config, opt_state
                )
            assert outcome is not None
            trace.append(
                TimestepRecord(
                    timestep_index=t,
                    applied=outcome.applied,
                    loss=outcome.loss,
                    pair_ious=outcome.pair_ious,
                    grad_norm=None if math.isnan(outcome.grad_norm) else outcome.grad_norm,
                    note=outcome.note,
                )
            )
            latent = state.tensor
        else:
            trace.append(TimestepRecord(timestep_index=t, applied=False))

        try:
            with torch.no_grad():
                noise_pred, _ = adapter.predict(latent, prompt, t)
                latent = adapter.advance(latent, noise_pred, t)
        except Exception as exc:
            raise RuntimeError(f"adapter failed at timestep {t}: {exc}") from exc
        if not bool(torch.isfinite(latent).all()):
            raise NonFiniteLatentError(f"latent became non-finite after timestep {t}")

    return LatentState(latent.detach(), config.total_steps), trace
