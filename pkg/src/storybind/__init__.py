"""Attribute-object binding guidance for text-conditioned denoising pipelines.

Three pieces: a differentiable pair-overlap objective on cross-attention maps
with an early-timestep latent optimization loop (`attention`, `guidance`), a
story benchmark toolchain with structured generation and validation
(`benchmark`), and a four-metric evaluation harness (`evaluation`). A
deterministic toy denoiser (`toy`) makes the whole pipeline verifiable on a
CPU.
"""

from .attention import (
    AggregationPolicy,
    AttentionMap,
    AttributePairSet,
    TokenSpan,
    aggregate_attention,
    align_tokens,
    binding_loss,
    find_word_span,
    pair_overlaps,
    soft_iou,
)
from .guidance import (
    DenoiserAdapter,
    GuidanceConfig,
    GuidanceTrace,
    LatentState,
    guidance_step,
    make_schedule,
    run_guided_denoise,
)
from .toy import (
    PlantedScenario,
    ToyConfig,
    build_toy,
    finite_difference_grad,
    make_planted_scenario,
)
from .benchmark import (
    STYLES,
    Scene,
    Story,
    StubTextGenClient,
    TextGenClient,
    build_scene_prompt,
    compute_stats,
    derive_negative_pairs,
    generate_story,
    validate_story,
)
from .evaluation import (
    MetricReport,
    ScorerContract,
    StubScorer,
    aggregate_report,
    question_from_pair,
    score_scene,
    score_story_consistency,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationPolicy",
    "AttentionMap",
    "AttributePairSet",
    "TokenSpan",
    "aggregate_attention",
    "align_tokens",
    "binding_loss",
    "find_word_span",
    "pair_overlaps",
    "soft_iou",
    "DenoiserAdapter",
    "GuidanceConfig",
    "GuidanceTrace",
    "LatentState",
    "guidance_step",
    "make_schedule",
    "run_guided_denoise",
    "PlantedScenario",
    "ToyConfig",
    "build_toy",
    "finite_difference_grad",
    "make_planted_scenario",
    "STYLES",
    "Scene",
    "Story",
    "StubTextGenClient",
    "TextGenClient",
    "build_scene_prompt",
    "compute_stats",
    "derive_negative_pairs",
    "generate_story",
    "validate_story",
    "MetricReport",
    "ScorerContract",
    "StubScorer",
    "aggregate_report",
    "question_from_pair",
    "score_scene",
    "score_story_consistency",
    "__version__",
]
