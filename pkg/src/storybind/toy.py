"""A deterministic CPU-scale denoiser with genuine differentiable cross-attention.

The toy backend exists so gradient checks and end-to-end guidance behavior can
be verified without GPUs or pretrained weights. Its attention for a word is a
softmax over spatial locations of a score linear in the latent, so guidance
gradients flow exactly as they would through a real backbone, just at desk
scale. Planted scenarios construct latents whose attention forms known blobs,
giving an analytic oracle for overlap-vs-separation behavior.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import torch
from torch import Tensor

from .attention import AttributePairSet

__all__ = [
    "ToyConfig",
    "ToyDenoiser",
    "PlantedScenario",
    "UnknownWordError",
    "build_toy",
    "finite_difference_grad",
    "make_planted_scenario",
    "DEFAULT_VOCAB",
]

DEFAULT_VOCAB: tuple[str, ...] = (
    "a", "an", "the", "and", "beside", "near", "with", "of", "on",
    "pink", "white", "red", "blue", "green",
    "dress", "lilies", "coat", "umbrella", "bike",
)

_START = "<start>"
_END = "<end>"


class UnknownWordError(KeyError):
    """A prompt word is outside the toy vocabulary."""

    def __init__(self, word: str) -> None:
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"prompt word {self.word!r} is not in the toy vocabulary"


def _norm(word: str) -> str:
    return "".join(ch for ch in word.lower() if ch.isalnum())


def _word_generator(word: str, seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed((zlib.crc32(word.encode("utf-8")) ^ (seed * 0x9E3779B1)) & 0x7FFFFFFF)
    return gen


@dataclass(frozen=True)
class ToyConfig:
    """Shape, vocabulary, and dynamics of the toy backend.

    ``embeddings`` runs parallel to ``vocab``; ``None`` derives a fixed unit
    vector per word from the seed, so embeddings are stable across processes.
    ``open_vocab`` lets arbitrary prompts run (unknown words get derived
    embeddings) instead of raising, which the CLI's toy backend relies on.
    ``base_latent`` plus ``init_noise`` let planted scenarios pin the starting
    latent while keeping seeds meaningful.
    """

    latent_shape: tuple[int, int, int] = (4, 8, 8)
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    embeddings: tuple[tuple[float, ...], ...] | None = None
    attention_resolution: tuple[int, int] = (8, 8)
    seed: int = 0
    score_gain: float = 4.0
    noise_scale: float = 0.05
    advance_rate: float = 0.02
    open_vocab: bool = False
    base_latent: Tensor | None = None
    init_noise: float = 0.0

    def __post_init__(self) -> None:
        c, h, w = self.latent_shape
        if min(c, h, w) < 1:
            raise ValueError(f"latent_shape must be positive, got {self.latent_shape}")
        ah, aw = self.attention_resolution
        if min(ah, aw) < 1:
            raise ValueError(f"attention_resolution must be positive, got {self.attention_resolution}")
        if self.embeddings is not None and len(self.embeddings) != len(self.vocab):
            raise ValueError(
                f"got {len(self.embeddings)} embeddings for {len(self.vocab)} vocab words"
            )
        if self.base_latent is not None and tuple(self.base_latent.shape) != self.latent_shape:
            raise ValueError(
                f"base_latent shape {tuple(self.base_latent.shape)} "
                f"does not match latent_shape {self.latent_shape}"
            )


class ToyDenoiser:
    """DenoiserAdapter over a linear score field with softmax spatial attention.

    For word ``w`` at location ``p`` the attention is
    ``softmax_p(gain * <latent[:, p], embedding(w)>)``, smooth in the latent.
    The noise prediction is the fixed linear map ``noise_scale * latent`` and
    the scheduler transition subtracts ``advance_rate`` times it, a weak
    contraction that leaves attention structure nearly untouched over a run.
    Everything is deterministic given the config and inputs.
    """

    name = "toy"

    def __init__(self, config: ToyConfig) -> None:
        self.config = config
        channels = config.latent_shape[0]
        self._embeddings: dict[str, Tensor] = {}
        for i, word in enumerate(config.vocab):
            key = _norm(word)
            if config.embeddings is not None:
                vec = torch.tensor(config.embeddings[i], dtype=torch.float64)
                if vec.numel() != channels:
                    raise ValueError(
                        f"embedding for {word!r} has {vec.numel()} dims, expected {channels}"
                    )
            else:
                vec = self._derived_embedding(key)
            self._embeddings[key] = vec

    def _derived_embedding(self, key: str) -> Tensor:
        channels = self.config.latent_shape[0]
        vec = torch.randn(channels, generator=_word_generator(key, self.config.seed),
                          dtype=torch.float64)
        return vec / vec.norm()

    def _embedding(self, word: str) -> Tensor:
        key = _norm(word)
        vec = self._embeddings.get(key)
        if vec is None:
            if not self.config.open_vocab:
                raise UnknownWordError(word)
            vec = self._derived_embedding(key)
            self._embeddings[key] = vec
        return vec

    def latent_shape(self) -> tuple[int, int, int]:
        return self.config.latent_shape

    def tokenize(self, prompt: str) -> list[tuple[int, str]]:
        words = [w for w in prompt.split() if _norm(w)]
        for w in words:
            self._embedding(w)  # vocabulary check up front
        sequence = [(0, _START)]
        sequence += [(i + 1, w) for i, w in enumerate(words)]
        sequence.append((len(words) + 1, _END))
        return sequence

    def initial_latent(self, seed: int) -> Tensor:
        gen = torch.Generator()
        gen.manual_seed(seed & 0x7FFFFFFFFFFF)
        noise = torch.randn(self.config.latent_shape, generator=gen, dtype=torch.float64)
        if self.config.base_latent is not None:
            return self.config.base_latent.to(torch.float64) + self.config.init_noise * noise
        return 0.5 * noise

    def predict(
        self, latent: Tensor, prompt: str, timestep_index: int
    ) -> tuple[Tensor, dict[str, Tensor]]:
        sequence = self.tokenize(prompt)
        embeds = []
        for _, surface in sequence:
            if surface in (_START, _END):
                embeds.append(torch.zeros(self.config.latent_shape[0], dtype=torch.float64))
            else:
                embeds.append(self._embedding(surface))
        embed_matrix = torch.stack(embeds, dim=0)  # (tokens, channels)

        scores = self.config.score_gain * torch.einsum(
            "chw,tc->thw", latent.to(torch.float64), embed_matrix
        )
        ah, aw = self.config.attention_resolution
        if scores.shape[1:] != (ah, aw):
            scores = torch.nn.functional.interpolate(
                scores.unsqueeze(0), size=(ah, aw), mode="bilinear", align_corners=False
            ).squeeze(0)
        tokens = scores.shape[0]
        attention = torch.softmax(scores.reshape(tokens, -1), dim=1).reshape(tokens, ah, aw)

        noise_pred = self.config.noise_scale * latent
        return noise_pred, {"toy": attention.unsqueeze(0)}  # one head

    def advance(self, latent: Tensor, noise_pred: Tensor, timestep_index: int) -> Tensor:
        return latent - self.config.advance_rate * noise_pred


def build_toy(config: ToyConfig | None = None) -> ToyDenoiser:
    """Adapter over the toy backend; deterministic given ``config.seed``."""
    return ToyDenoiser(config or ToyConfig())


def finite_difference_grad(
    scalar_fn: Callable[[Tensor], float | Tensor],
    latent: Tensor,
    h: float = 1e-3,
) -> Tensor:
    """Central-difference gradient estimate, one coordinate at a time.

    The independent oracle for every analytic-gradient check in the suite:
    (f(x + h e) - f(x - h e)) / (2h) per coordinate, no autograd involved.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    base = latent.detach().clone().to(torch.float64)
    grad = torch.zeros_like(base)
    flat = base.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        f_plus = float(scalar_fn(base))
        flat[i] = orig - h
        f_minus = float(scalar_fn(base))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError(f"non-finite evaluation at coordinate {i}")
        grad_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Planted scenarios
# ---------------------------------------------------------------------------

_SCENARIO_PROMPT = "a pink dress beside white lilies"
_SCENARIO_WORDS = ("pink", "dress", "white", "lilies")
_SCENARIO_FILLERS = ("a", "beside")
_CENTER_A = (1.5, 1.5)
_CENTER_B = (5.5, 5.5)
_DEFAULT_BLOB_WIDTH = 1.5
_DEFAULT_BLOB_AMPLITUDE = 0.25
# Saturation flattens the blob top so the rescaled attention is near-binary:
# a plain Gaussian profile has a soft-Jaccard of ~1/3 even against itself.
_BLOB_SATURATION = 3.0
# The scenario pins its own score gain: blob amplitude is sized to what 25
# default adaptive-moment updates can move (~learning_rate per coordinate per
# step), and the gain restores plateau sharpness amplitude*gain ~ 8.
_SCENARIO_GAIN = 32.0
_SCENARIO_INIT_NOISE = 0.0005


@dataclass(frozen=True)
class PlantedScenario:
    """A toy setup with known ground-truth attention blob locations.

    ``separated`` plants each positive pair on a shared center and the
    negative pairs apart (correct binding); ``overlapping`` swaps the object
    centers so negative pairs share a center (the spurious-association
    failure mode guidance is meant to fix). The initial latent realizes the
    planted blobs exactly; ``config`` is the matching toy configuration.
    """

    prompt: str
    pairs: AttributePairSet
    planted_centers: Mapping[str, tuple[float, float]]
    blob_width: float
    blob_amplitude: float
    config: ToyConfig

    @property
    def initial_latent(self) -> Tensor:
        assert self.config.base_latent is not None
        return self.config.base_latent


def _gaussian_blob(
    shape: tuple[int, int],
    center: tuple[float, float],
    width: float,
    saturation: float = _BLOB_SATURATION,
) -> Tensor:
    rows = torch.arange(shape[0], dtype=torch.float64).reshape(-1, 1)
    cols = torch.arange(shape[1], dtype=torch.float64).reshape(1, -1)
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    return torch.clamp(saturation * torch.exp(-d2 / (2.0 * width * width)), max=1.0)


def make_planted_scenario(
    config: ToyConfig,
    separation: str,
    blob_width: float = _DEFAULT_BLOB_WIDTH,
    blob_amplitude: float = _DEFAULT_BLOB_AMPLITUDE,
) -> PlantedScenario:
    """Build a scenario with blobs planted at known centers.

    The returned scenario's config replaces the vocabulary with the scenario
    words on one-hot embedding channels (fillers and sentinels get zero
    embeddings), so each word's attention map is controlled by exactly one
    latent channel and the planted construction is analytic.
    """
    if separation not in ("overlapping", "separated"):
        raise ValueError(f"separation must be 'overlapping' or 'separated', got {separation!r}")
    _, h, w = config.latent_shape
    channels = len(_SCENARIO_WORDS)

    if separation == "separated":
        centers = {"pink": _CENTER_A, "dress": _CENTER_A, "white": _CENTER_B, "lilies": _CENTER_B}
    else:
        centers = {"pink": _CENTER_A, "lilies": _CENTER_A, "white": _CENTER_B, "dress": _CENTER_B}

    base = torch.zeros((channels, h, w), dtype=torch.float64)
    for k, word in enumerate(_SCENARIO_WORDS):
        base[k] = blob_amplitude * _gaussian_blob((h, w), centers[word], blob_width)

    vocab = _SCENARIO_FILLERS[:1] + _SCENARIO_WORDS[:2] + _SCENARIO_FILLERS[1:] + _SCENARIO_WORDS[2:]
    embeddings = []
    for word in vocab:
        if word in _SCENARIO_WORDS:
            one_hot = [0.0] * channels
            one_hot[_SCENARIO_WORDS.index(word)] = 1.0
            embeddings.append(tuple(one_hot))
        else:
            embeddings.append(tuple([0.0] * channels))

    scenario_config = replace(
        config,
        latent_shape=(channels, h, w),
        vocab=vocab,
        embeddings=tuple(embeddings),
        attention_resolution=(h, w),
        score_gain=_SCENARIO_GAIN,
        base_latent=base,
        init_noise=_SCENARIO_INIT_NOISE,
    )
    pairs = AttributePairSet(
        positive=(("pink", "dress"), ("white", "lilies")),
        negative=(("pink", "lilies"), ("white", "dress")),
    )
    return PlantedScenario(
        prompt=_SCENARIO_PROMPT,
        pairs=pairs,
        planted_centers=dict(centers),
        blob_width=blob_width,
        blob_amplitude=blob_amplitude,
        config=scenario_config,
    )
