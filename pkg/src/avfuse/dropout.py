"""Modality dropout: training-time masking and test-time corruption.

Three training variants are supported, applied per sample on the raw input
feature sequences (before the branches):

* hard: the selected modality is replaced with zeros, the other is kept
  bitwise intact;
* soft: audio is scaled by alpha and vision by 1 - alpha, with alpha drawn
  uniformly from [0, 1] and a fair coin deciding which side gets alpha;
* noise: the selected modality is replaced by i.i.d. standard gaussian
  values of the same shape.

A `DropoutPolicy` holds the batch-composition probabilities: every sample
independently stays complete, drops audio, drops vision, or gets the soft
scaling. Under the noise variant the two drop slots corrupt with noise
instead of zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Sample
from .rng import Rng

VARIANTS = ("none", "hard", "soft", "noise")
TEST_SETTINGS = ("AV", "A", "V", "NA", "NV")


@dataclass
class DropoutPolicy:
    """Which dropout variant trains the model, and with what batch mix."""

    variant: str = "none"
    p_full: float = 1.0
    p_drop_audio: float = 0.0
    p_drop_vision: float = 0.0
    p_soft: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"dropout variant must be one of {VARIANTS}, got {self.variant!r}")
        probs = self.probs
        if any(p < 0 for p in probs):
            raise ValueError(f"dropout probabilities must be non-negative, got {probs}")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError(f"dropout probabilities must sum to 1, got {sum(probs)!r}")

    @property
    def probs(self) -> tuple[float, float, float, float]:
        return (self.p_full, self.p_drop_audio, self.p_drop_vision, self.p_soft)


@dataclass(frozen=True)
class SampleMode:
    """Resolved per-sample transform: AV, AOnly, VOnly, Soft(alpha), NoiseA, NoiseV."""

    kind: str
    alpha: float | None = None


def assign_modes(n: int, policy: DropoutPolicy, rng: Rng) -> list[SampleMode]:
    """Independent categorical draw per sample; deterministic under the rng."""
    if policy.variant == "none":
        return [SampleMode("AV")] * n
    modes = []
    for i in range(n):
        srng = rng.split("mode", i)
        slot = srng.categorical(policy.probs)
        if slot == 0:
            modes.append(SampleMode("AV"))
        elif slot == 1:
            modes.append(SampleMode("NoiseA" if policy.variant == "noise" else "VOnly"))
        elif slot == 2:
            modes.append(SampleMode("NoiseV" if policy.variant == "noise" else "AOnly"))
        else:
            alpha = srng.uniform()
            if srng.uniform() < 0.5:
                alpha = 1.0 - alpha
            modes.append(SampleMode("Soft", alpha=alpha))
    return modes


def apply_hard_dropout(sample: Sample, which: str) -> Sample:
    """Zero the selected modality; the other stays the same array."""
    if which == "audio":
        return replace(sample, audio=np.zeros_like(sample.audio))
    if which == "vision":
        return replace(sample, vision=np.zeros_like(sample.vision))
    raise ValueError(f"which must be 'audio' or 'vision', got {which!r}")


def apply_soft_dropout(sample: Sample, alpha: float) -> Sample:
    """Scale audio by alpha and vision by 1 - alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"soft-dropout alpha must lie in [0, 1], got {alpha}")
    return replace(sample, audio=alpha * sample.audio, vision=(1.0 - alpha) * sample.vision)


def apply_noise_dropout(sample: Sample, which: str, rng: Rng) -> Sample:
    """Replace the selected modality with standard gaussian values."""
    if which == "audio":
        return replace(sample, audio=rng.gaussian(sample.audio.shape))
    if which == "vision":
        return replace(sample, vision=rng.gaussian(sample.vision.shape))
    raise ValueError(f"which must be 'audio' or 'vision', got {which!r}")


def apply_mode(sample: Sample, mode: SampleMode, rng: Rng) -> Sample:
    if mode.kind == "AV":
        return sample
    if mode.kind == "VOnly":
        return apply_hard_dropout(sample, "audio")
    if mode.kind == "AOnly":
        return apply_hard_dropout(sample, "vision")
    if mode.kind == "Soft":
        return apply_soft_dropout(sample, mode.alpha)
    if mode.kind == "NoiseA":
        return apply_noise_dropout(sample, "audio", rng)
    if mode.kind == "NoiseV":
        return apply_noise_dropout(sample, "vision", rng)
    raise ValueError(f"unknown sample mode {mode.kind!r}")


def apply_test_setting(sample: Sample, setting: str, rng: Rng | None = None) -> Sample:
    """Evaluation-time corruption: A keeps audio only, V keeps vision only,
    NA/NV replace audio/vision with gaussian noise, AV is the identity."""
    if setting == "AV":
        return sample
    if setting == "A":
        return apply_hard_dropout(sample, "vision")
    if setting == "V":
        return apply_hard_dropout(sample, "audio")
    if setting in ("NA", "NV"):
        if rng is None:
            raise ValueError(f"setting {setting} needs an rng for the noise draw")
        return apply_noise_dropout(sample, "audio" if setting == "NA" else "vision", rng)
    raise ValueError(f"unknown test setting {setting!r}; expected one of {TEST_SETTINGS}")
