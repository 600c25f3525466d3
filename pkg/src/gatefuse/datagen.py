"""Synthetic layer-stack generation with a planted, layer-localized signal.

Spoof utterances get a fixed cosine pattern added to a chosen subset of
layers; bona fide utterances are pure seeded Gaussian noise.  Every draw
is keyed by (seed, utterance index, view, layer), so corpora regenerate
bit-identically regardless of generation order.  Values are quantized to
float32 at creation so feature files round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for
from .stacks import LayerStack

DEFAULT_ARTIFACT_LAYERS = (5, 6, 7, 8)


@dataclass(frozen=True)
class SynthSpec:
    """Corpus recipe; layer indices are 0-based."""

    n_layers: int = 12
    n_frames: int = 200
    dim: int = 32
    artifact_layers: tuple[int, ...] = DEFAULT_ARTIFACT_LAYERS
    artifact_gain: float = 1.0
    class_separation: float = 1.0
    jitter_scale: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_layers < 2 or self.n_frames < 1 or self.dim < 1:
            raise ValueError("dims must be positive (and n_layers >= 2)")
        if self.artifact_gain < 0 or self.class_separation < 0:
            raise ValueError("gains must be >= 0")
        if self.jitter_scale < 0:
            raise ValueError("jitter_scale must be >= 0")
        bad = [l for l in self.artifact_layers
               if not 0 <= l < self.n_layers]
        if bad:
            raise ValueError(f"artifact layers out of [0, {self.n_layers - 1}]: "
                             f"{bad}")


def artifact_pattern(spec: SynthSpec) -> np.ndarray:
    """The deterministic per-frame pattern planted on artifact layers:
    a unit cosine profile across feature dims, constant over frames."""
    d = np.arange(spec.dim)
    return np.tile(np.cos(2.0 * np.pi * d / spec.dim), (spec.n_frames, 1))


def synth_utterance(spec: SynthSpec, utt_index: int, label: int,
                    utt_id: str | None = None, dataset_id: str = "synth",
                    ) -> tuple[LayerStack, LayerStack]:
    """Generate one utterance's (clean, augmented) stack pair.

    The augmented view is the clean view plus seeded Gaussian jitter of
    scale ``spec.jitter_scale``; with zero jitter the two are bitwise
    equal.  Fully reproducible from (spec.seed, utt_index).
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    if utt_id is None:
        utt_id = f"{dataset_id}-{utt_index:06d}"
    scale = spec.artifact_gain * spec.class_separation
    pattern = artifact_pattern(spec) if (label == 1 and scale != 0.0) else None

    clean = np.empty((spec.n_layers, spec.n_frames, spec.dim))
    aug = np.empty_like(clean)
    for layer in range(spec.n_layers):
        base = rng_for(spec.seed, utt_index, 0, layer).standard_normal(
            (spec.n_frames, spec.dim))
        if pattern is not None and layer in spec.artifact_layers:
            base = base + scale * pattern
        clean[layer] = base
        if spec.jitter_scale != 0.0:
            jitter = rng_for(spec.seed, utt_index, 1, layer).standard_normal(
                (spec.n_frames, spec.dim))
            aug[layer] = base + spec.jitter_scale * jitter
        else:
            aug[layer] = base

    # quantize to storage precision so write -> read is bit-exact
    clean = clean.astype(np.float32).astype(np.float64)
    aug = aug.astype(np.float32).astype(np.float64)
    return (
        LayerStack(utt_id=utt_id, dataset_id=dataset_id, label=label,
                   view_id=0, features=clean),
        LayerStack(utt_id=utt_id, dataset_id=dataset_id, label=label,
                   view_id=1, features=aug),
    )


def split_labels(n: int, spoof_fraction: float = 0.5) -> list[int]:
    """Deterministic, evenly interleaved label sequence with
    round(n * spoof_fraction) spoof entries."""
    if not 0.0 <= spoof_fraction <= 1.0:
        raise ValueError("spoof_fraction must be in [0, 1]")
    n_spoof = round(n * spoof_fraction)
    return [((i + 1) * n_spoof) // n - (i * n_spoof) // n for i in range(n)]
