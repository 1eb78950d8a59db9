"""
Synthetic TAD datasets with planted action instances
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from core.errors import ValidationError
from modules.data_io import AnnotationSet, FeatureSequence, Instance, VideoAnnotation

logger = logging.getLogger(f"tags.{__name__}")


class InfeasibleSpecError(ValidationError):
    """Requested instances cannot fit into T snippets"""


@dataclass
class SyntheticSpec:
    """Parameters of a generated dataset"""
    num_videos: int = 20
    K: int = 3
    T: int = 64
    dim: int = 16
    noise_sigma: float = 0.1
    min_len: int = 4
    max_len: int = 16
    max_instances: int = 3
    min_gap: int = 2
    seed: int = 7
    val_videos: int = 0
    snippet_s: float = 1.0

    def validate(self):
        for name in ("num_videos", "K", "T", "dim", "max_instances", "min_gap"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.min_len <= self.max_len < self.T:
            raise ValidationError(
                f"need 0 < min_len <= max_len < T, got {self.min_len}, {self.max_len}, {self.T}"
            )
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.val_videos < 0:
            raise ValidationError(f"val_videos must be >= 0, got {self.val_videos}")
        if not self.snippet_s > 0:
            raise ValidationError(f"snippet_s must be positive, got {self.snippet_s}")
        worst = self.max_instances * self.max_len + (self.max_instances - 1) * self.min_gap
        if worst > self.T:
            raise InfeasibleSpecError(
                f"{self.max_instances} instances of up to {self.max_len} snippets with gaps of "
                f"{self.min_gap} need {worst} snippets, but T = {self.T}"
            )

    @property
    def class_names(self) -> List[str]:
        return [f"action_{k}" for k in range(self.K)]


def _unit_vectors(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Uniform draws on the unit sphere"""
    v = rng.standard_normal((n, dim))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(norms > 0, norms, 1.0)


def _plant_instances(rng: np.random.Generator, spec: SyntheticSpec) -> List[Tuple[int, int, int]]:
    """Non-overlapping (first, last, class) snippet runs separated by >= min_gap"""
    n = int(rng.integers(1, spec.max_instances + 1))
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    slack = spec.T - int(lengths.sum()) - (n - 1) * spec.min_gap
    # Distribute the slack over the n + 1 gaps (before, between, after)
    cuts = np.sort(rng.integers(0, slack + 1, size=n))
    extra = np.diff(np.concatenate([[0], cuts]))
    labels = rng.integers(0, spec.K, size=n)
    runs = []
    pos = 0
    for i in range(n):
        pos += int(extra[i]) + (spec.min_gap if i > 0 else 0)
        first = pos
        last = pos + int(lengths[i]) - 1
        runs.append((first, last, int(labels[i])))
        pos = last + 1
    return runs


def generate_synthetic(spec: SyntheticSpec) -> Tuple[List[FeatureSequence], AnnotationSet]:
    """Deterministic features + annotations; a pure function of the spec"""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    prototypes = _unit_vectors(rng, spec.K + 1, spec.dim)
    background = prototypes[spec.K]
    classes = spec.class_names

    sequences: List[FeatureSequence] = []
    videos = {}
    total = spec.num_videos + spec.val_videos
    width = len(str(total - 1))
    for v in range(total):
        video_id = f"video_{v:0{width}d}"
        runs = _plant_instances(rng, spec)
        values = np.tile(background, (spec.T, 1))
        for first, last, label in runs:
            values[first:last + 1] = prototypes[label]
        if spec.noise_sigma > 0:
            values = values + rng.normal(0.0, spec.noise_sigma, size=values.shape)
        duration = spec.T * spec.snippet_s
        sequences.append(FeatureSequence(video_id, values, duration))
        instances = [Instance(first * spec.snippet_s, (last + 1) * spec.snippet_s, classes[label])
                     for first, last, label in runs]
        subset = "train" if v < spec.num_videos else "val"
        videos[video_id] = VideoAnnotation(duration, subset, instances)

    annotations = AnnotationSet(list(classes), videos)
    annotations.validate()
    logger.debug("generated %d videos with %d instances", total, annotations.ground_truth_count())
    return sequences, annotations


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """The (K + 1) x dim prototypes of a spec, background last"""
    rng = np.random.default_rng(spec.seed)
    return _unit_vectors(rng, spec.K + 1, spec.dim)
