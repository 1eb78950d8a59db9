"""
Inference for the TAGS toolkit

Every confident snippet's global mask is thresholded at several levels; the
foreground run through the snippet becomes a candidate scored by class
probability times mean mask value. Scales are merged and duplicates decayed
with Gaussian SoftNMS.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from core.config import InferenceConfig, RunConfig
from core.errors import ValidationError
from core.theme import N01DTheme
from modules.data_io import VideoSample
from modules.heads import ScaleOutputs, dump_scale_outputs
from modules.labels import ScaleTargets, assign_all_scales
from modules.model import DTYPE, TagsModel

logger = logging.getLogger(f"tags.{__name__}")

ORACLES = ("class", "mask")


@dataclass(frozen=True)
class Candidate:
    """One detection: interval in seconds, class index, score and provenance"""
    video_id: str
    label: int
    start_s: float
    end_s: float
    score: float
    scale: int = 1
    snippet: int = 0
    threshold: float = 0.5


def _runs_through(column: np.ndarray, t: int, thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(valid, a, b): the run of column >= theta containing t, per threshold"""
    z = column[None, :] >= thresholds[:, None]
    length = column.shape[0]
    valid = z[:, t]
    left_off = ~z[:, :t + 1]
    has_left = left_off.any(axis=1)
    a = np.where(has_left, t - np.argmax(left_off[:, ::-1], axis=1) + 1, 0)
    right_off = ~z[:, t:]
    has_right = right_off.any(axis=1)
    b = np.where(has_right, t + np.argmax(right_off, axis=1) - 1, length - 1)
    return valid, a, b


def decode_candidates(P: np.ndarray, M: np.ndarray, scale: int, thresholds: Sequence[float],
                      theta_c: float, duration_s: float, T: int, video_id: str = "") -> List[Candidate]:
    """Candidates of one scale, in snippet-then-threshold order

    A run already produced by a lower threshold of the same snippet is not
    emitted again.
    """
    P = np.asarray(P, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    K = P.shape[0] - 1
    span = scale * duration_s / T
    th = np.asarray(thresholds, dtype=np.float64)
    fg = P[:K]
    best = fg.max(axis=0)
    labels = fg.argmax(axis=0)
    out: List[Candidate] = []
    for t in np.flatnonzero(best >= theta_c):
        column = M[:, t]
        valid, a, b = _runs_through(column, int(t), th)
        means: Dict[Tuple[int, int], float] = {}
        for j in np.flatnonzero(valid):
            run = (int(a[j]), int(b[j]))
            if run in means:
                continue
            means[run] = float(column[run[0]:run[1] + 1].mean())
            score = float(best[t]) * means[run]
            if score <= 0.0:
                continue
            start = run[0] * span
            end = min((run[1] + 1) * span, duration_s)
            out.append(Candidate(video_id, int(labels[t]), start, end, score, scale, int(t), float(th[j])))
    return out


def decode_actionness(P: np.ndarray, a: np.ndarray, scale: int, thresholds: Sequence[float],
                      theta_c: float, duration_s: float, T: int, video_id: str = "") -> List[Candidate]:
    """Candidates from one actionness sequence a, one per distinct run

    A run of a >= theta takes the class with the highest mean probability
    over the run; it is kept when that mean reaches theta_c and scores
    mean class probability x mean actionness.
    """
    P = np.asarray(P, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    K = P.shape[0] - 1
    span = scale * duration_s / T
    seen = set()
    out: List[Candidate] = []
    for theta in thresholds:
        z = (a >= theta).astype(np.int8)
        edges = np.flatnonzero(np.diff(np.concatenate([[0], z, [0]])))
        for start, stop in zip(edges[::2], edges[1::2]):
            run = (int(start), int(stop) - 1)
            if run in seen:
                continue
            seen.add(run)
            probs = P[:K, run[0]:run[1] + 1].mean(axis=1)
            label = int(np.argmax(probs))
            if probs[label] < theta_c:
                continue
            score = float(probs[label]) * float(a[run[0]:run[1] + 1].mean())
            end = min((run[1] + 1) * span, duration_s)
            out.append(Candidate(video_id, label, run[0] * span, end, score, scale, run[0], float(theta)))
    return out


def _pairwise_tiou(start: float, end: float, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    inter = np.clip(np.minimum(end, ends) - np.maximum(start, starts), 0.0, None)
    union = (end - start) + (ends - starts) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def soft_nms(candidates: Sequence[Candidate], sigma: float = 0.5, score_floor: float = 1e-4,
             max_keep: int = 100, per_class: bool = False) -> List[Candidate]:
    """Gaussian SoftNMS: keep the best, decay the rest by exp(-tIoU^2 / sigma)"""
    if per_class:
        kept: List[Candidate] = []
        for label in sorted({c.label for c in candidates}):
            kept.extend(soft_nms([c for c in candidates if c.label == label], sigma, score_floor, max_keep))
        return sorted(kept, key=lambda c: -c.score)[:max_keep]

    pool = list(candidates)
    if not pool:
        return []
    starts = np.array([c.start_s for c in pool])
    ends = np.array([c.end_s for c in pool])
    scores = np.array([c.score for c in pool])
    alive = scores >= score_floor
    kept = []
    while alive.any() and len(kept) < max_keep:
        idx = int(np.argmax(np.where(alive, scores, -np.inf)))
        kept.append(replace(pool[idx], score=float(scores[idx])))
        alive[idx] = False
        rest = np.flatnonzero(alive)
        if rest.size == 0:
            break
        overlap = _pairwise_tiou(starts[idx], ends[idx], starts[rest], ends[rest])
        scores[rest] = scores[rest] * np.exp(-(overlap ** 2) / sigma)
        alive[rest[scores[rest] < score_floor]] = False
    return kept


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def substitute_oracle(P: np.ndarray, M: np.ndarray, targets: ScaleTargets, oracle: str):
    """Replace one branch output with its ground truth"""
    if oracle == "class":
        P = np.zeros_like(P)
        P[targets.y, np.arange(P.shape[1])] = 1.0
    elif oracle == "mask":
        M = targets.G.astype(np.float64)
    else:
        raise ValidationError(f"unknown oracle '{oracle}', choose from {ORACLES}")
    return P, M


def detect(outputs: Sequence[ScaleOutputs], video_id: str, duration_s: float, T: int,
           thresholds: Sequence[float], config: Optional[InferenceConfig] = None,
           oracle: Optional[str] = None,
           targets: Optional[Mapping[int, ScaleTargets]] = None,
           actionness: bool = False) -> List[Candidate]:
    """Union of every scale's candidates, then SoftNMS

    With actionness=True each M is read as one sequence repeated in every
    column and decoded by decode_actionness.
    """
    config = config or InferenceConfig()
    if oracle is not None and targets is None:
        raise ValidationError(f"oracle '{oracle}' needs ground-truth targets")
    pool: List[Candidate] = []
    for out in outputs:
        P, M = _as_numpy(out.P), _as_numpy(out.M)
        if oracle is not None:
            P, M = substitute_oracle(P, M, targets[out.scale], oracle)
        if actionness:
            a = M.max(axis=1) if M.size else np.zeros(M.shape[0])
            pool.extend(decode_actionness(P, a, out.scale, thresholds, config.theta_c, duration_s, T, video_id))
        else:
            pool.extend(decode_candidates(P, M, out.scale, thresholds, config.theta_c, duration_s, T, video_id))
    logger.debug("%s: %d raw candidates", video_id, len(pool))
    return soft_nms(pool, config.sigma, config.score_floor, config.max_keep, config.per_class)


def infer_video(model: TagsModel, sample: VideoSample, config: RunConfig, classes: Sequence[str],
                oracle: Optional[str] = None, dump_dir: Optional[Path] = None,
                theme: Optional[N01DTheme] = None) -> List[Candidate]:
    seq = sample.features
    with torch.no_grad():
        outputs = model(torch.as_tensor(seq.values, dtype=DTYPE))
    targets = None
    if oracle is not None:
        targets = assign_all_scales(sample.annotation, seq.T, model.scales, classes, model.mask_design)
    if dump_dir is not None:
        dump_scale_outputs(outputs, dump_dir, seq.video_id, theme)
    return detect(outputs, seq.video_id, seq.duration_s, seq.T, config.decode_thresholds,
                  config.inference, oracle, targets, model.actionness)


def run_inference(model: TagsModel, samples: Sequence[VideoSample], config: RunConfig,
                  classes: Sequence[str], oracle: Optional[str] = None, dump_dir: Optional[Path] = None,
                  theme: Optional[N01DTheme] = None, workers: int = 1) -> List[Candidate]:
    """Detections for every video; videos are independent and keep their input order"""
    if oracle is not None and oracle not in ORACLES:
        raise ValidationError(f"unknown oracle '{oracle}', choose from {ORACLES}")

    def one(sample):
        return infer_video(model, sample, config, classes, oracle, dump_dir, theme)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_video = list(pool.map(one, samples))
    else:
        per_video = [one(s) for s in samples]
    return [c for video in per_video for c in video]
