"""
Evaluation for the TAGS toolkit
tIoU, average precision, mAP reports, false-positive profiles and
embedding similarity dumps
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ValidationError
from core.theme import N01DTheme
from modules.data_io import AnnotationSet, Prediction, VideoAnnotation, write_matrix

logger = logging.getLogger(f"tags.{__name__}")

Interval = Tuple[float, float]
PredictionInput = Union[Mapping[str, Sequence[Prediction]], Iterable[Prediction]]

# Minimum overlap for a miss to count as a localization error rather than background
LOCALIZATION_FLOOR = 0.1
FP_CATEGORIES = ("tp", "localization", "background")


def tiou(a: Interval, b: Interval) -> float:
    """|a ∩ b| / |a ∪ b| for intervals (start, end); 0 when disjoint"""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def to_predictions(candidates: Iterable, classes: Sequence[str]) -> List[Prediction]:
    """Inference candidates (class index) as named-class predictions"""
    return [Prediction(c.video_id, classes[c.label], float(c.score), float(c.start_s), float(c.end_s))
            for c in candidates]


def _flatten(predictions: PredictionInput) -> List[Prediction]:
    if isinstance(predictions, Mapping):
        return [p for preds in predictions.values() for p in preds]
    return list(predictions)


def _ranked(predictions: Iterable[Prediction]) -> List[Prediction]:
    """Score descending; ties by (video_id, start_s)"""
    return sorted(predictions, key=lambda p: (-p.score, p.video_id, p.start_s))


def match_predictions(predictions: Sequence[Prediction], videos: Mapping[str, VideoAnnotation],
                      threshold: float) -> List[bool]:
    """Greedy TP flags for already ranked predictions

    Each prediction takes the unmatched same-class instance of its video with
    the highest tIoU >= threshold.
    """
    used: Dict[Tuple[str, int], bool] = {}
    flags = []
    for pred in predictions:
        ann = videos.get(pred.video_id)
        best, best_idx = -1.0, -1
        if ann is not None:
            for idx, inst in enumerate(ann.instances):
                if inst.label != pred.label or used.get((pred.video_id, idx)):
                    continue
                overlap = tiou((pred.start_s, pred.end_s), (inst.start_s, inst.end_s))
                if overlap >= threshold and overlap > best:
                    best, best_idx = overlap, idx
        if best_idx >= 0:
            used[(pred.video_id, best_idx)] = True
        flags.append(best_idx >= 0)
    return flags


def average_precision(predictions: PredictionInput, videos: Mapping[str, VideoAnnotation],
                      threshold: float, label: str) -> float:
    """AP of one class: precision at each TP rank weighted by its recall step

    NaN when the class has no ground truth in these videos.
    """
    n_gt = sum(1 for ann in videos.values() for inst in ann.instances if inst.label == label)
    if n_gt == 0:
        return math.nan
    ranked = _ranked(p for p in _flatten(predictions) if p.label == label and p.video_id in videos)
    flags = match_predictions(ranked, videos, threshold)
    ap, tp = 0.0, 0
    for rank, hit in enumerate(flags, start=1):
        if hit:
            tp += 1
            ap += (tp / rank) / n_gt
    return ap


@dataclass
class FPProfile:
    """Per budget n (top n*G_v predictions per video): counts of TP / localization / background"""
    tiou_threshold: float
    counts: Dict[int, Dict[str, int]] = field(default_factory=dict)

    def fractions(self, budget: int) -> Dict[str, float]:
        row = self.counts[budget]
        total = sum(row.values())
        if total == 0:
            return {k: 0.0 for k in FP_CATEGORIES}
        return {k: row[k] / total for k in FP_CATEGORIES}

    def to_dict(self) -> dict:
        return {
            "tiou": self.tiou_threshold,
            "budgets": {f"{n}G": {"counts": self.counts[n], "fractions": self.fractions(n)}
                        for n in sorted(self.counts)},
        }


def fp_profile(predictions: PredictionInput, annotations: AnnotationSet, threshold: float = 0.5,
               budgets: int = 10, subset: Optional[str] = None) -> FPProfile:
    """Split each video's top n*G_v predictions into TP, localization and background errors"""
    videos = annotations.subset(subset)
    if sum(len(a.instances) for a in videos.values()) == 0:
        raise ValidationError("false-positive profile needs at least one ground-truth instance")
    by_video: Dict[str, List[Prediction]] = {}
    for p in _flatten(predictions):
        if p.video_id in videos:
            by_video.setdefault(p.video_id, []).append(p)

    labelled: List[Tuple[str, int, Prediction]] = []
    for vid, ann in videos.items():
        g = len(ann.instances)
        if g == 0:
            continue
        top = sorted(by_video.get(vid, []), key=lambda p: (-p.score, p.start_s))[:budgets * g]
        for rank, p in enumerate(top):
            labelled.append((vid, rank, p))

    ranked = sorted(labelled, key=lambda item: (-item[2].score, item[0], item[2].start_s))
    flags = match_predictions([p for _, _, p in ranked], videos, threshold)
    category: Dict[Tuple[str, int], str] = {}
    for (vid, rank, p), hit in zip(ranked, flags):
        if hit:
            category[(vid, rank)] = "tp"
            continue
        best = max((tiou((p.start_s, p.end_s), (i.start_s, i.end_s)) for i in videos[vid].instances),
                   default=0.0)
        category[(vid, rank)] = "localization" if best >= LOCALIZATION_FLOOR else "background"

    profile = FPProfile(threshold)
    for n in range(1, budgets + 1):
        row = dict.fromkeys(FP_CATEGORIES, 0)
        for (vid, rank), cat in category.items():
            if rank < n * len(videos[vid].instances):
                row[cat] += 1
        profile.counts[n] = row
    return profile


@dataclass
class EvalReport:
    """mAP per tIoU, average mAP, per-class AP and an optional FP profile"""
    tious: Tuple[float, ...]
    map_by_tiou: Dict[float, float]
    average_map: float
    per_class: Dict[str, List[Optional[float]]]
    fp: Optional[FPProfile] = None

    def to_dict(self) -> dict:
        out = {
            "tious": list(self.tious),
            "mAP": {f"{t:g}": v for t, v in self.map_by_tiou.items()},
            "average_mAP": self.average_map,
            "per_class_AP": self.per_class,
        }
        if self.fp is not None:
            out["fp_profile"] = self.fp.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    def write_csv(self, directory) -> List[Path]:
        """map.csv, per_class.csv and (when profiled) fp_profile.csv"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = [directory / "map.csv", directory / "per_class.csv"]
        with open(written[0], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tiou", "mAP"])
            for t, v in self.map_by_tiou.items():
                writer.writerow([f"{t:g}", v])
            writer.writerow(["average", self.average_map])
        with open(written[1], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class"] + [f"AP@{t:g}" for t in self.tious])
            for name, aps in self.per_class.items():
                writer.writerow([name] + ["" if a is None else a for a in aps])
        if self.fp is not None:
            path = directory / "fp_profile.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["budget"] + list(FP_CATEGORIES))
                for n in sorted(self.fp.counts):
                    fr = self.fp.fractions(n)
                    writer.writerow([f"{n}G"] + [fr[k] for k in FP_CATEGORIES])
            written.append(path)
        return written


def map_report(predictions: PredictionInput, annotations: AnnotationSet, tious: Sequence[float],
               subset: Optional[str] = None, fp_tiou: Optional[float] = None,
               fp_budgets: int = 10) -> EvalReport:
    """mAP over classes with ground truth, for every tIoU of the grid"""
    tious = tuple(float(t) for t in tious)
    if not tious:
        raise ValidationError("tIoU grid is empty")
    videos = annotations.subset(subset)
    preds = _flatten(predictions)
    stray = sum(1 for p in preds if p.video_id not in videos)
    if stray:
        logger.warning("%d predictions refer to videos outside the evaluated set", stray)
    unknown = {p.label for p in preds} - set(annotations.classes)
    if unknown:
        logger.warning("predictions use unknown classes: %s", sorted(unknown))

    per_class: Dict[str, List[Optional[float]]] = {}
    for name in annotations.classes:
        aps = [average_precision(preds, videos, t, name) for t in tious]
        per_class[name] = [None if math.isnan(a) else a for a in aps]
    scored = [name for name, aps in per_class.items() if aps[0] is not None]
    if not scored:
        raise ValidationError("no class has ground truth in the evaluated videos")
    map_by_tiou = {t: float(np.mean([per_class[n][i] for n in scored])) for i, t in enumerate(tious)}
    report = EvalReport(tious, map_by_tiou, float(np.mean(list(map_by_tiou.values()))), per_class)
    if fp_tiou is not None:
        report.fp = fp_profile(preds, annotations, fp_tiou, fp_budgets, subset)
    return report


def cosine_similarity_matrix(embedding: np.ndarray) -> np.ndarray:
    """T x T cosine similarities; zero rows give zero entries"""
    E = np.asarray(embedding, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1)
    unit = E / np.where(norms > 0, norms, 1.0)[:, None]
    sim = unit @ unit.T
    return (sim + sim.T) / 2.0


def similarity_dump(embedding: np.ndarray, path, theme: Optional[N01DTheme] = None) -> np.ndarray:
    """Write the similarity matrix as TAGF (and a heatmap PNG when a theme is given)"""
    sim = cosine_similarity_matrix(embedding)
    path = Path(path)
    write_matrix(sim.astype(np.float32), path)
    if theme is not None:
        theme.render_heatmap(sim, path.with_suffix(".png"), signed=True)
    return sim
