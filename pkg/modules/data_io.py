"""
Data I/O for the TAGS toolkit
Binary snippet-feature files, ActivityNet-style annotation and prediction JSON
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ValidationError
from core.file_browser import FileBrowser

logger = logging.getLogger(f"tags.{__name__}")

PathLike = Union[str, Path]

FEATURE_MAGIC = b"TAGF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
SUBSETS = ("train", "val", "test")


class FeatureFormatError(ValidationError):
    """Feature file could not be decoded"""


class BadMagicError(FeatureFormatError):
    """File does not start with the TAGF magic"""


class VersionMismatchError(FeatureFormatError):
    """Unsupported feature file version"""


class TruncatedPayloadError(FeatureFormatError):
    """Header promises more values than the file holds"""


class NonFiniteValuesError(FeatureFormatError):
    """NaN or infinity in a feature matrix"""


class AnnotationFormatError(ValidationError):
    """Annotation or prediction JSON is missing a required field"""

    def __init__(self, field_name: str, where: str = ""):
        location = f" in {where}" if where else ""
        super().__init__(f"missing required field '{field_name}'{location}")
        self.field = field_name


class AnnotationValueError(ValidationError):
    """Annotation violates a dataset invariant"""


@dataclass
class FeatureSequence:
    """Snippet features of one video, T rows by dim columns"""
    video_id: str
    values: np.ndarray
    duration_s: float

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"{self.video_id}: feature matrix must be T x dim, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteValuesError(f"{self.video_id}: non-finite feature values")
        if not self.duration_s > 0:
            raise ValidationError(f"{self.video_id}: duration must be positive, got {self.duration_s}")
        self.values = values.astype(np.float32, copy=False)
        self.duration_s = float(self.duration_s)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def snippet_s(self) -> float:
        """Seconds covered by one snippet"""
        return self.duration_s / self.T

    def snippet_interval(self, i: int) -> Tuple[float, float]:
        """Time interval [start, end) of snippet i"""
        return i * self.snippet_s, (i + 1) * self.snippet_s


@dataclass(frozen=True)
class Instance:
    """One annotated action instance"""
    start_s: float
    end_s: float
    label: str


@dataclass
class VideoAnnotation:
    """Duration, subset and action instances of one video"""
    duration_s: float
    subset: str = "train"
    instances: List[Instance] = field(default_factory=list)


@dataclass
class AnnotationSet:
    """Dataset-level class vocabulary plus per-video annotations"""
    classes: List[str]
    videos: Dict[str, VideoAnnotation] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.classes)

    def class_index(self, label: str) -> int:
        return self.classes.index(label)

    def subset(self, name: Optional[str]) -> Dict[str, VideoAnnotation]:
        """Videos of one subset (all videos when name is None)"""
        if name is None:
            return dict(self.videos)
        return {vid: ann for vid, ann in self.videos.items() if ann.subset == name}

    def ground_truth_count(self) -> int:
        return sum(len(v.instances) for v in self.videos.values())

    def validate(self):
        """Enforce segment bounds and vocabulary membership"""
        if len(set(self.classes)) != len(self.classes):
            raise AnnotationValueError("duplicate class names in vocabulary")
        vocab = set(self.classes)
        for vid, ann in self.videos.items():
            if not ann.duration_s > 0:
                raise AnnotationValueError(f"{vid}: duration must be positive")
            if ann.subset not in SUBSETS:
                raise AnnotationValueError(f"{vid}: unknown subset '{ann.subset}'")
            for inst in ann.instances:
                if not (0.0 <= inst.start_s < inst.end_s <= ann.duration_s):
                    raise AnnotationValueError(
                        f"{vid}: segment [{inst.start_s}, {inst.end_s}] outside [0, {ann.duration_s}]"
                    )
                if inst.label not in vocab:
                    raise AnnotationValueError(f"{vid}: label '{inst.label}' not in class vocabulary")


# Feature files

def write_features(seq: FeatureSequence, path: PathLike) -> Path:
    """Write a feature matrix as TAGF (header + little-endian float32, snippet-major)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.ascontiguousarray(seq.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, values.shape[0], values.shape[1]))
        fh.write(values.tobytes(order="C"))
    return path


def write_matrix(matrix: np.ndarray, path: PathLike) -> Path:
    """Dump any finite 2-D matrix in the TAGF format"""
    matrix = np.asarray(matrix, dtype=np.float64)
    return write_features(FeatureSequence(Path(path).stem, matrix, float(matrix.shape[0])), path)


def read_features(path: PathLike, duration_s: Optional[float] = None,
                  video_id: Optional[str] = None) -> FeatureSequence:
    """Read a TAGF file; duration defaults to one second per snippet"""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    _, version, T, dim = _HEADER.unpack_from(data)
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FEATURE_VERSION}")
    expected = T * dim * 4
    payload = data[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: {len(payload)} payload bytes, header needs {expected}")
    if T < 1 or dim < 1:
        raise FeatureFormatError(f"{path}: empty matrix {T}x{dim}")
    values = np.frombuffer(payload[:expected], dtype="<f4").reshape(T, dim).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValuesError(f"{path}: non-finite values in payload")
    return FeatureSequence(video_id or path.stem, values,
                           float(T) if duration_s is None else duration_s)


def read_matrix(path: PathLike) -> np.ndarray:
    """Read a TAGF matrix dump"""
    return read_features(path).values


def rescale_features(seq: FeatureSequence, T: int) -> FeatureSequence:
    """Linearly interpolate a sequence to exactly T snippets"""
    if T < 1:
        raise ValidationError(f"target length must be >= 1, got {T}")
    if seq.T == T:
        return seq
    # Sample at snippet centres, expressed in source-snippet units
    src = (np.arange(seq.T) + 0.5)
    dst = (np.arange(T) + 0.5) * seq.T / T
    values = np.stack([np.interp(dst, src, seq.values[:, j].astype(np.float64))
                       for j in range(seq.dim)], axis=1)
    return FeatureSequence(seq.video_id, values, seq.duration_s)


# Annotation / prediction JSON

def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise AnnotationFormatError(key, where)
    return obj[key]


def _parse_segment(entry: dict, where: str) -> Tuple[float, float]:
    segment = _require(entry, "segment", where)
    if not isinstance(segment, (list, tuple)) or len(segment) != 2:
        raise AnnotationValueError(f"{where}: segment must be [start, end]")
    return float(segment[0]), float(segment[1])


def parse_annotations(payload: dict) -> AnnotationSet:
    """Build and validate an AnnotationSet from decoded JSON"""
    classes = [str(c) for c in _require(payload, "classes", "root")]
    database = _require(payload, "database", "root")
    videos: Dict[str, VideoAnnotation] = {}
    for vid, entry in database.items():
        where = f"database.{vid}"
        duration = float(_require(entry, "duration", where))
        subset = str(entry.get("subset", "train"))
        instances = []
        for i, item in enumerate(_require(entry, "annotations", where)):
            item_where = f"{where}.annotations[{i}]"
            start, end = _parse_segment(item, item_where)
            instances.append(Instance(start, end, str(_require(item, "label", item_where))))
        instances.sort(key=lambda inst: (inst.start_s, inst.end_s))
        videos[vid] = VideoAnnotation(duration, subset, instances)
    annotations = AnnotationSet(classes, videos)
    annotations.validate()
    return annotations


def read_annotations(path: PathLike) -> AnnotationSet:
    """Load and validate an annotation JSON file"""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise AnnotationValueError(f"{path}: invalid JSON ({e})") from e
    return parse_annotations(payload)


def annotations_to_dict(annotations: AnnotationSet) -> dict:
    return {
        "version": "1.0",
        "classes": list(annotations.classes),
        "database": {
            vid: {
                "duration": ann.duration_s,
                "subset": ann.subset,
                "annotations": [
                    {"segment": [inst.start_s, inst.end_s], "label": inst.label}
                    for inst in ann.instances
                ],
            }
            for vid, ann in annotations.videos.items()
        },
    }


def write_annotations(annotations: AnnotationSet, path: PathLike) -> Path:
    """Write annotations as ActivityNet-style JSON"""
    annotations.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(annotations_to_dict(annotations), fh, indent=2)
    return path


@dataclass(frozen=True)
class Prediction:
    """One detection as stored in a predictions file"""
    video_id: str
    label: str
    score: float
    start_s: float
    end_s: float


def predictions_to_dict(candidates: Iterable, classes: Sequence[str],
                        video_ids: Iterable[str] = ()) -> dict:
    """Submission dict; candidates carry video_id, label index, score, start_s, end_s"""
    results: Dict[str, list] = {vid: [] for vid in video_ids}
    for cand in candidates:
        label = cand.label if isinstance(cand.label, str) else classes[cand.label]
        results.setdefault(cand.video_id, []).append({
            "label": label,
            "score": float(cand.score),
            "segment": [float(cand.start_s), float(cand.end_s)],
        })
    return {"results": results}


def write_predictions(candidates: Iterable, path: PathLike, classes: Sequence[str],
                      video_ids: Iterable[str] = ()) -> Path:
    """Write detections in submission format; listed videos appear even when empty"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(predictions_to_dict(candidates, classes, video_ids), fh, indent=2)
    return path


def parse_predictions(payload: dict) -> Dict[str, List[Prediction]]:
    results = _require(payload, "results", "root")
    if not isinstance(results, dict):
        raise AnnotationValueError("results must map video ids to lists of detections")
    parsed: Dict[str, List[Prediction]] = {}
    for vid, items in results.items():
        if not isinstance(items, list):
            raise AnnotationValueError(f"results.{vid}: expected a list of detections")
        preds = []
        for i, item in enumerate(items):
            where = f"results.{vid}[{i}]"
            try:
                start, end = _parse_segment(item, where)
                score = float(_require(item, "score", where))
            except (TypeError, ValueError) as e:
                if isinstance(e, ValidationError):
                    raise
                raise AnnotationValueError(f"{where}: non-numeric score or segment ({e})") from e
            preds.append(Prediction(vid, str(_require(item, "label", where)), score, start, end))
        parsed[vid] = preds
    return parsed


def read_predictions(path: PathLike) -> Dict[str, List[Prediction]]:
    """Load a predictions JSON file, keyed by video id"""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise AnnotationValueError(f"{path}: invalid JSON ({e})") from e
    return parse_predictions(payload)


# Datasets

@dataclass
class VideoSample:
    """Features of one video paired with its annotation"""
    features: FeatureSequence
    annotation: VideoAnnotation


def load_dataset(feature_dir: PathLike, annotations: AnnotationSet, T: Optional[int] = None,
                 subset: Optional[str] = None) -> List[VideoSample]:
    """Pair every feature file with its annotation, rescaled to T snippets"""
    browser = FileBrowser(Path(feature_dir))
    wanted = annotations.subset(subset)
    samples = []
    for vid, path in browser.by_video().items():
        if vid not in wanted:
            continue
        ann = wanted[vid]
        seq = read_features(path, duration_s=ann.duration_s, video_id=vid)
        if T is not None:
            seq = rescale_features(seq, T)
        samples.append(VideoSample(seq, ann))
    missing = sorted(set(wanted) - set(browser.video_ids()))
    if missing:
        logger.warning("%d annotated videos have no feature file (first: %s)", len(missing), missing[0])
    if samples and len({s.features.dim for s in samples}) != 1:
        raise ValidationError("videos do not share one feature dimension")
    return samples
