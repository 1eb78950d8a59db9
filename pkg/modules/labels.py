"""
Ground-truth assignment for the TAGS toolkit
Per-snippet class targets and global mask targets at every scale
"""

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from core.errors import ValidationError
from modules.data_io import VideoAnnotation
from modules.encoder import scale_length


class OverlappingInstancesError(ValidationError):
    """Two instances of one video overlap in time"""


@dataclass
class ScaleTargets:
    """y (T^s class ids, K = background), G (T^s x T^s masks by column), instance ids"""
    scale: int
    y: np.ndarray
    G: np.ndarray
    instance_id: np.ndarray
    background: int

    @property
    def foreground(self) -> np.ndarray:
        return np.flatnonzero(self.y != self.background)

    def instances(self) -> Dict[int, np.ndarray]:
        """Foreground snippet indices grouped by instance"""
        return {int(i): np.flatnonzero(self.instance_id == i)
                for i in np.unique(self.instance_id) if i >= 0}


def check_overlaps(annotation: VideoAnnotation):
    ordered = sorted(annotation.instances, key=lambda inst: (inst.start_s, inst.end_s))
    for prev, nxt in zip(ordered, ordered[1:]):
        if nxt.start_s < prev.end_s:
            raise OverlappingInstancesError(
                f"instances [{prev.start_s}, {prev.end_s}] and [{nxt.start_s}, {nxt.end_s}] overlap"
            )


def assign_targets(annotation: VideoAnnotation, T: int, scale: int,
                   classes: Sequence[str], mask_design: str = "global") -> ScaleTargets:
    """Centre-sampling assignment of instances to scale-s snippets

    A scale-s snippet belongs to an instance iff its temporal centre lies in
    [start, end]; its mask column marks every snippet whose centre does.
    For the actionness design every foreground column marks all foreground
    snippets of the video instead.
    """
    check_overlaps(annotation)
    K = len(classes)
    length = scale_length(T, scale)
    delta = annotation.duration_s / T
    centres = (np.arange(length) + 0.5) * scale * delta

    y = np.full(length, K, dtype=np.int64)
    instance_id = np.full(length, -1, dtype=np.int64)
    G = np.zeros((length, length), dtype=np.float64)
    ordered = sorted(annotation.instances, key=lambda inst: (inst.start_s, inst.end_s))
    for idx, inst in enumerate(ordered):
        inside = (centres >= inst.start_s) & (centres <= inst.end_s) & (instance_id < 0)
        members = np.flatnonzero(inside)
        if members.size == 0:
            continue
        y[members] = classes.index(inst.label)
        instance_id[members] = idx
        column = inside.astype(np.float64)
        G[:, members] = column[:, None]
    if mask_design == "actionness":
        foreground = y != K
        G[:, foreground] = foreground.astype(np.float64)[:, None]
    return ScaleTargets(scale, y, G, instance_id, K)


def assign_all_scales(annotation: VideoAnnotation, T: int, scales: Sequence[int],
                      classes: Sequence[str], mask_design: str = "global") -> Dict[int, ScaleTargets]:
    return {s: assign_targets(annotation, T, s, classes, mask_design) for s in scales}
