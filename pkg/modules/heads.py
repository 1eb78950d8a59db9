"""
Detection heads for the TAGS toolkit
Snippet classification and global segmentation mask branches
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from modules.data_io import write_matrix

KERNEL = 3


def _conv(in_ch: int, out_ch: int) -> nn.Conv1d:
    """Width-3, stride-1 conv with zero 'same' padding"""
    return nn.Conv1d(in_ch, out_ch, KERNEL, stride=1, padding=KERNEL // 2)


def _as_channels(embedding: torch.Tensor) -> torch.Tensor:
    """T x C embedding -> 1 x C x T conv input"""
    if embedding.dim() != 2:
        raise ValueError(f"expected a T x C embedding, got shape {tuple(embedding.shape)}")
    return embedding.t().unsqueeze(0)


@dataclass
class ScaleOutputs:
    """Predictions of one scale: P, R are (K+1) x T^s, M is T^s x T^s"""
    scale: int
    P: torch.Tensor
    R: torch.Tensor
    M: torch.Tensor
    E: torch.Tensor

    @property
    def length(self) -> int:
        return self.M.shape[0]

    def check(self, atol: float = 1e-6):
        """Assert column-stochastic P and [0, 1] ranges of M and R"""
        sums = self.P.sum(dim=0)
        if not torch.allclose(sums, torch.ones_like(sums), atol=atol) or bool((self.P < 0).any()):
            raise AssertionError(f"scale {self.scale}: P is not column-stochastic")
        for name, mat in (("M", self.M), ("R", self.R)):
            if bool((mat < 0).any()) or bool((mat > 1).any()):
                raise AssertionError(f"scale {self.scale}: {name} leaves [0, 1]")


class ClassificationHead(nn.Module):
    """H_c: one 1-D conv to K + 1 logits per snippet"""

    def __init__(self, width: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.conv = _conv(width, num_classes + 1)

    def forward(self, embedding: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return classify(embedding, self)


class MaskHead(nn.Module):
    """H_b: three 1-D convs, the last emitting T^s channels

    With actionness=True the last conv emits one channel: a single
    foreground sequence shared by every snippet.
    """

    def __init__(self, width: int, length: int, hidden: Optional[int] = None, actionness: bool = False):
        super().__init__()
        hidden = hidden or width
        self.length = length
        self.actionness = actionness
        self.conv1 = _conv(width, hidden)
        self.conv2 = _conv(hidden, hidden)
        self.conv3 = _conv(hidden, 1 if actionness else length)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return predict_masks(embedding, self)


def classify(embedding: torch.Tensor, head: ClassificationHead) -> Tuple[torch.Tensor, torch.Tensor]:
    """P = column softmax of H_c(E), R = sigmoid of the same logits"""
    logits = head.conv(_as_channels(embedding)).squeeze(0)
    return torch.softmax(logits, dim=0), torch.sigmoid(logits)


def predict_masks(embedding: torch.Tensor, head: MaskHead) -> torch.Tensor:
    """M = sigmoid(H_b(E)); column t is the mask conditioned on snippet t

    An actionness head repeats its one sequence in every column.
    """
    if embedding.shape[0] != head.length:
        raise ValueError(f"embedding has {embedding.shape[0]} snippets, mask head expects {head.length}")
    x = torch.relu(head.conv1(_as_channels(embedding)))
    x = torch.relu(head.conv2(x))
    out = torch.sigmoid(head.conv3(x)).squeeze(0)
    if head.actionness:
        return out.t().expand(head.length, head.length)
    return out


def dump_scale_outputs(outputs: List[ScaleOutputs], directory: Path, video_id: str,
                       theme=None) -> List[Path]:
    """Write P and M of every scale as TAGF matrices (and PNGs when a theme is given)"""
    directory = Path(directory)
    written = []
    for out in outputs:
        for name, mat in (("P", out.P), ("M", out.M)):
            values = mat.detach().cpu().numpy()
            stem = f"{video_id}_s{out.scale}_{name}"
            written.append(write_matrix(values, directory / f"{stem}.tagf"))
            if theme is not None:
                written.append(theme.render_heatmap(values, directory / f"{stem}.png"))
    return written
