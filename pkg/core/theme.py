"""
N01D Theme - heatmap palette for mask and similarity renders
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image


@dataclass
class N01DColors:
    """N01D color palette"""
    # Backgrounds
    bg_dark: str = "#0a0a0f"      # Darkest background
    bg: str = "#0d1117"           # Main background

    # Accent colors
    accent: str = "#00ff9f"       # Neon green (primary)
    cyan: str = "#00d4ff"         # Neon cyan
    purple: str = "#a371f7"       # Purple
    pink: str = "#ff6ec7"         # Neon pink
    yellow: str = "#ffd700"       # Gold/yellow
    red: str = "#ff4757"          # Error/danger


def hex_to_rgb(color: str) -> Tuple[int, int, int]:
    """Convert '#rrggbb' to an RGB triple"""
    color = color.lstrip("#")
    return tuple(int(color[i:i + 2], 16) for i in (0, 2, 4))


@dataclass
class HeatmapPalette:
    """Piecewise-linear colour ramp built from theme colours"""
    stops: List[str] = field(default_factory=lambda: [
        N01DColors.bg_dark, N01DColors.purple, N01DColors.cyan, N01DColors.accent,
    ])
    # Diverging ramp for signed matrices (cosine similarity)
    diverging: List[str] = field(default_factory=lambda: [
        N01DColors.red, N01DColors.bg, N01DColors.accent,
    ])

    def lookup(self, values: np.ndarray, signed: bool = False) -> np.ndarray:
        """Map values in [0, 1] (or [-1, 1] when signed) to uint8 RGB"""
        stops = self.diverging if signed else self.stops
        rgb = np.array([hex_to_rgb(c) for c in stops], dtype=np.float64)
        x = np.asarray(values, dtype=np.float64)
        if signed:
            x = (x + 1.0) / 2.0
        x = np.clip(np.nan_to_num(x, nan=0.0), 0.0, 1.0)
        pos = np.linspace(0.0, 1.0, len(stops))
        out = np.stack([np.interp(x, pos, rgb[:, ch]) for ch in range(3)], axis=-1)
        return np.round(out).astype(np.uint8)


class N01DTheme:
    """Theme manager for rendered figures"""

    def __init__(self):
        self.colors = N01DColors()
        self.palette = HeatmapPalette()

    def render_heatmap(self, matrix: np.ndarray, path: Union[str, Path],
                       signed: bool = False, cell: int = 4) -> Path:
        """Write a matrix as a PNG heatmap, one cell x cell block per entry"""
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.size == 0:
            raise ValueError(f"heatmap needs a non-empty 2-D matrix, got shape {matrix.shape}")
        pixels = self.palette.lookup(matrix, signed=signed)
        image = Image.fromarray(pixels)
        if cell > 1:
            image = image.resize((matrix.shape[1] * cell, matrix.shape[0] * cell),
                                 Image.Resampling.NEAREST)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        image.save(path)
        return path
