"""
Feature directory browser for the TAGS toolkit
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional

logger = logging.getLogger(f"tags.{__name__}")

FEATURE_EXT = ".tagf"


class FileBrowser:
    """Lists the per-video feature files of a dataset directory"""

    def __init__(self, path: Optional[Path] = None, extensions=(FEATURE_EXT,)):
        self.extensions = {e.lower() for e in extensions}
        self.current_path: Optional[Path] = None
        self.items: List[Path] = []
        if path is not None:
            self.load_directory(Path(path))

    def load_directory(self, path: Path) -> List[Path]:
        """Load directory contents, keeping feature files only"""
        path = Path(path)
        if not path.is_dir():
            raise FileNotFoundError(f"not a directory: {path}")

        self.current_path = path
        try:
            entries = sorted(path.iterdir(), key=lambda x: x.name)
        except PermissionError:
            logger.warning("permission denied: %s", path)
            entries = []

        self.items = [p for p in entries if p.is_file() and p.suffix.lower() in self.extensions]
        logger.debug("%d feature files in %s", len(self.items), path)
        return self.items

    def video_ids(self) -> List[str]:
        """Video ids, taken from file stems"""
        return [p.stem for p in self.items]

    def by_video(self) -> Dict[str, Path]:
        """Map video id to feature file"""
        return {p.stem: p for p in self.items}

    def path_for(self, video_id: str) -> Path:
        """Where a video's feature file lives (need not exist yet)"""
        if self.current_path is None:
            raise RuntimeError("no directory loaded")
        return self.current_path / f"{video_id}{FEATURE_EXT}"

