import io
import logging

import numpy as np
import pytest
from PIL import Image

from core.file_browser import FileBrowser
from core.status_bar import StatusBar, configure_logging
from core.theme import HeatmapPalette, N01DColors, N01DTheme, hex_to_rgb


@pytest.fixture
def log_stream():
    stream = io.StringIO()
    root = configure_logging(verbose=False, stream=stream)
    yield stream
    root.handlers.clear()
    root.propagate = True
    root.setLevel(logging.NOTSET)


class TestTheme:

    def test_hex_to_rgb(self):
        assert hex_to_rgb("#00ff9f") == (0, 255, 159)
        assert hex_to_rgb("0a0a0f") == (10, 10, 15)

    def test_palette_end_points(self):
        palette = HeatmapPalette()
        out = palette.lookup(np.array([0.0, 1.0]))
        assert tuple(out[0]) == hex_to_rgb(N01DColors.bg_dark)
        assert tuple(out[1]) == hex_to_rgb(N01DColors.accent)
        assert out.dtype == np.uint8

    def test_signed_palette_centre(self):
        out = HeatmapPalette().lookup(np.array([-1.0, 0.0, 1.0]), signed=True)
        assert tuple(out[0]) == hex_to_rgb(N01DColors.red)
        assert tuple(out[1]) == hex_to_rgb(N01DColors.bg)
        assert tuple(out[2]) == hex_to_rgb(N01DColors.accent)

    def test_out_of_range_and_nan_are_clipped(self):
        palette = HeatmapPalette()
        out = palette.lookup(np.array([-3.0, np.nan, 7.0]))
        assert tuple(out[0]) == tuple(out[1]) == hex_to_rgb(N01DColors.bg_dark)
        assert tuple(out[2]) == hex_to_rgb(N01DColors.accent)

    def test_render_heatmap(self, tmp_path, rng):
        path = N01DTheme().render_heatmap(rng.random((3, 5)), tmp_path / "sub" / "m.png", cell=4)
        with Image.open(path) as image:
            assert image.size == (20, 12)

    def test_render_signed_without_scaling(self, tmp_path):
        path = N01DTheme().render_heatmap(np.array([[-1.0, 1.0]]), tmp_path / "s.png", signed=True, cell=1)
        with Image.open(path) as image:
            assert image.size == (2, 1)
            assert image.getpixel((0, 0)) == hex_to_rgb(N01DColors.red)

    def test_render_rejects_empty(self, tmp_path):
        with pytest.raises(ValueError):
            N01DTheme().render_heatmap(np.zeros((0, 3)), tmp_path / "e.png")
        with pytest.raises(ValueError):
            N01DTheme().render_heatmap(np.zeros(4), tmp_path / "e.png")


class TestStatusBar:

    def test_messages_are_logged_with_module_label(self, log_stream):
        status = StatusBar("train")
        status.set_message("epoch 1 done")
        status.set_message("diverged", error=True)
        text = log_stream.getvalue()
        assert "INFO    [TRAIN] epoch 1 done" in text
        assert "ERROR   [TRAIN] diverged" in text
        assert status.error and status.message == "diverged"

    def test_debug_hidden_unless_verbose(self, log_stream):
        StatusBar("x").debug("hidden detail")
        assert "hidden detail" not in log_stream.getvalue()
        configure_logging(verbose=True, stream=log_stream)
        StatusBar("x").debug("shown detail")
        assert "shown detail" in log_stream.getvalue()

    def test_progress_and_clear(self, log_stream):
        status = StatusBar("eval")
        status.set_progress(0.5, "scoring")
        assert status.message == "scoring: 50%"
        status.set_progress(1.0)
        assert status.message == "Progress: 100%"
        status.clear()
        assert status.message == "Ready" and not status.error

    def test_module_loggers_get_a_label(self, log_stream):
        logging.getLogger("tags.modules.inference").warning("stray prediction")
        assert "[INFERENCE] stray prediction" in log_stream.getvalue()


class TestFileBrowser:

    def test_lists_feature_files_only(self, tmp_path):
        for name in ("b.tagf", "a.tagf", "notes.txt"):
            (tmp_path / name).write_bytes(b"")
        (tmp_path / "dir.tagf").mkdir()
        browser = FileBrowser(tmp_path)
        assert browser.video_ids() == ["a", "b"]
        assert browser.by_video()["a"] == tmp_path / "a.tagf"
        assert browser.path_for("c") == tmp_path / "c.tagf"

    def test_not_a_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            FileBrowser(tmp_path / "missing")

    def test_path_for_needs_a_directory(self):
        with pytest.raises(RuntimeError):
            FileBrowser().path_for("v")
