# TAGS core components
from .errors import TagsError, ValidationError, RuntimeFailure
from .theme import N01DTheme
from .file_browser import FileBrowser
from .status_bar import StatusBar

__all__ = ['TagsError', 'ValidationError', 'RuntimeFailure', 'N01DTheme', 'FileBrowser', 'StatusBar']
