class ExportError(Exception):
    """Base class for everything this package raises on purpose."""


class ModelLoad(ExportError):
    """The requested model variant's weights are not available."""


class PromptOutOfBounds(ExportError):
    """A prompt addresses no valid pixel in any exported view."""


class InputMismatch(ExportError):
    """Images, cameras, or prompts disagree with each other."""
