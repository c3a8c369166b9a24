"""
Exception hierarchy shared by the library, the CLI and the viewer service.

Library code raises these; only the entry points translate them into exit
codes (cli.py) or HTTP responses (app.py).
"""
from typing import Dict, List, Optional, Sequence


EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_FAILURE = 3


class IESRError(Exception):
    """Base class for every error raised by this package."""

    exit_code: int = 1


class ConfigurationError(IESRError):
    """Invalid or incomplete configuration detected before any work starts."""

    exit_code = EXIT_CONFIG_ERROR


class GuidanceError(ConfigurationError):
    """
    Guidance could not be assembled for one or more views.

    Carries one diagnostic per offending view so the caller can print all of
    them at once instead of failing on the first.
    """

    def __init__(self, diagnostics: Dict[str, List[str]]):
        self.diagnostics = {view: list(msgs) for view, msgs in diagnostics.items()}
        lines = []
        for view, msgs in sorted(self.diagnostics.items()):
            for msg in msgs:
                lines.append(f"view '{view}': {msg}")
        super().__init__("guidance rejected:\n  " + "\n  ".join(lines))


class NumericalFailureError(IESRError):
    """Training diverged (non-finite loss)."""

    exit_code = EXIT_NUMERICAL_FAILURE

    def __init__(self, message: str, recent_losses: Optional[Sequence[float]] = None, step: Optional[int] = None):
        self.recent_losses = list(recent_losses or [])
        self.step = step
        detail = ", ".join(f"{v:.6g}" for v in self.recent_losses)
        super().__init__(f"{message} (step={step}, last losses=[{detail}])")


class ImageFormatError(IESRError):
    """Malformed FIMG/PNG input."""

    exit_code = EXIT_CONFIG_ERROR


class CheckpointFormatError(IESRError):
    """Malformed scene, camera or IESR checkpoint file."""

    exit_code = EXIT_CONFIG_ERROR
