"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`SFIError`
and carries a short machine-readable ``code`` next to the human message, so
the CLI and tests can match on the kind of failure without parsing text.
"""

from __future__ import annotations

from typing import Any


class SFIError(Exception):
    code = "sfi_error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.context = context

    def __str__(self) -> str:
        base = super().__str__()
        if not self.context:
            return f"[{self.code}] {base}"
        ctx = ", ".join(f"{k}={v!r}" for k, v in sorted(self.context.items()))
        return f"[{self.code}] {base} ({ctx})"


class ConfigError(SFIError):
    code = "config"


class EmptySupportError(SFIError):
    code = "empty_support"


class NonFiniteError(SFIError):
    code = "non_finite"


class AlignmentError(SFIError):
    """Arrays that should describe the same support disagree in shape."""

    code = "misaligned"


class SupportMismatchError(SFIError):
    code = "support_mismatch"


class SelectionContractError(SFIError):
    """The selector handed back positions that overlap sink/recent sets."""

    code = "selection_contract"


class ContextOverflowError(SFIError):
    code = "context_overflow"


class PositionError(SFIError):
    code = "position"


class StaleCompactError(SFIError):
    code = "stale_compact"


class ModelSpecError(SFIError):
    code = "model_spec"


class WeightFileError(SFIError):
    """Malformed weight file. ``context['offset']`` is the byte offset."""

    code = "weight_file"


class InvariantViolation(SFIError):
    code = "invariant"
