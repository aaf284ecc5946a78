"""Exception types shared across the package."""

from __future__ import annotations


class OptreeError(Exception):
    """Base class for all package errors."""


class ConfigError(OptreeError, ValueError):
    pass


class LengthError(OptreeError, ValueError):
    pass


class ShapeError(OptreeError, ValueError):
    pass


class ReconstructionError(OptreeError):
    """Raised when a token sequence cannot be rebuilt into an operation tree.

    ``reason`` is one of ``REASONS``.
    """

    REASONS = (
        "dangling-children",
        "trailing-tokens",
        "unknown-token",
        "missing-EOS",
        "const-underflow",
    )

    def __init__(self, reason: str, detail: str = ""):
        if reason not in self.REASONS:
            raise ValueError(f"unknown reconstruction failure reason {reason!r}")
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


class ParseError(OptreeError, ValueError):
    def __init__(self, message: str, offset: int, expected: frozenset[str] | set[str] = frozenset()):
        self.offset = offset
        self.expected = frozenset(expected)
        exp = ", ".join(sorted(self.expected))
        super().__init__(f"{message} at offset {offset}" + (f" (expected one of: {exp})" if exp else ""))


class MaskedConstError(OptreeError, ValueError):
    pass


class DegenerateImageError(OptreeError):
    pass


class SampleError(OptreeError, ValueError):
    pass


class CondWidthError(ShapeError):
    pass


class GradCheckFailure(OptreeError, AssertionError):
    def __init__(self, report):
        self.report = report
        bad = ", ".join(f"{k}={v:.3g}" for k, v in report.failing().items())
        super().__init__(f"gradient check failed for: {bad}")


class TokenizeError(OptreeError, ValueError):
    pass


class MissingKeyError(OptreeError, KeyError):
    pass


class NonFiniteLossError(OptreeError, FloatingPointError):
    pass


class NoDescentError(OptreeError):
    pass


class TopologyError(OptreeError):
    pass


class LengthMismatchError(OptreeError, ValueError):
    pass


class VersionError(OptreeError):
    pass
