"""
Exception types for esforge.

Every error derives from EsforgeError and from the builtin a caller would
naturally catch (ValueError for bad input, RuntimeError for runtime failures).
"""

from typing import Optional


class EsforgeError(Exception):
    """Base class for all esforge errors."""


class ConfigurationError(EsforgeError, ValueError):
    """Invalid configuration value, unknown key, or missing collaborator."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ComparabilityError(EsforgeError, ValueError):
    """Two ParamSets differ in names, groups or shapes."""


class WindowError(EsforgeError, ValueError):
    """Context longer than the policy's context window."""


class VocabError(EsforgeError, ValueError):
    """Token id outside the vocabulary."""


class DomainError(EsforgeError, ValueError):
    """Argument outside the mathematical domain of a function."""


class IntegrityError(EsforgeError, ValueError):
    """Population results with duplicate or missing member indices."""


class NoiseOverflowError(EsforgeError, RuntimeError):
    """Perturbation produced a non-finite parameter (sigma too large)."""


class MemberError(EsforgeError, RuntimeError):
    """A population member produced a non-finite reward."""

    def __init__(self, member_index: int, reward: float):
        self.member_index = member_index
        self.reward = reward
        super().__init__(f"member {member_index} produced non-finite reward {reward!r}")


class GradientError(EsforgeError, RuntimeError):
    """Non-finite gradient during a policy-gradient step."""

    def __init__(self, step: int, prompt: int, member: int, detail: str = ""):
        self.step = step
        self.prompt = prompt
        self.member = member
        message = f"non-finite gradient at step={step} prompt={prompt} member={member}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class CheckpointFormatError(EsforgeError, ValueError):
    """Checkpoint file does not start with the expected magic bytes."""


class CheckpointCorruptionError(CheckpointFormatError):
    """Checkpoint file is truncated or internally inconsistent."""


class CheckpointVersionError(CheckpointFormatError):
    """Checkpoint file declares an unsupported format version."""
