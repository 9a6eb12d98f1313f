"""Exception types shared across the package.

Each failure class maps to one kind of contract violation so callers
(and the CLI exit-code logic) can react without string matching.
"""


class CraftError(Exception):
    """Base class for all package errors."""


class ShapeError(CraftError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(CraftError, ValueError):
    """A configuration value violates its documented range or invariant."""


class StepError(CraftError, ValueError):
    """A diffusion step index is outside 1..T."""


class EvaluationError(CraftError, ArithmeticError):
    """A probed function returned a non-finite value."""


class ExtractionError(CraftError, ValueError):
    """No measurable face geometry in the image."""


class ProjectionError(CraftError, ValueError):
    """Attribute projection target unreachable or not converged."""


class TrainingError(CraftError, RuntimeError):
    """Optimization diverged (non-finite loss)."""


class InputError(CraftError, ValueError):
    """Malformed user input (empty prompt, zero embedding, ...)."""


class CompositionOrderError(CraftError, AssertionError):
    """A sweep cell broke the style-then-project inequality."""
