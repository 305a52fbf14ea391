"""Exception types raised across the package.

Every failure mode that callers are expected to distinguish gets its own
class; all inherit from :class:`WatermarkLabError` so blanket handling
stays possible.
"""


class WatermarkLabError(Exception):
    """Base class for all wmlab errors."""


class NonFiniteError(WatermarkLabError):
    """A vector contains NaN or infinite entries."""


class NegativeWeightError(WatermarkLabError):
    """A probability vector has a meaningfully negative entry."""


class NotNormalizedError(WatermarkLabError):
    """A probability vector does not sum to one within tolerance."""


class LengthMismatchError(WatermarkLabError):
    """Two vectors that must share a length do not."""


class TokenOutOfRangeError(WatermarkLabError):
    """A token id falls outside the vocabulary."""


class LayerOutOfRangeError(WatermarkLabError):
    """A layer index is not smaller than the configured layer count."""


class InvalidParamsError(WatermarkLabError):
    """Parameters violate a documented precondition."""


class ConstantScoresError(WatermarkLabError):
    """Scores are constant on the support, so no tilt strength exists."""


class EpsilonTooLargeError(WatermarkLabError):
    """The divergence budget exceeds what any finite strength reaches."""


class NonBinaryScoresError(WatermarkLabError):
    """Tournament layers require {0,1}-valued scores."""


class DiscreteSpecUnsupportedError(WatermarkLabError):
    """The soft-perplexity calibration requires a continuous score law."""


class BracketFailureError(WatermarkLabError):
    """Root bracketing exceeded its growth cap without enclosing a root."""


class NumericalFailureError(WatermarkLabError):
    """An internal solver reached a state its contract rules out."""


class EmptySequenceError(WatermarkLabError):
    """A token sequence is too short to process."""


class EmptyInputError(WatermarkLabError):
    """An input collection is empty."""


class EmptyCorpusError(WatermarkLabError):
    """The training corpus is empty or has a degenerate vocabulary."""


class SupportViolationError(WatermarkLabError):
    """A distribution places mass where the reference has none."""


class TooFewTextsError(WatermarkLabError):
    """Self-BLEU needs at least two texts."""


class InfeasibleBudgetError(WatermarkLabError):
    """Rejection sampling under the constraint accepts too rarely."""


class ConfigError(WatermarkLabError):
    """An experiment configuration is invalid or unreadable."""
