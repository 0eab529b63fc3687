"""
Error types raised by the translator.

Every error derives from ``TranslatorError`` so the command layer can turn it
into a single ``A2A-ERR:`` line. Each family also derives from the builtin a
caller would naturally catch (``ValueError`` for bad arguments, ``OSError``
for on-disk problems).
"""


class TranslatorError(Exception):
    """Base class for all translator failures."""


class RegistryError(TranslatorError, ValueError):
    """Duplicate, unknown or malformed modality registrations."""


class DirectionError(TranslatorError, ValueError):
    """Invalid or untrained translation directions."""


class ScheduleError(TranslatorError, ValueError):
    """Invalid noise schedule bounds or diffusion step indices."""


class ShapeError(TranslatorError, ValueError):
    """Tensor shapes that violate the latent or native-image contract."""


class ScaleError(TranslatorError, ValueError):
    """Latent scaling misuse: unset factors, double application, degenerate latents."""


class DivergenceError(TranslatorError, ArithmeticError):
    """Non-finite losses or activations during training."""


class CheckpointError(TranslatorError, OSError):
    """Unreadable, truncated or inconsistent checkpoint containers."""


class DatasetError(TranslatorError, OSError):
    """Missing, malformed or registry-inconsistent dataset files."""


class MetricError(TranslatorError, ValueError):
    """Metric inputs that cannot be compared."""


class GateError(TranslatorError):
    """A hard ablation gate was not met."""
