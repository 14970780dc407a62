"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigurationError -> 2,
TrainingError -> 3, verification failures -> 1.
"""


class SidlabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SidlabError):
    """Invalid configuration: bad field values, incongruent shapes, bad presets."""


class InputError(SidlabError):
    """Invalid runtime input: out-of-range condition index, empty sample sets."""


class NumericError(SidlabError):
    """Non-finite value encountered where finiteness is required."""


class SingularityError(SidlabError):
    """Division by a vanishing schedule coefficient (sigma_t = 0 or a_t = 0)."""


class TrainingError(SidlabError):
    """Training aborted; carries a diagnostic payload when available."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
