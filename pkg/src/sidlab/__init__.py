"""Desk-scale one-step diffusion distillation lab.

Teacher pretraining, guided one-step generator distillation, and
guidance-strategy sweeps on synthetic conditional Gaussian-mixture data,
where every score, denoiser, and identity has a closed form.
"""

__version__ = "0.1.0"

from .errors import (ConfigurationError, InputError, NumericError,
                     SidlabError, SingularityError, TrainingError)

__all__ = [
    "ConfigurationError",
    "InputError",
    "NumericError",
    "SidlabError",
    "SingularityError",
    "TrainingError",
    "__version__",
]
