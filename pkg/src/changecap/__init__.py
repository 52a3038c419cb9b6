"""changecap: bi-temporal change captioning with a from-scratch autodiff core.

The pipeline compares a pre/post image pair, approximates a change mask with
a denoising diffusion model over a Siamese feature pyramid, cleans the noise
estimate with a frequency-guided channel fusion filter, and decodes a natural
language caption of the change with a small autoregressive transformer.
"""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    InputError,
    ShapeError,
    TrainingAbort,
    VocabError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "InputError",
    "ShapeError",
    "TrainingAbort",
    "VocabError",
    "__version__",
]
