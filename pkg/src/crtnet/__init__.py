"""Context-aware object recognition at desk scale.

Subpackages:

- :mod:`crtnet.autodiff` -- float64 tensors with reverse-mode differentiation
- :mod:`crtnet.model` -- the two-stream recognition transformer
- :mod:`crtnet.scenes` -- procedural out-of-context scene generator
- :mod:`crtnet.train` -- three-loss training with gradient detachment
- :mod:`crtnet.evaluation` -- condition-stratified accuracy reports
- :mod:`crtnet.cli` -- command-line entry point
"""

from .autodiff import Tensor, backward, detach, no_grad
from .model import BoundingBox, ModelConfig, Prediction, forward, init_params, tiny_config
from .rng import Rng, derive_seed

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "detach", "no_grad",
    "BoundingBox", "ModelConfig", "Prediction", "forward", "init_params",
    "tiny_config", "Rng", "derive_seed", "__version__",
]
