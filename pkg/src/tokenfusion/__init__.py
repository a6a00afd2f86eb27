"""Token-level multimodal fusion for small transformers, with oracles and a CLI."""

from .autograd import Tensor, backward, finite_diff_grad

__all__ = ["Tensor", "backward", "finite_diff_grad"]
__version__ = "0.1.0"
