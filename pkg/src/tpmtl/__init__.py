"""Multi-task dense prediction with a tri-plane volume-rendering regularizer."""

from tpmtl.autodiff import Tape, Tensor, backward

__all__ = ["Tape", "Tensor", "backward"]
__version__ = "0.1.0"
