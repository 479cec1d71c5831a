"""texlora: desk-scale 3D human texture estimation with low-rank attention."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward, grad_check  # noqa: F401
