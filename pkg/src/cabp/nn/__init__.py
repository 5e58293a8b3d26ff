"""Layer kernels and their tape-recording wrappers."""

from cabp.nn.kernels import Conv2dSpec, SavePolicy

__all__ = ["Conv2dSpec", "SavePolicy"]
