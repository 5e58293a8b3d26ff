"""Dense tensors tagged with an allocation category."""

from __future__ import annotations

from enum import Enum

import numpy as np

__all__ = ["AllocCategory", "Tensor", "DTYPES", "dtype_code", "as_array"]


class AllocCategory(str, Enum):
    PARAMETER = "Parameter"
    ACTIVATION = "Activation"
    GRADIENT = "Gradient"
    OPTIMIZER_STATE = "OptimizerState"
    INPUT = "Input"
    SCRATCH = "Scratch"


DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


def dtype_code(dtype) -> str:
    dtype = np.dtype(dtype)
    for code, dt in DTYPES.items():
        if dt == dtype:
            return code
    raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")


class Tensor:
    """Row-major numeric array plus the category it is accounted under.

    The category is fixed at construction.  ``grad`` is filled in by
    :meth:`cabp.autodiff.Tape.backward` for leaves with ``requires_grad``.
    """

    __slots__ = ("data", "_category", "requires_grad", "name", "grad", "__weakref__")

    def __init__(self, data, category: AllocCategory = AllocCategory.SCRATCH, *,
                 requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES[dtype] if isinstance(dtype, str) else dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        dtype_code(arr.dtype)
        self.data = np.ascontiguousarray(arr)
        self._category = AllocCategory(category)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def category(self) -> AllocCategory:
        return self._category

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={dtype_code(self.dtype)}, category={self.category.value}{label})"

    # operator sugar; all of these record on the active tape
    def __add__(self, other):
        from cabp import autodiff
        return autodiff.add(self, other)

    def __mul__(self, other):
        from cabp import autodiff
        if isinstance(other, Tensor):
            return autodiff.mul(self, other)
        return autodiff.scale(self, other)

    __rmul__ = __mul__


def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)
