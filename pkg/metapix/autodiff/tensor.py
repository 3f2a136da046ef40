"""
Tensor values for the differentiable computation engine.

A Tensor is a numpy array plus the bookkeeping the engine needs: whether it
requires a gradient, the graph node that produced it (or the leaf node that
links it into the active graph), and an optional accumulated gradient.
"""

from contextlib import contextmanager
from contextvars import ContextVar
from typing import Any, Iterator, Optional, Tuple

import numpy as np

_DEFAULT_DTYPE: ContextVar[Any] = ContextVar("metapix_default_dtype", default=np.float32)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


def get_default_dtype() -> Any:
    return _DEFAULT_DTYPE.get()


@contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Temporarily switch the default floating dtype, e.g. to float64 for oracles."""
    token = _DEFAULT_DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


def _coerce(values: Any, dtype: Any) -> np.ndarray:
    if dtype is None:
        if isinstance(values, (np.ndarray, np.generic)) and values.dtype.kind == "f":
            dtype = values.dtype
        else:
            dtype = get_default_dtype()
    return np.asarray(values, dtype=dtype)


class Tensor:
    """
    n-dimensional floating array participating in a computation graph.

    Attributes:
        values (np.ndarray): the data; never mutated in place once created
        requires_grad (bool): gradients flow to this tensor
        node: link into the graph that produced or registered it
        grad (Optional[np.ndarray]): accumulated gradient, same shape as values
        name (Optional[str]): parameter name, for diagnostics
    """

    __slots__ = ("values", "requires_grad", "node", "grad", "name")

    def __init__(
        self,
        values: Any,
        *,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Any = None,
    ):
        self.values = _coerce(values, dtype)
        self.requires_grad = requires_grad
        self.node = None
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        """A graph-free tensor sharing the same values."""
        return Tensor(self.values, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; everything routes through recorded primitives.

    def __add__(self, other: Any) -> "Tensor":
        from metapix.autodiff import ops
        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from metapix.autodiff import ops
        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.shift(self, -float(other))

    def __rsub__(self, other: Any) -> "Tensor":
        from metapix.autodiff import ops
        return ops.shift(ops.neg(self), float(other))

    def __mul__(self, other: Any) -> "Tensor":
        from metapix.autodiff import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        from metapix.autodiff import ops
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        from metapix.autodiff import ops
        return ops.neg(self)


def constant(values: Any, dtype: Any = None) -> Tensor:
    """A tensor that never requires a gradient."""
    return Tensor(values, dtype=dtype)


def parameter(values: Any, name: Optional[str] = None, dtype: Any = None) -> Tensor:
    """A leaf tensor that requires a gradient."""
    return Tensor(values, requires_grad=True, name=name, dtype=dtype)
