from metapix.autodiff.tensor import (
    PRECISIONS,
    Tensor,
    constant,
    default_dtype,
    get_default_dtype,
    parameter,
)
from metapix.autodiff.graph import (
    Gradients,
    Graph,
    PRIMITIVES,
    active_graph,
    apply_primitive,
    backward,
    grad,
    no_grad,
    trace_branches,
)
from metapix.autodiff import primitives  # noqa: F401  (populates PRIMITIVES)
from metapix.autodiff import ops
from metapix.autodiff.ops import differentiable_step

__all__ = [
    "PRECISIONS",
    "PRIMITIVES",
    "Gradients",
    "Graph",
    "Tensor",
    "active_graph",
    "apply_primitive",
    "backward",
    "constant",
    "default_dtype",
    "differentiable_step",
    "get_default_dtype",
    "grad",
    "no_grad",
    "ops",
    "parameter",
    "trace_branches",
]
