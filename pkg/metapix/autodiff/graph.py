"""
Explicit computation graphs and reverse-mode differentiation.

Graphs are created per training step and used as context managers::

    with Graph("meta") as g:
        loss = ...
        grads = g.grad(loss, params, create_graph=True)

There is no global tape. A primitive applied to an input that requires a
gradient outside any active graph is rejected, unless recording was switched
off explicitly with ``no_grad()`` (evaluation, detached weight maps).

Backward rules are written with the same primitives as the forwards, so with
``create_graph=True`` the backward pass is itself recorded and can be
differentiated again.
"""

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from metapix.core.errors import GraphError
from metapix.autodiff.tensor import Tensor

LEAF = "leaf"

_ACTIVE: ContextVar[Optional["Graph"]] = ContextVar("metapix_active_graph", default=None)
_RECORDING: ContextVar[bool] = ContextVar("metapix_recording", default=True)
_BRANCHES: ContextVar[Optional[List[np.ndarray]]] = ContextVar("metapix_branches", default=None)

PRIMITIVES: Dict[str, Any] = {}


def register(name: str):
    """Class decorator adding a primitive to the registry."""
    def wrap(cls):
        instance = cls()
        instance.name = name
        PRIMITIVES[name] = instance
        return cls
    return wrap


@dataclass(eq=False)
class Node:
    graph: "Graph"
    index: int
    kind: str
    inputs: Tuple[Tensor, ...]
    parents: Tuple[Optional[int], ...]
    output: Tensor
    attrs: Dict[str, Any] = field(default_factory=dict)
    saved: Dict[str, Any] = field(default_factory=dict)


class Gradients(list):
    """List of gradients aligned with ``wrt``; ``unreachable`` holds the indices
    of targets the output does not depend on (their entries are zeros)."""

    def __init__(self, *args: Any):
        super().__init__(*args)
        self.unreachable: List[int] = []


def active_graph() -> Optional["Graph"]:
    return _ACTIVE.get()


def is_recording() -> bool:
    return _RECORDING.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate primitives without recording, whatever their inputs require."""
    token = _RECORDING.set(False)
    try:
        yield
    finally:
        _RECORDING.reset(token)


@contextmanager
def trace_branches() -> Iterator[List[np.ndarray]]:
    """
    Collect the branch pattern of every branching primitive (relu, maxpool2)
    evaluated inside the block, in evaluation order.
    """
    trace: List[np.ndarray] = []
    token = _BRANCHES.set(trace)
    try:
        yield trace
    finally:
        _BRANCHES.reset(token)


class Graph:
    """Append-only record of primitive applications, in topological order."""

    def __init__(self, name: str = "graph"):
        self.name = name
        self.nodes: List[Node] = []
        self.released = False
        self._tokens: List[Any] = []

    def __enter__(self) -> "Graph":
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc: Any) -> bool:
        _ACTIVE.reset(self._tokens.pop())
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def owns(self, tensor: Tensor) -> bool:
        return tensor.node is not None and tensor.node.graph is self

    def _append(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    def link_leaf(self, tensor: Tensor) -> Node:
        node = Node(self, len(self.nodes), LEAF, (), (), tensor)
        tensor.node = node
        return self._append(node)

    def record(
        self,
        kind: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        attrs: Dict[str, Any],
        saved: Dict[str, Any],
    ) -> Node:
        if self.released:
            raise GraphError(
                f"Graph '{self.name}' was released; pass retain=True to keep it",
                details={"primitive": kind},
            )
        for tensor in inputs:
            if tensor.requires_grad and not self.owns(tensor):
                self.link_leaf(tensor)
        parents = tuple(t.node.index if t.requires_grad else None for t in inputs)
        node = Node(self, len(self.nodes), kind, tuple(inputs), parents, output, attrs, saved)
        output.node = node
        return self._append(node)

    def release(self) -> None:
        self.released = True
        self.nodes = []

    @contextmanager
    def _backward_scope(self, create_graph: bool) -> Iterator[None]:
        graph_token = _ACTIVE.set(self)
        record_token = _RECORDING.set(create_graph)
        try:
            yield
        finally:
            _RECORDING.reset(record_token)
            _ACTIVE.reset(graph_token)

    def grad(
        self,
        output: Tensor,
        wrt: Iterable[Tensor],
        *,
        retain: bool = False,
        create_graph: bool = False,
    ) -> Gradients:
        """
        Reverse-mode gradient of a scalar ``output`` with respect to ``wrt``.

        With ``create_graph`` the returned gradients are graph-linked and can be
        differentiated again; it implies ``retain``. Without ``retain`` the
        graph is released afterwards.
        """
        from metapix.autodiff import ops

        wrt = list(wrt)
        if output.size != 1:
            raise GraphError(
                "grad requires a scalar output",
                details={"shape": list(output.shape)},
            )
        if self.released:
            raise GraphError(f"Graph '{self.name}' was released; pass retain=True to keep it")
        for position, tensor in enumerate(wrt):
            if not tensor.requires_grad:
                raise GraphError(
                    "grad target does not require a gradient",
                    details={"index": position, "name": tensor.name},
                )

        grads: Dict[int, Tensor] = {}
        wanted = {t.node.index for t in wrt if self.owns(t)}
        if self.owns(output):
            grads[output.node.index] = Tensor(np.ones_like(output.values))
            with self._backward_scope(create_graph):
                for node in reversed(self.nodes[: output.node.index + 1]):
                    upstream = grads.get(node.index)
                    if upstream is None or node.kind == LEAF:
                        continue
                    if node.index not in wanted:
                        del grads[node.index]
                    input_grads = PRIMITIVES[node.kind].backward(upstream, node)
                    for parent, input_grad in zip(node.parents, input_grads):
                        if parent is None or input_grad is None:
                            continue
                        previous = grads.get(parent)
                        grads[parent] = input_grad if previous is None else ops.add(previous, input_grad)

        result = Gradients()
        for position, tensor in enumerate(wrt):
            found = grads.get(tensor.node.index) if self.owns(tensor) else None
            if found is None:
                result.unreachable.append(position)
                found = Tensor(np.zeros_like(tensor.values))
            result.append(found)

        if result.unreachable:
            logger.bind(payload=[wrt[i].name for i in result.unreachable]).debug(
                f"{len(result.unreachable)} gradient target(s) unreachable from output; zeros returned"
            )
        if not retain and not create_graph:
            self.release()
        return result


def grad(
    output: Tensor,
    wrt: Iterable[Tensor],
    *,
    retain: bool = False,
    create_graph: bool = False,
) -> Gradients:
    """Gradient of ``output`` through the graph that produced it."""
    wrt = list(wrt)
    graph = output.node.graph if output.node is not None else active_graph()
    if graph is None:
        if output.size != 1:
            raise GraphError("grad requires a scalar output", details={"shape": list(output.shape)})
        result = Gradients(Tensor(np.zeros_like(t.values)) for t in wrt)
        result.unreachable = list(range(len(wrt)))
        return result
    return graph.grad(output, wrt, retain=retain, create_graph=create_graph)


def backward(output: Tensor, params: Sequence[Tensor]) -> Gradients:
    """First-order gradient, accumulated into each parameter's ``.grad``."""
    result = grad(output, params)
    for position, (param, gradient) in enumerate(zip(params, result)):
        if position in result.unreachable:
            continue
        param.grad = gradient.values.copy() if param.grad is None else param.grad + gradient.values
    return result


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: Optional[Dict[str, Any]] = None) -> Tensor:
    """
    Evaluate a registered primitive and record it in the active graph when any
    input requires a gradient.
    """
    primitive = PRIMITIVES.get(kind)
    if primitive is None:
        raise GraphError(f"Unknown primitive '{kind}'")
    attrs = attrs or {}
    primitive.check(kind, [t.shape for t in inputs], attrs)
    values, saved = primitive.forward(*(t.values for t in inputs), **attrs)
    trace = _BRANCHES.get()
    if trace is not None and primitive.branching:
        trace.append(saved["mask"] != 0)
    output = Tensor(values, dtype=values.dtype)

    if not any(t.requires_grad for t in inputs) or not _RECORDING.get():
        return output

    graph = _ACTIVE.get()
    if graph is None:
        raise GraphError(
            f"Primitive '{kind}' received an input that requires a gradient, but no graph is active",
            details={"primitive": kind, "inputs": [t.name for t in inputs if t.requires_grad]},
        )
    output.requires_grad = True
    graph.record(kind, inputs, output, attrs, saved)
    return output
