"""Parameter containers and initialisation shared by both networks."""

from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from metapix.core.errors import CheckpointError
from metapix.autodiff import Tensor, get_default_dtype, ops, parameter

KERNEL = 3


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], dtype) -> np.ndarray:
    """He/Kaiming uniform init for relu nets: U(-b, b) with b = sqrt(6 / fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Network:
    """Ordered collection of named parameter tensors."""

    def __init__(self) -> None:
        self.params: Dict[str, Tensor] = {}

    def add_param(self, name: str, values: np.ndarray) -> Tensor:
        tensor = parameter(values, name=name)
        self.params[name] = tensor
        return tensor

    def named_parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = [name for name in self.params if name not in state]
        if missing:
            raise CheckpointError("Checkpoint lacks network parameters", details={"missing": missing[:10]})
        for name, tensor in self.params.items():
            values = np.asarray(state[name])
            if values.shape != tensor.shape:
                raise CheckpointError(
                    f"Parameter {name} has shape {list(values.shape)} in checkpoint, expected {list(tensor.shape)}",
                    details={"name": name},
                )
            tensor.values = values.astype(tensor.dtype, copy=True)
            tensor.grad = None

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def lookup(self, name: str, overrides: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        if overrides is not None and name in overrides:
            return overrides[name]
        return self.params[name]


def add_conv(net: Network, rng: np.random.Generator, names: Iterable[str], c_in: int, c_out: int,
             zero: bool = False) -> None:
    """Create one conv layer's weight and bias under each of ``names`` with identical values."""
    dtype = get_default_dtype()
    shape = (c_out, c_in, KERNEL, KERNEL)
    weight = np.zeros(shape, dtype=dtype) if zero else kaiming_uniform(rng, shape, dtype)
    bias = np.zeros(c_out, dtype=dtype)
    for name in names:
        net.add_param(f"{name}.weight", weight.copy())
        net.add_param(f"{name}.bias", bias.copy())


def conv(net: Network, name: str, x: Tensor, overrides: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    return ops.conv2d(x, net.lookup(f"{name}.weight", overrides), net.lookup(f"{name}.bias", overrides))


def conv_relu(net: Network, name: str, x: Tensor, overrides: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    return ops.relu(conv(net, name, x, overrides))
