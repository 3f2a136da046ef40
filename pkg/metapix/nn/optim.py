"""Adam with optional polynomial learning-rate decay."""

from typing import Dict, Iterable, Optional, Sequence, Union

import numpy as np
from loguru import logger

from metapix.core.errors import CheckpointError
from metapix.autodiff import Tensor
from metapix.schemas import OptimizerConfig

GradLike = Union[Tensor, np.ndarray]


class Adam:
    """
    Adam keyed by parameter name.

    Attributes:
        config (OptimizerConfig): base lr, betas, eps and decay settings
        total_steps (Optional[int]): horizon T of the polynomial decay
        t (int): number of accepted steps so far
        m, v (Dict[str, np.ndarray]): first and second moment accumulators
    """

    def __init__(self, config: OptimizerConfig, total_steps: Optional[int] = None, name: str = "adam"):
        self.config = config
        self.total_steps = total_steps
        self.name = name
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def lr(self, t: Optional[int] = None) -> float:
        t = self.t if t is None else t
        base = self.config.lr
        if self.config.decay == "none" or not self.total_steps:
            return base
        remaining = max(0.0, 1.0 - t / self.total_steps)
        return base * remaining ** self.config.power

    def reset(self) -> None:
        self.t = 0
        self.m.clear()
        self.v.clear()

    def step(self, params: Sequence[Tensor], grads: Sequence[GradLike], skip: Iterable[int] = ()) -> bool:
        """
        One bias-corrected Adam update. Parameters whose index is in ``skip``
        (unreachable from the loss) are left untouched.

        Returns False, without touching any state, when a gradient is non-finite.
        """
        skip = set(skip)
        arrays = [g.values if isinstance(g, Tensor) else np.asarray(g) for g in grads]
        bad = [params[i].name for i, g in enumerate(arrays) if i not in skip and not np.all(np.isfinite(g))]
        if bad:
            logger.bind(payload={"optimizer": self.name, "step": self.t, "params": bad[:10]}).warning(
                "Non-finite gradient; update rejected"
            )
            return False

        lr = self.lr()
        beta1, beta2, eps = self.config.beta1, self.config.beta2, self.config.eps
        t = self.t + 1
        correction1 = 1.0 - beta1 ** t
        correction2 = 1.0 - beta2 ** t
        for i, (param, g) in enumerate(zip(params, arrays)):
            if i in skip:
                continue
            key = param.name
            m = self.m.get(key)
            v = self.v.get(key)
            if m is None:
                m = np.zeros_like(param.values)
                v = np.zeros_like(param.values)
            g = g.astype(param.dtype, copy=False)
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * (g * g)
            self.m[key] = m
            self.v[key] = v
            update = (m / correction1) / (np.sqrt(v / correction2) + eps)
            param.values = (param.values - lr * update).astype(param.dtype, copy=False)
        self.t = t
        return True

    def state_tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        tensors = {}
        for key in sorted(self.m):
            tensors[f"{prefix}.m.{key}"] = self.m[key]
            tensors[f"{prefix}.v.{key}"] = self.v[key]
        return tensors

    def state_meta(self) -> dict:
        return {"t": self.t, "keys": sorted(self.m)}

    def load_state(self, prefix: str, tensors: Dict[str, np.ndarray], meta: dict) -> None:
        self.reset()
        self.t = int(meta["t"])
        for key in meta["keys"]:
            try:
                self.m[key] = tensors[f"{prefix}.m.{key}"].copy()
                self.v[key] = tensors[f"{prefix}.v.{key}"].copy()
            except KeyError as exc:
                raise CheckpointError(
                    f"Optimizer state for {key} missing from checkpoint",
                    details={"optimizer": prefix, "key": key},
                ) from exc
