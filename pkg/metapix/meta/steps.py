"""
The four training steps.

``pretrain_step`` and ``target_only_step`` are plain supervised updates of the
segmentation network. ``meta_step`` updates the weighting network through one
simulated, differentiable descent step of the segmentation network:

    W        = weight_forward(source image, one-hot source label)
    loss_s   = weighted source CE under theta
    theta+   = theta - alpha * d loss_s / d theta        (kept in the graph)
    loss_t   = target CE under theta+
    phi     <- Adam(phi, d loss_t / d phi)

theta here is the source head plus the shared parameters, so the only path
from loss_t back to phi runs through the shared blocks. theta itself is never
written. ``weighted_train_step`` then trains the segmentation network with the
weight map detached from the graph.
"""

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from loguru import logger

from metapix.core.errors import GraphError
from metapix.autodiff import Graph, Tensor, active_graph, differentiable_step, no_grad
from metapix.data.loader import Batch
from metapix.eval.weight_maps import weight_stats
from metapix.losses import LossValue, joint_loss, one_hot, pixel_ce
from metapix.nn.optim import Adam
from metapix.nn.segnet import SegNet, seg_forward
from metapix.nn.weightnet import WeightNet, weight_forward
from metapix.schemas import IGNORE_ID


@dataclass
class StepResult:
    loss_s: Optional[float] = None
    loss_t: Optional[float] = None
    lr: Optional[float] = None
    w_mean: Optional[float] = None
    w_min: Optional[float] = None
    w_max: Optional[float] = None
    applied: bool = True


def _finite(*losses: Optional[LossValue]) -> bool:
    return all(loss is None or math.isfinite(loss.item()) for loss in losses)


def _update(graph: Graph, total: LossValue, params: List[Tensor], opt: Adam, phase: str,
            result: StepResult) -> StepResult:
    """Differentiate ``total`` for ``params`` and apply one Adam step, or skip on non-finite values."""
    result.lr = opt.lr()
    if not _finite(total):
        logger.bind(payload={"phase": phase, "loss_s": result.loss_s, "loss_t": result.loss_t}).warning(
            "Non-finite loss; step skipped"
        )
        graph.release()
        result.applied = False
        return result
    grads = graph.grad(total.value, params)
    result.applied = opt.step(params, grads, skip=grads.unreachable)
    return result


def pretrain_step(seg: SegNet, opt: Adam, batch_s: Batch, batch_t: Batch,
                  ignore_id: int = IGNORE_ID) -> StepResult:
    """One joint step on unweighted source CE plus target CE."""
    with Graph("pretrain") as graph:
        loss_s = pixel_ce(seg_forward(seg, batch_s.image, "source"), batch_s.label, ignore_id=ignore_id)
        loss_t = pixel_ce(seg_forward(seg, batch_t.image, "target"), batch_t.label, ignore_id=ignore_id)
        result = StepResult(loss_s=loss_s.item(), loss_t=loss_t.item())
        return _update(graph, joint_loss(loss_s, loss_t), seg.parameters(), opt, "pretrain", result)


def target_only_step(seg: SegNet, opt: Adam, batch_t: Batch, ignore_id: int = IGNORE_ID) -> StepResult:
    with Graph("target_only") as graph:
        loss_t = pixel_ce(seg_forward(seg, batch_t.image, "target"), batch_t.label, ignore_id=ignore_id)
        result = StepResult(loss_t=loss_t.item())
        return _update(graph, loss_t, seg.parameters(), opt, "target_only", result)


def weighted_train_step(seg: SegNet, wnet: WeightNet, opt: Adam, batch_s: Batch, batch_t: Batch,
                        ignore_id: int = IGNORE_ID) -> StepResult:
    """One joint step with the source CE weighted by a detached weight map."""
    with no_grad():
        weights = weight_forward(wnet, batch_s.image, one_hot(batch_s.label, seg.num_classes, ignore_id))
    weights = weights.detach()

    with Graph("weighted") as graph:
        logits_s = seg_forward(seg, batch_s.image, "source")
        loss_s = pixel_ce(logits_s, batch_s.label, weights, ignore_id=ignore_id)
        loss_t = pixel_ce(seg_forward(seg, batch_t.image, "target"), batch_t.label, ignore_id=ignore_id)
        result = StepResult(loss_s=loss_s.item(), loss_t=loss_t.item(),
                            **weight_stats(weights.values, batch_s.label, ignore_id))
        linked = [p.name for p in wnet.parameters() if graph.owns(p)]
        if linked:
            raise GraphError("Weighting network parameters entered the weighted-train graph",
                             details={"params": linked[:5]})
        return _update(graph, joint_loss(loss_s, loss_t), seg.parameters(), opt, "weighted", result)


def meta_losses(seg: SegNet, wnet: WeightNet, batch_s: Batch, batch_t: Batch, alpha: float,
                ignore_id: int = IGNORE_ID):
    """
    Forward path of a meta step inside the active graph: returns
    (weights, loss_s, loss_t) with loss_t a function of phi through theta+.
    """
    theta = seg.domain_parameters("source")
    names, params = list(theta), list(theta.values())
    onehot = one_hot(batch_s.label, seg.num_classes, ignore_id)
    weights = weight_forward(wnet, batch_s.image, onehot)
    loss_s = pixel_ce(seg_forward(seg, batch_s.image, "source"), batch_s.label, weights, ignore_id=ignore_id)

    graph = active_graph()
    if graph is None:
        raise GraphError("meta_losses must run inside an active graph")
    grads = graph.grad(loss_s.value, params, create_graph=True)
    stepped = differentiable_step(params, grads, alpha)
    logits_t = seg_forward(seg, batch_t.image, "target", params=dict(zip(names, stepped)))
    loss_t = pixel_ce(logits_t, batch_t.label, ignore_id=ignore_id)
    return weights, loss_s, loss_t


def meta_step(seg: SegNet, wnet: WeightNet, meta_opt: Adam, batch_s: Batch, batch_t: Batch, alpha: float,
              ignore_id: int = IGNORE_ID) -> StepResult:
    """One update of the weighting network; the segmentation network is left bitwise unchanged."""
    phi = wnet.parameters()
    with Graph("meta") as graph:
        weights, loss_s, loss_t = meta_losses(seg, wnet, batch_s, batch_t, alpha, ignore_id)
        result = StepResult(loss_s=loss_s.item(), loss_t=loss_t.item(), lr=meta_opt.lr(),
                            **weight_stats(weights.values, batch_s.label, ignore_id))
        if not _finite(loss_s, loss_t):
            logger.bind(payload={"loss_s": result.loss_s, "loss_t": result.loss_t}).warning(
                "Non-finite meta loss; weighting network update skipped"
            )
            graph.release()
            result.applied = False
            return result
        meta_grads = graph.grad(loss_t.value, phi)

    bad = [p.name for p, g in zip(phi, meta_grads) if not np.all(np.isfinite(g.values))]
    if bad:
        logger.bind(payload={"loss_s": result.loss_s, "loss_t": result.loss_t, "params": bad[:10]}).warning(
            "Non-finite meta-gradient; weighting network update skipped"
        )
        result.applied = False
        return result
    result.applied = meta_opt.step(phi, meta_grads, skip=meta_grads.unreachable)
    return result
