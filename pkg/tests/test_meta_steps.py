import numpy as np
import pytest

from metapix.core.errors import GraphError
from metapix.autodiff import Graph, no_grad, ops
from metapix.data import Batch
from metapix.losses import joint_loss, pixel_ce
from metapix.meta import meta_losses, meta_step, pretrain_step, target_only_step, weighted_train_step
from metapix.nn import Adam, build_seg_net, build_weight_net, seg_forward
from metapix.schemas import OptimizerConfig

WIDTHS = [4, 4, 4, 4, 4]
WEIGHT_WIDTHS = [4, 4, 4, 4]


def _snapshot(net):
    return {name: values.tobytes() for name, values in net.state_dict().items()}


def _changed(before, net):
    return {name for name, raw in _snapshot(net).items() if raw != before[name]}


@pytest.fixture
def nets(f64):
    seg = build_seg_net(3, 1, WIDTHS, seed=0)
    wnet = build_weight_net(3, WEIGHT_WIDTHS, seed=1)
    return seg, wnet


@pytest.fixture
def batches(f64, tiny_data):
    return [(tiny_data.load_batch("source", [i]), tiny_data.load_batch("target_train", [i % 4])) for i in range(4)]


def _adam():
    return Adam(OptimizerConfig(lr=1e-3, decay="none"))


def test_meta_step_restores_segmentation_parameters(nets, batches):
    seg, wnet = nets
    opt = _adam()
    before = _snapshot(seg)
    for batch_s, batch_t in batches:
        result = meta_step(seg, wnet, opt, batch_s, batch_t, alpha=1e-3)
        assert result.applied
        assert _snapshot(seg) == before


def test_meta_step_moves_the_weighting_network(nets, batches):
    seg, wnet = nets
    before = _snapshot(wnet)
    result = meta_step(seg, wnet, _adam(), *batches[0], alpha=1e-3)
    assert {"head.weight", "head.bias"} <= _changed(before, wnet)
    assert result.w_min == result.w_max == 0.5
    assert result.loss_s is not None and result.loss_t is not None


def test_zero_inner_rate_gives_zero_meta_gradient(nets, batches):
    seg, wnet = nets
    batch_s, batch_t = batches[0]
    with Graph("check") as graph:
        _, _, loss_t = meta_losses(seg, wnet, batch_s, batch_t, alpha=0.0)
        grads = graph.grad(loss_t.value, wnet.parameters())
    for g in grads:
        np.testing.assert_array_equal(g.values, np.zeros_like(g.values))

    before = _snapshot(wnet)
    assert meta_step(seg, wnet, _adam(), batch_s, batch_t, alpha=0.0).applied
    assert _snapshot(wnet) == before


def test_weighted_step_trains_only_the_segmentation_network(nets, batches):
    seg, wnet = nets
    seg_before, w_before = _snapshot(seg), _snapshot(wnet)
    weighted_train_step(seg, wnet, _adam(), *batches[0])
    assert _snapshot(wnet) == w_before
    assert _changed(seg_before, seg)


def test_zero_weights_freeze_the_source_head(f64, batches):
    seg = build_seg_net(3, 1, WIDTHS, seed=0)
    wnet = build_weight_net(3, WEIGHT_WIDTHS, seed=1, zero_head=False).clamp_to(0.0)
    source_head = set(seg.head_parameters("source"))
    before = _snapshot(seg)
    opt = _adam()
    for batch_s, batch_t in batches:
        result = weighted_train_step(seg, wnet, opt, batch_s, batch_t)
        assert result.applied
        assert result.loss_s == 0.0
    changed = _changed(before, seg)
    assert not changed & source_head
    assert changed & set(seg.shared_parameters())
    assert all(p.grad is None for p in wnet.parameters())


def test_weighted_step_rejects_a_graph_that_reaches_phi(nets, batches, monkeypatch):
    seg, wnet = nets

    def leaking_forward(net, image, domain, params=None):
        logits = seg_forward(net, image, domain, params)
        leak = ops.scale(ops.sum(wnet.params["head.bias"]), 0.0)
        return ops.add(logits, ops.fill(leak, logits.shape))

    monkeypatch.setattr("metapix.meta.steps.seg_forward", leaking_forward)
    before = _snapshot(seg)
    with pytest.raises(GraphError):
        weighted_train_step(seg, wnet, _adam(), *batches[0])
    assert _snapshot(seg) == before


def test_unit_weights_reproduce_the_joint_step(f64, batches):
    plain = build_seg_net(3, 1, WIDTHS, seed=0)
    weighted = build_seg_net(3, 1, WIDTHS, seed=0)
    wnet = build_weight_net(3, WEIGHT_WIDTHS, seed=1, zero_head=False).clamp_to(1.0)
    opt_a, opt_b = _adam(), _adam()
    for batch_s, batch_t in batches:
        a = pretrain_step(plain, opt_a, batch_s, batch_t)
        b = weighted_train_step(weighted, wnet, opt_b, batch_s, batch_t)
        assert a.loss_s == b.loss_s
        assert b.w_mean == 1.0
    assert _snapshot(plain) == _snapshot(weighted)


def test_target_only_step_leaves_source_head_alone(nets, batches):
    seg, _ = nets
    before = _snapshot(seg)
    target_only_step(seg, _adam(), batches[0][1])
    changed = _changed(before, seg)
    assert not any(name.startswith("source.") for name in changed)
    assert any(name.startswith("target.") for name in changed)


def test_meta_losses_need_a_graph(nets, batches):
    seg, wnet = nets
    with pytest.raises(GraphError):
        meta_losses(seg, wnet, *batches[0], alpha=1e-3)


def test_non_finite_loss_skips_the_update(nets, batches, log_records):
    seg, wnet = nets
    bias = seg.params["shared.decoder.out.bias"]
    bias.values = np.full_like(bias.values, np.nan)
    seg_before, w_before = _snapshot(seg), _snapshot(wnet)

    assert not meta_step(seg, wnet, _adam(), *batches[0], alpha=1e-3).applied
    assert not pretrain_step(seg, _adam(), *batches[0]).applied
    assert _snapshot(wnet) == w_before
    assert _snapshot(seg) == seg_before
    assert any(r["level"].name == "WARNING" for r in log_records)


@pytest.mark.slow
def test_hundred_step_audit(f64, tiny_data):
    """Segmentation parameters never move in a meta step; the weighting network never moves otherwise."""
    seg = build_seg_net(3, 1, WIDTHS, seed=0)
    wnet = build_weight_net(3, WEIGHT_WIDTHS, seed=1)
    seg_opt, meta_opt = _adam(), _adam()
    rng = np.random.default_rng(0)
    for step in range(100):
        batch_s = tiny_data.load_batch("source", [int(rng.integers(20))])
        batch_t = tiny_data.load_batch("target_train", [int(rng.integers(4))])
        seg_before, w_before = _snapshot(seg), _snapshot(wnet)
        if step % 2 == 0:
            meta_step(seg, wnet, meta_opt, batch_s, batch_t, alpha=1e-3)
            assert _snapshot(seg) == seg_before
        else:
            weighted_train_step(seg, wnet, seg_opt, batch_s, batch_t)
            assert _snapshot(wnet) == w_before


def test_source_step_reaches_the_target_through_shared_blocks(nets, batches):
    seg, _ = nets
    batch_s, batch_t = batches[0]
    with no_grad():
        target_before = seg_forward(seg, batch_t.image, "target").values.copy()
    before = _snapshot(seg)
    with Graph("source-only") as graph:
        loss = pixel_ce(seg_forward(seg, batch_s.image, "source"), batch_s.label)
        params = list(seg.domain_parameters("source").values())
        grads = graph.grad(loss.value, params)
    assert _adam().step(params, grads, skip=grads.unreachable)

    changed = _changed(before, seg)
    assert not changed & set(seg.head_parameters("target"))
    assert changed & set(seg.shared_parameters())
    with no_grad():
        target_after = seg_forward(seg, batch_t.image, "target").values
    assert not np.array_equal(target_before, target_after)


def test_fully_shared_network_counts_the_target_loss_twice(f64, batches):
    seg = build_seg_net(3, 0, WIDTHS, seed=0)
    _, batch_t = batches[0]
    as_source = Batch(image=batch_t.image, label=batch_t.label, domain="source", indices=batch_t.indices)
    with no_grad():
        loss_s = pixel_ce(seg_forward(seg, as_source.image, "source"), as_source.label)
        loss_t = pixel_ce(seg_forward(seg, batch_t.image, "target"), batch_t.label)
        total = joint_loss(loss_s, loss_t)
    assert total.item() == 2.0 * loss_t.item()

    result = pretrain_step(seg, _adam(), as_source, batch_t)
    assert result.loss_s == result.loss_t == loss_t.item()


def test_pretraining_lowers_the_loss(f64, batches):
    seg = build_seg_net(3, 1, WIDTHS, seed=0)
    opt = _adam()
    batch_s, batch_t = batches[0]
    totals = [sum((r.loss_s, r.loss_t)) for r in (pretrain_step(seg, opt, batch_s, batch_t) for _ in range(40))]
    assert totals[-1] < totals[0]


def test_unshared_network_target_training_keeps_source_bitwise(f64, batches):
    seg = build_seg_net(3, 5, WIDTHS, seed=0)
    assert not seg.shared_parameters()
    source = {name: t.values.tobytes() for name, t in seg.head_parameters("source").items()}
    opt = _adam()
    for _, batch_t in batches:
        assert target_only_step(seg, opt, batch_t).applied
    assert {name: t.values.tobytes() for name, t in seg.head_parameters("source").items()} == source
