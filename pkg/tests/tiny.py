"""Reduced-size networks for gradient checks: d=8, T=6, a 6-joint body graph."""
import numpy as np

from signseg import models as M
from signseg import tensor as tc
from signseg import training as tr
from signseg.skeleton import JointGraph

D = 8
T = 6
JOINTS = 6


def tiny_graph() -> JointGraph:
    return JointGraph(tuple(f"j{i}" for i in range(JOINTS)), ((0, 1), (1, 2), (2, 3), (1, 4), (4, 5)))


def tiny_nets(seed: int):
    seg = M.SegmentationNetwork(M.SegConfig(channels=(4, 4, 4, 4, 6, 6, 6, D, D, D), kernel=3,
                                            head_channels=D, seed=seed), tiny_graph().a_hat)
    hand = M.HandshapeNetwork(M.HandConfig(channels=(4, 6, D), num_classes=5, seed=seed))
    fusion = M.FusionModule(M.FusionConfig(dim=D, gate_init=0.3, seed=seed))
    # zero biases put dead-unit rows exactly on the relu kink; move them off it
    rng = np.random.default_rng([seed, 79])
    for net in (seg, hand):
        for k, p in net.params.items():
            if k.endswith("_b"):
                p.data = rng.normal(scale=0.1, size=p.shape)
    return seg, hand, fusion


def tiny_instance(seed: int, batch: int = 2):
    rng = np.random.default_rng([seed, 77])
    x = rng.normal(size=(batch, T, JOINTS, 6))
    hands = rng.normal(size=(batch, T, 21, 2))
    mask = np.ones((batch, T), dtype=bool)
    mask[-1, T - 2:] = False
    labels = rng.integers(1, 4, size=(batch, T))
    labels[~mask] = 0
    return x, hands, mask, labels


def fused_loss_fn(seg, hand, fusion, x, hands, mask, labels):
    def loss():
        logits = M.fused_seg_forward(seg, hand, fusion, x, mask, hands=hands, train=True, freeze_hand=False)
        return tr.seg_loss(logits, labels, tr.LossConfig(), mask)[0]

    return loss


def check_fused_gradients(seed: int, coords: int = 4) -> float:
    """Worst relative error over random directions per network section and single coordinates."""
    seg, hand, fusion = tiny_nets(seed)
    x, hands, mask, labels = tiny_instance(seed)
    x_t = tc.parameter(x)
    fn = fused_loss_fn(seg, hand, fusion, x_t, hands, mask, labels)
    groups = [
        [p for k, p in seg.params.items() if not k.startswith("head.")],
        seg.head_parameters(),
        hand.parameters(),
        fusion.parameters(),
        [x_t],
    ]
    everything = [p for g in groups for p in g]
    rng = np.random.default_rng([seed, 78])
    worst = 0.0
    for group in groups + [everything]:
        direction = [rng.normal(size=p.shape) for p in group]
        norm = np.sqrt(sum(np.sum(d * d) for d in direction))
        direction = [d / norm for d in direction]
        worst = max(worst, tc.directional_grad_check(fn, group, direction))
    sizes = np.array([p.data.size for p in everything])
    for _ in range(coords):
        which = rng.choice(len(everything), p=sizes / sizes.sum())
        p = everything[which]
        d = np.zeros(p.shape)
        d.flat[rng.integers(p.data.size)] = 1.0
        worst = max(worst, tc.directional_grad_check(fn, [p], [d]))
    return worst
