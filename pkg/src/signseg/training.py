"""Losses, Adam, and the three training stages.

Stage 1 trains the segmentation network alone, stage 2 the handshape
network, stage 3 the fusion module plus the segmentation head on top of a
frozen handshape branch (optionally also the whole segmentation backbone).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import metrics
from . import tensor as tc
from .models import (
    STGCN_CHANNELS,
    FusionModule,
    GlossClassifier,
    HandshapeNetwork,
    SegmentationNetwork,
    fused_seg_forward,
    hand_input,
    pad_segments,
    parameter_checksum,
)
from .skeleton import (
    B,
    O,
    P,
    block_to_hand,
    hand_to_block,
    normalize_hand_frames,
    pad_to_length,
    prepare_sequence,
    split_windows,
)
from .tensor import Tensor


# ---------------------------------------------------------------------------
# configs

@dataclass
class LossConfig:
    class_weights: tuple = (0.1, 1.0, 1.0, 5.0)
    boundary_lambda: float = 0.1

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if len(self.class_weights) != 4 or min(self.class_weights) < 0:
            raise ValueError("class_weights must be 4 nonnegative numbers (P, O, I, B)")
        if self.boundary_lambda < 0:
            raise ValueError("boundary_lambda must be nonnegative")


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    seed: int = 0
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    t_max: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    flip_prob: float = 0.5
    seg_channels: tuple = STGCN_CHANNELS
    head_channels: int = 256
    hand_channels: tuple = (64, 128, 256)
    hand_epochs: int = 30
    hand_batch_size: int = 64
    hand_val_fraction: float = 0.2
    hand_roundtrip: bool = True
    hand_rotate: float = 0.3
    full_branch: bool = False
    gloss_epochs: int = 30
    gloss_batch_size: int = 32
    gloss_channels: tuple = (32, 64, 64)
    stop_frame_accuracy: float | None = None
    stop_loss: float | None = None
    lr_schedule: str = "constant"

    def __post_init__(self):
        self.seg_channels = tuple(int(c) for c in self.seg_channels)
        self.hand_channels = tuple(int(c) for c in self.hand_channels)
        self.gloss_channels = tuple(int(c) for c in self.gloss_channels)
        for name in ("learning_rate", "epochs", "batch_size", "t_max", "adam_eps", "head_channels",
                     "hand_epochs", "hand_batch_size", "gloss_epochs", "gloss_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be a probability")
        if self.hand_rotate < 0:
            raise ValueError("hand_rotate must be non-negative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0 < self.hand_val_fraction < 1:
            raise ValueError("hand_val_fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# losses

def frame_loss(logits, labels, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    return tc.cross_entropy(logits, np.asarray(labels, dtype=np.int64), cfg.class_weights)


def _batched(probs: Tensor, labels, mask):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        probs = tc.reshape(probs, (1,) + probs.shape)
        labels = labels[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if mask is None:
        mask = labels != P
    return probs, labels, np.asarray(mask, dtype=np.float64)


def boundary_count_loss(probs, labels, mask=None) -> Tensor:
    """Mean over utterances of ``|sum_t p_B(t) - #B|``, padding frames excluded."""
    probs, labels, mask = _batched(tc.as_tensor(probs), labels, mask)
    n_true = (labels == B).sum(axis=1).astype(np.float64)
    n_soft = tc.sum(probs[..., B] * mask, axis=1)
    return tc.mean(tc.absolute(n_soft - n_true))


def seg_loss(logits, labels, cfg: LossConfig | None = None, mask=None) -> tuple[Tensor, dict]:
    """``frame_loss + lambda * boundary_count_loss``; also returns the component values."""
    cfg = cfg or LossConfig()
    logits = tc.as_tensor(logits)
    lf = frame_loss(logits, labels, cfg)
    if cfg.boundary_lambda == 0:
        return lf, {"frame_loss": float(lf.data), "boundary_loss": None}
    lb = boundary_count_loss(tc.softmax(logits, axis=-1), labels, mask)
    return lf + cfg.boundary_lambda * lb, {"frame_loss": float(lf.data), "boundary_loss": float(lb.data)}


def handshape_loss(logits, labels) -> Tensor:
    return tc.cross_entropy(logits, np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState,
              lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update of ``params`` in place.  ``None`` grads count as zero."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter, gradient and state lists differ in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError("optimizer state does not match parameter shapes")
        if g is None:
            g = 0.0
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamState.zeros_like([p.data for p in params])
        self.lr = cfg.learning_rate

    def set_epoch(self, epoch: int, total: int) -> None:
        """Cosine decay goes from the base rate at epoch 0 to zero after ``total`` epochs."""
        base = self.cfg.learning_rate
        self.lr = base if self.cfg.lr_schedule == "constant" else 0.5 * base * (1 + math.cos(math.pi * epoch / total))

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, (self.cfg.beta1, self.cfg.beta2), self.cfg.adam_eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# data

@dataclass
class SegData:
    """Padded, normalized stream batch with ground truth."""

    x: np.ndarray                    # (N, T, J, 6)
    mask: np.ndarray                 # (N, T) bool
    labels: np.ndarray               # (N, T), P on padding
    x_flip: np.ndarray | None = None
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)

    def gt_spans(self) -> list:
        return [metrics.decode_bio(lab[:n]) for lab, n in zip(self.labels, self.lengths)]

    def subset(self, idx) -> "SegData":
        idx = np.asarray(idx)
        return SegData(self.x[idx], self.mask[idx], self.labels[idx],
                       None if self.x_flip is None else self.x_flip[idx], [self.ids[i] for i in idx])


def build_seg_data(items, t_max: int, with_flip: bool = True) -> SegData:
    """``items`` are ``(PoseSequence, labels)`` pairs; long streams are windowed."""
    xs, xf, ms, ls, ids = [], [], [], [], []
    for pose, labels in items:
        variants = [False, True] if with_flip else [False]
        per_flip = []
        for flip in variants:
            f, lab = prepare_sequence(pose, labels, None, flip)
            per_flip.append(split_windows(f, lab, t_max))
        for w, (f, lab) in enumerate(per_flip[0]):
            fp, lp = pad_to_length(f, lab, t_max)
            xs.append(fp.channels_last())
            ms.append(fp.mask)
            ls.append(lp)
            ids.append(pose.source_id if len(per_flip[0]) == 1 else f"{pose.source_id}#{w}")
            if with_flip:
                ff, _ = per_flip[1][w]
                xf.append(pad_to_length(ff, lab, t_max)[0].channels_last())
    if not xs:
        raise ValueError("empty dataset")
    return SegData(np.stack(xs), np.stack(ms).astype(bool), np.stack(ls).astype(np.int64),
                   np.stack(xf) if with_flip else None, ids)


def roundtrip_hands(hands: np.ndarray) -> np.ndarray:
    """Hands as the fused pipeline sees them: through the 10-joint body block and back."""
    return normalize_hand_frames(block_to_hand(hand_to_block(hands)))


def rotate_hands(hands: np.ndarray, rng: np.random.Generator, max_angle: float) -> np.ndarray:
    """Rotate each sample by a uniform angle in ``[-max_angle, max_angle]`` and renormalize."""
    if max_angle == 0:
        return hands
    a = rng.uniform(-max_angle, max_angle, size=hands.shape[:-2])
    c, s = np.cos(a)[..., None], np.sin(a)[..., None]
    x, y = hands[..., 0], hands[..., 1]
    return normalize_hand_frames(np.stack([c * x - s * y, s * x + c * y], axis=-1))


# ---------------------------------------------------------------------------
# evaluation helpers

def decode_predictions(pred: np.ndarray, lengths) -> list:
    out = []
    for lab, n in zip(pred, lengths):
        lab = np.where(lab[:n] == P, O, lab[:n])
        out.append(metrics.decode_bio(lab))
    return out


def predict_labels(logit_fn: Callable, n: int, batch_size: int) -> np.ndarray:
    chunks = []
    with tc.no_grad():
        for s in range(0, n, batch_size):
            chunks.append(np.argmax(logit_fn(np.arange(s, min(n, s + batch_size))).data, axis=-1))
    return np.concatenate(chunks)


def seg_scores(pred: np.ndarray, data: SegData) -> dict:
    spans = decode_predictions(pred, data.lengths)
    gt = data.gt_spans()
    mf1b = metrics.mf1b([metrics.boundaries(s) for s in spans], [metrics.boundaries(g) for g in gt])
    return {
        "mf1b": mf1b,
        "mf1s": metrics.mf1s(spans, gt),
        "frame_accuracy": metrics.frame_accuracy(pred, data.labels, data.mask),
    }


def segment(seg: SegmentationNetwork, data: SegData, batch_size: int = 16) -> np.ndarray:
    return predict_labels(lambda i: seg.forward(data.x[i], data.mask[i])[1], len(data), batch_size)


def segment_fused(seg, hand, fusion, data: SegData, batch_size: int = 16, gate=None) -> np.ndarray:
    return predict_labels(lambda i: fused_seg_forward(seg, hand, fusion, data.x[i], data.mask[i], gate=gate),
                          len(data), batch_size)


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_metric: float | None
    state: dict


def _hard_gap(pred: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    n_pred = ((pred == B) & mask).sum(axis=1)
    return float(np.mean(np.abs(n_pred - (labels == B).sum(axis=1))))


def _select(history_entry: dict, key: str, best: float | None) -> bool:
    v = history_entry.get(key)
    return v is not None and (best is None or v > best)


def _seg_epochs(cfg: TrainConfig, loss_cfg: LossConfig, train: SegData, val: SegData | None,
                opt: Adam, forward: Callable, evaluate: Callable, snapshot: Callable,
                log: Callable | None, use_flip: bool, extra: Callable | None = None) -> TrainResult:
    n = len(train)
    history, best, best_epoch, best_state = [], None, -1, None
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch, cfg.epochs)
        rng = np.random.default_rng([cfg.seed, 101, epoch])
        order = rng.permutation(n)
        flips = rng.random(n) < cfg.flip_prob if use_flip and train.x_flip is not None else np.zeros(n, bool)
        tot = {"loss": 0.0, "frame_loss": 0.0, "boundary_loss": 0.0}
        correct = frames = 0
        gaps = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb = np.where(flips[idx, None, None, None], train.x_flip[idx], train.x[idx]) if flips.any() \
                else train.x[idx]
            mb, lb = train.mask[idx], train.labels[idx]
            opt.zero_grad()
            logits = forward(xb, mb, idx)
            loss, parts = seg_loss(logits, lb, loss_cfg, mb)
            tc.backward(loss)
            opt.step()
            w = len(idx) / n
            tot["loss"] += w * float(loss.data)
            tot["frame_loss"] += w * parts["frame_loss"]
            tot["boundary_loss"] += w * (parts["boundary_loss"] or 0.0)
            pred = np.argmax(logits.data, axis=-1)
            correct += int(((pred == lb) & mb).sum())
            frames += int(mb.sum())
            gaps.append(_hard_gap(pred, lb, mb) * len(idx))
        entry = {"epoch": epoch, **tot, "train_frame_accuracy": correct / frames,
                 "hard_boundary_gap": sum(gaps) / n}
        if extra is not None:
            entry.update(extra())
        if val is not None:
            scores = evaluate(val)
            entry.update({f"val_{k}": v for k, v in scores.items()})
            if _select(entry, "val_mf1b", best):
                best, best_epoch, best_state = entry["val_mf1b"], epoch, snapshot()
        else:
            best_epoch, best_state = epoch, snapshot()
        history.append(entry)
        if log is not None:
            log(entry)
        if (cfg.stop_frame_accuracy is not None and cfg.stop_loss is not None
                and entry["train_frame_accuracy"] > cfg.stop_frame_accuracy and entry["loss"] < cfg.stop_loss):
            break
    return TrainResult(history, best_epoch, best, best_state)


# ---------------------------------------------------------------------------
# stages

def train_stage1(seg: SegmentationNetwork, train: SegData, val: SegData | None = None,
                 cfg: TrainConfig | None = None, loss_cfg: LossConfig | None = None,
                 log: Callable | None = None) -> TrainResult:
    """Segmentation network alone; keeps the epoch with the best held-out mF1B."""
    cfg, loss_cfg = cfg or TrainConfig(), loss_cfg or LossConfig()
    if len(train) == 0:
        raise ValueError("empty training set")
    opt = Adam(seg.parameters(), cfg)
    result = _seg_epochs(
        cfg, loss_cfg, train, val, opt,
        forward=lambda x, m, idx: seg.forward(x, m, train=True)[1],
        evaluate=lambda d: seg_scores(segment(seg, d), d),
        snapshot=seg.state_dict, log=log, use_flip=True)
    seg.load_state_dict(result.state)
    return result


def _accuracy(net: HandshapeNetwork, x: np.ndarray, y: np.ndarray, batch: int = 512) -> float:
    hits = 0
    with tc.no_grad():
        for s in range(0, len(x), batch):
            hits += int((np.argmax(net.forward(x[s:s + batch])[0].data, axis=-1) == y[s:s + batch]).sum())
    return hits / len(x)


def split_handshapes(x: np.ndarray, y: np.ndarray, val_fraction: float, seed: int):
    """Stratified held-out split: ``val_fraction`` of every class."""
    rng = np.random.default_rng([seed, 202])
    tr, va = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = max(1, int(round(val_fraction * len(idx))))
        va.extend(idx[:k])
        tr.extend(idx[k:])
    tr, va = np.sort(tr), np.sort(va)
    return (x[tr], y[tr]), (x[va], y[va])


def train_stage2(hand: HandshapeNetwork, train, val=None, cfg: TrainConfig | None = None,
                 log: Callable | None = None) -> TrainResult:
    """Handshape network on ``(x (N, 21, 2), y)``; keeps the epoch with the best held-out top-1."""
    cfg = cfg or TrainConfig()
    x, y = np.asarray(train[0], dtype=np.float64), np.asarray(train[1], dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("handshape training needs at least 2 classes")
    # half of each batch, on average, is replaced by its trip through the 10-joint body block
    x_rt = roundtrip_hands(x) if cfg.hand_roundtrip else x
    opt = Adam(hand.parameters(), cfg)
    n = len(x)
    history, best, best_epoch, best_state = [], None, -1, None
    for epoch in range(cfg.hand_epochs):
        opt.set_epoch(epoch, cfg.hand_epochs)
        order = np.random.default_rng([cfg.seed, 102, epoch]).permutation(n)
        tot, correct = 0.0, 0
        for s in range(0, n, cfg.hand_batch_size):
            idx = order[s:s + cfg.hand_batch_size]
            opt.zero_grad()
            rng = np.random.default_rng([cfg.seed, 103, epoch, s])
            xb = np.where((rng.random(len(idx)) < 0.5)[:, None, None], x_rt[idx], x[idx])
            logits, _ = hand.forward(rotate_hands(xb, rng, cfg.hand_rotate))
            loss = handshape_loss(logits, y[idx])
            tc.backward(loss)
            opt.step()
            tot += float(loss.data) * len(idx) / n
            correct += int((np.argmax(logits.data, axis=-1) == y[idx]).sum())
        entry = {"epoch": epoch, "loss": tot, "train_running_accuracy": correct / n,
                 "train_accuracy": _accuracy(hand, x, y)}
        if val is not None:
            entry["val_top1"] = _accuracy(hand, np.asarray(val[0]), np.asarray(val[1]))
            if _select(entry, "val_top1", best):
                best, best_epoch, best_state = entry["val_top1"], epoch, hand.state_dict()
        else:
            best_epoch, best_state = epoch, hand.state_dict()
        history.append(entry)
        if log is not None:
            log(entry)
    hand.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best, best_state)


def _no_grad_features(seg: SegmentationNetwork, hand: HandshapeNetwork, data: SegData, batch: int = 16):
    feats, hfeats = [], []
    with tc.no_grad():
        for s in range(0, len(data), batch):
            xb, mb = data.x[s:s + batch], data.mask[s:s + batch]
            feats.append(seg.backbone(xb, mb).data)
            hfeats.append(hand.forward(hand_input(xb))[1].data)
    return np.concatenate(feats), np.concatenate(hfeats)


def train_stage3(seg: SegmentationNetwork, hand: HandshapeNetwork, fusion: FusionModule, train: SegData,
                 val: SegData | None = None, cfg: TrainConfig | None = None,
                 loss_cfg: LossConfig | None = None, log: Callable | None = None) -> TrainResult:
    """Fusion module + segmentation head (whole segmentation branch with ``full_branch``).

    The handshape branch only runs forward; its parameters are never touched.
    """
    cfg, loss_cfg = cfg or TrainConfig(), loss_cfg or LossConfig()
    if seg is None or hand is None:
        raise ValueError("stage 3 needs trained segmentation and handshape networks")
    if len(train) == 0:
        raise ValueError("empty training set")
    before = parameter_checksum(hand)
    train_feats, train_hand = _no_grad_features(seg, hand, train)
    if cfg.full_branch:
        params = seg.parameters() + fusion.parameters()
    else:
        params = seg.head_parameters() + fusion.parameters()
    val_cache = _no_grad_features(seg, hand, val) if (val is not None and not cfg.full_branch) else None

    def forward(x, m, idx):
        feats = seg.backbone(x, m, train=True) if cfg.full_branch else Tensor(train_feats[idx])
        fused, _ = fusion.forward(feats, Tensor(train_hand[idx]), m)
        return seg.head(fused, m)

    def evaluate(d: SegData):
        if val_cache is not None and d is val:
            f, h = val_cache
            fn = lambda i: seg.head(fusion.forward(Tensor(f[i]), Tensor(h[i]), d.mask[i])[0], d.mask[i])
            pred = predict_labels(fn, len(d), 16)
        else:
            pred = segment_fused(seg, hand, fusion, d)
        return seg_scores(pred, d)

    def snapshot():
        return {"seg": seg.state_dict(), "fusion": fusion.state_dict()}

    opt = Adam(params, cfg)
    result = _seg_epochs(cfg, loss_cfg, train, val, opt, forward, evaluate, snapshot, log, use_flip=False,
                         extra=lambda: {"gate": fusion.gate})
    seg.load_state_dict(result.state["seg"])
    fusion.load_state_dict(result.state["fusion"])
    if parameter_checksum(hand) != before:
        raise RuntimeError("handshape branch changed during stage 3")
    return result


def segment_clips(x: np.ndarray, spans) -> list[np.ndarray]:
    """Frames of each span cut from one ``(T, J, 6)`` feature array."""
    return [x[int(sp[0]):int(sp[1]) + 1] for sp in spans]


def _gloss_accuracy(clf: GlossClassifier, clips, y, batch: int = 64) -> float:
    hits = 0
    with tc.no_grad():
        for s in range(0, len(clips), batch):
            x, m = pad_segments(clips[s:s + batch])
            hits += int((np.argmax(clf.forward(x, m).data, axis=-1) == y[s:s + batch]).sum())
    return hits / len(clips)


def train_gloss_classifier(clf: GlossClassifier, clips: list[np.ndarray], glosses, val=None,
                           cfg: TrainConfig | None = None, log: Callable | None = None) -> TrainResult:
    """Segment-level gloss recognizer; keeps the epoch with the best held-out accuracy."""
    cfg = cfg or TrainConfig()
    y = np.asarray(glosses, dtype=np.int64)
    if not clips:
        raise ValueError("no training segments")
    opt = Adam(clf.parameters(), cfg)
    n = len(clips)
    history, best, best_epoch, best_state = [], None, -1, None
    for epoch in range(cfg.gloss_epochs):
        opt.set_epoch(epoch, cfg.gloss_epochs)
        order = np.random.default_rng([cfg.seed, 103, epoch]).permutation(n)
        tot = 0.0
        for s in range(0, n, cfg.gloss_batch_size):
            idx = order[s:s + cfg.gloss_batch_size]
            x, m = pad_segments([clips[i] for i in idx])
            opt.zero_grad()
            loss = tc.cross_entropy(clf.forward(x, m), y[idx])
            tc.backward(loss)
            opt.step()
            tot += float(loss.data) * len(idx) / n
        entry = {"epoch": epoch, "loss": tot, "train_accuracy": _gloss_accuracy(clf, clips, y)}
        if val is not None:
            entry["val_accuracy"] = _gloss_accuracy(clf, val[0], np.asarray(val[1]))
            if _select(entry, "val_accuracy", best):
                best, best_epoch, best_state = entry["val_accuracy"], epoch, clf.state_dict()
        else:
            best_epoch, best_state = epoch, clf.state_dict()
        history.append(entry)
        if log is not None:
            log(entry)
    clf.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best, best_state)


def overfit_summary(result: TrainResult) -> dict:
    last = result.history[-1]
    return {"epochs": len(result.history), "frame_accuracy": last["train_frame_accuracy"],
            "seg_loss": last["loss"]}


def epoch_log_line(entry: dict) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v

    return json.dumps({k: clean(v) for k, v in entry.items()}, sort_keys=True)
