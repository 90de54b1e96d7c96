"""Segmentation ST-GCN, handshape GCN, gated cross-attention fusion.

All networks take channels-last arrays: the segmentation branch consumes
``(N, T, J, 6)`` features, the handshape branch ``(..., 21, 2)`` joints.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as tc
from .skeleton import NUM_HANDSHAPES, build_body_graph, build_hand_graph, dominant_hand, normalize_hand_frames
from .tensor import BatchNormState, Tensor

STGCN_CHANNELS = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)
GATE_INIT = -4.0


class Module:
    """Named parameters plus batch-norm running statistics."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.norms: dict[str, BatchNormState] = {}

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = tc.parameter(value)
        self.params[name] = t
        return t

    def _norm(self, name: str, channels: int) -> BatchNormState:
        self._param(f"{name}.gamma", np.ones(channels))
        self._param(f"{name}.beta", np.zeros(channels))
        st = BatchNormState(channels)
        self.norms[name] = st
        return st

    def bn(self, name: str, x: Tensor, train: bool, mask=None) -> Tensor:
        return tc.batch_norm(x, self.norms[name], train, self.params[f"{name}.gamma"],
                             self.params[f"{name}.beta"], mask=mask)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        for name, st in self.norms.items():
            out[f"{name}.running_mean"] = st.running_mean.copy()
            out[f"{name}.running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            if state[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)
            v.zero_grad()
        for name, st in self.norms.items():
            st.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


RELU_GAIN = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# segmentation branch

@dataclass
class SegConfig:
    in_channels: int = 6
    channels: tuple = STGCN_CHANNELS
    kernel: int = 9
    head_channels: int = 256
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 10:
            raise ValueError("the segmentation backbone has exactly 10 ST-GCN blocks")
        if self.kernel % 2 == 0:
            raise ValueError("temporal kernel must be odd")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


class SegmentationNetwork(Module):
    """Ten ST-GCN blocks, joint pooling, a two-layer temporal head and a linear classifier."""

    def __init__(self, config: SegConfig | None = None, a_hat: np.ndarray | None = None):
        super().__init__()
        self.config = config or SegConfig()
        cfg = self.config
        self.a_hat = Tensor(build_body_graph().a_hat if a_hat is None else a_hat)
        rng = np.random.default_rng([cfg.seed, 11])
        k = cfg.kernel
        c_in = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            p = f"block{i}"
            self._param(f"{p}.gcn_w", _uniform(rng, (c_in, c), c_in, RELU_GAIN))
            self._param(f"{p}.gcn_b", np.zeros(c))
            self._norm(f"{p}.bn1", c)
            self._param(f"{p}.tcn_w", _uniform(rng, (c, c, k), c * k, RELU_GAIN))
            self._param(f"{p}.tcn_b", np.zeros(c))
            self._norm(f"{p}.bn2", c)
            if c != c_in:
                self._param(f"{p}.res_w", _uniform(rng, (c_in, c), c_in))
            c_in = c
        d, h = cfg.feature_dim, cfg.head_channels
        self._param("head.conv1_w", _uniform(rng, (h, d, k), d * k, RELU_GAIN))
        self._param("head.conv1_b", np.zeros(h))
        self._param("head.conv2_w", _uniform(rng, (h, h, k), h * k, RELU_GAIN))
        self._param("head.conv2_b", np.zeros(h))
        self._param("head.out_w", _uniform(rng, (h, cfg.num_classes), h))
        self._param("head.out_b", np.zeros(cfg.num_classes))

    @property
    def joint_count(self) -> int:
        return self.a_hat.shape[0]

    def head_parameters(self) -> list[Tensor]:
        return [v for k, v in self.params.items() if k.startswith("head.")]

    def backbone(self, x, mask=None, train: bool = False) -> Tensor:
        """Pooled per-frame features ``(N, T, d)``: the fusion attachment point."""
        x = tc.as_tensor(x)
        if x.ndim != 4 or x.shape[2] != self.joint_count or x.shape[3] != self.config.in_channels:
            raise tc.ShapeError(f"expected (N, T, {self.joint_count}, {self.config.in_channels}) input, "
                                f"got {x.shape}")
        fmask = None if mask is None else np.asarray(mask, dtype=np.float64)[:, :, None, None]
        p = self.params
        c_in = self.config.in_channels
        h = x
        for i, c in enumerate(self.config.channels):
            b = f"block{i}"
            y = tc.graph_conv(h, self.a_hat, p[f"{b}.gcn_w"]) + p[f"{b}.gcn_b"]
            y = tc.relu(self.bn(f"{b}.bn1", y, train, fmask))
            y = tc.conv_time(y, p[f"{b}.tcn_w"]) + p[f"{b}.tcn_b"]
            y = self.bn(f"{b}.bn2", y, train, fmask)
            res = h if c == c_in else tc.matmul(h, p[f"{b}.res_w"])
            h = tc.relu(y + res)
            if fmask is not None:
                h = h * fmask
            c_in = c
        return tc.mean(h, axis=2)

    def head(self, feats, mask=None) -> Tensor:
        """Frame logits ``(N, T, num_classes)`` from pooled features."""
        p = self.params
        m = None if mask is None else np.asarray(mask, dtype=np.float64)[:, :, None]
        h = feats if m is None else feats * m
        h = tc.relu(tc.conv_time(h, p["head.conv1_w"]) + p["head.conv1_b"])
        if m is not None:
            h = h * m
        h = tc.relu(tc.conv_time(h, p["head.conv2_w"]) + p["head.conv2_b"])
        if m is not None:
            h = h * m
        return tc.matmul(h, p["head.out_w"]) + p["head.out_b"]

    def forward(self, x, mask=None, train: bool = False) -> tuple[Tensor, Tensor]:
        feats = self.backbone(x, mask, train)
        return feats, self.head(feats, mask)


def seg_forward(net: SegmentationNetwork, f, train: bool = False) -> tuple[Tensor, Tensor]:
    """Features and logits for one :class:`FeatureSequence` (``T x d``, ``T x 4``)."""
    x = f.channels_last()[None]
    feats, logits = net.forward(x, f.mask[None], train)
    return tc.reshape(feats, feats.shape[1:]), tc.reshape(logits, logits.shape[1:])


# ---------------------------------------------------------------------------
# handshape branch

@dataclass
class HandConfig:
    channels: tuple = (64, 128, 256)
    num_classes: int = NUM_HANDSHAPES
    in_channels: int = 2
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3:
            raise ValueError("the handshape network has exactly 3 graph-conv layers")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


class HandshapeNetwork(Module):
    """Three graph convolutions over the hand graph, joint pooling, linear classifier."""

    def __init__(self, config: HandConfig | None = None, a_hat: np.ndarray | None = None):
        super().__init__()
        self.config = config or HandConfig()
        cfg = self.config
        self.a_hat = Tensor(build_hand_graph().a_hat if a_hat is None else a_hat)
        rng = np.random.default_rng([cfg.seed, 12])
        c_in = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            self._param(f"gcn{i}_w", _uniform(rng, (c_in, c), c_in, RELU_GAIN))
            self._param(f"gcn{i}_b", np.zeros(c))
            c_in = c
        self._param("out_w", _uniform(rng, (c_in, cfg.num_classes), c_in))
        self._param("out_b", np.zeros(cfg.num_classes))

    def forward(self, hands) -> tuple[Tensor, Tensor]:
        """``(..., 21, 2)`` joints -> (logits ``(..., 87)``, pooled features ``(..., d)``)."""
        h = tc.as_tensor(hands)
        j = self.a_hat.shape[0]
        if h.ndim < 2 or h.shape[-2] != j or h.shape[-1] != self.config.in_channels:
            raise tc.ShapeError(f"expected (..., {j}, {self.config.in_channels}) hand joints, got {h.shape}")
        p = self.params
        for i in range(3):
            h = tc.relu(tc.graph_conv(h, self.a_hat, p[f"gcn{i}_w"]) + p[f"gcn{i}_b"])
        feats = tc.mean(h, axis=-2)
        return tc.matmul(feats, p["out_w"]) + p["out_b"], feats


def handshape_forward(net: HandshapeNetwork, hands) -> tuple[Tensor, Tensor]:
    return net.forward(hands)


# ---------------------------------------------------------------------------
# fusion

@dataclass
class FusionConfig:
    dim: int = 256
    gate_init: float = GATE_INIT
    seed: int = 0


class FusionModule(Module):
    """Single-head cross-attention from segmentation queries to both streams, gated residual."""

    def __init__(self, config: FusionConfig | None = None):
        super().__init__()
        self.config = config or FusionConfig()
        d = self.config.dim
        rng = np.random.default_rng([self.config.seed, 13])
        for name in ("w_q", "w_k", "w_v"):
            self._param(name, _uniform(rng, (d, d), d))
        self._param("g", np.array(self.config.gate_init))

    @property
    def gate(self) -> float:
        return 1.0 / (1.0 + math.exp(-float(self.params["g"].data)))

    def forward(self, x_seg, x_hand, mask=None, gate: float | None = None):
        """Return ``(fused, attention)``.

        ``attention`` is ``(N, T, 2T)``; keys of padding frames get weight 0.
        ``gate`` overrides the learned sigmoid gate when given.
        """
        x_seg, x_hand = tc.as_tensor(x_seg), tc.as_tensor(x_hand)
        if x_seg.shape != x_hand.shape:
            raise tc.ShapeError(f"segmentation {x_seg.shape} and handshape {x_hand.shape} features differ")
        d = self.config.dim
        if x_seg.shape[-1] != d:
            raise tc.ShapeError(f"fusion configured for d={d}, got {x_seg.shape[-1]}")
        p = self.params
        q = tc.matmul(x_seg, p["w_q"])
        k = tc.concat([tc.matmul(x_seg, p["w_k"]), tc.matmul(x_hand, p["w_k"])], axis=-2)
        v = tc.concat([tc.matmul(x_seg, p["w_v"]), tc.matmul(x_hand, p["w_v"])], axis=-2)
        scores = tc.matmul(q, tc.swapaxes(k, -1, -2)) / math.sqrt(d)
        key_mask = None
        if mask is not None:
            m = np.asarray(mask, dtype=bool)
            key_mask = np.concatenate([m, m], axis=-1)[..., None, :]
        attn = tc.softmax(scores, axis=-1, mask=key_mask)
        update = tc.matmul(attn, v)
        g = tc.sigmoid(p["g"]) if gate is None else Tensor(gate)
        return x_seg + g * update, attn


def cross_attention_fuse(fm: FusionModule, x_seg, x_hand, mask=None, gate=None) -> Tensor:
    return fm.forward(x_seg, x_hand, mask, gate)[0]


def hand_input(x: np.ndarray) -> np.ndarray:
    """Per-frame normalized dominant-hand joints from ``(N, T, 27, 6)`` features."""
    return normalize_hand_frames(dominant_hand(np.asarray(x)[..., :2]))


def fused_seg_forward(seg: SegmentationNetwork, hand: HandshapeNetwork, fm: FusionModule, x,
                      mask=None, hands=None, train: bool = False, freeze_hand: bool = True,
                      gate: float | None = None) -> Tensor:
    """Logits of the fused pipeline for ``(N, T, J, 6)`` features.

    ``hands`` (``(N, T, 21, 2)``) defaults to the normalized dominant hand
    extracted from ``x``.  With ``freeze_hand`` the handshape branch runs
    without recording gradients.
    """
    feats = seg.backbone(x, mask, train)
    if hands is None:
        hands = hand_input(tc.as_tensor(x).data)
    if freeze_hand:
        with tc.no_grad():
            _, hf = hand.forward(hands)
        hf = Tensor(hf.data)
    else:
        _, hf = hand.forward(hands)
    fused, _ = fm.forward(feats, hf, mask, gate)
    return seg.head(fused, mask)


# ---------------------------------------------------------------------------
# recognition classifier

@dataclass
class GlossConfig:
    num_classes: int = 40
    channels: tuple = (32, 64, 64)
    in_channels: int = 6
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)


class GlossClassifier(Module):
    """Handshape-network layout over the body graph, averaged over a segment's frames."""

    def __init__(self, config: GlossConfig | None = None, a_hat: np.ndarray | None = None):
        super().__init__()
        self.config = config or GlossConfig()
        cfg = self.config
        self.a_hat = Tensor(build_body_graph().a_hat if a_hat is None else a_hat)
        rng = np.random.default_rng([cfg.seed, 14])
        c_in = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            self._param(f"gcn{i}_w", _uniform(rng, (c_in, c), c_in, RELU_GAIN))
            self._param(f"gcn{i}_b", np.zeros(c))
            c_in = c
        self._param("out_w", _uniform(rng, (c_in, cfg.num_classes), c_in))
        self._param("out_b", np.zeros(cfg.num_classes))

    def forward(self, x, mask) -> Tensor:
        """``x`` is ``(N, L, J, 6)`` padded segments with ``(N, L)`` mask; returns ``(N, classes)``."""
        p = self.params
        h = tc.as_tensor(x)
        for i in range(len(self.config.channels)):
            h = tc.relu(tc.graph_conv(h, self.a_hat, p[f"gcn{i}_w"]) + p[f"gcn{i}_b"])
        h = tc.mean(h, axis=2)
        m = np.asarray(mask, dtype=np.float64)
        w = m / m.sum(axis=1, keepdims=True)
        pooled = tc.sum(h * w[:, :, None], axis=1)
        return tc.matmul(pooled, p["out_w"]) + p["out_b"]

    def rank(self, segment: np.ndarray) -> list[int]:
        """Class ids ordered best-first for one ``(L, J, 6)`` segment."""
        with tc.no_grad():
            logits = self.forward(segment[None], np.ones((1, len(segment)))).data[0]
        return [int(c) for c in np.argsort(-logits, kind="stable")]


def pad_segments(segments: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    length = max(len(s) for s in segments)
    x = np.zeros((len(segments), length) + segments[0].shape[1:])
    mask = np.zeros((len(segments), length))
    for i, s in enumerate(segments):
        x[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return x, mask


# ---------------------------------------------------------------------------
# construction and checkpoints

def init_params(seed: int = 0, seg_channels=STGCN_CHANNELS, hand_channels=(64, 128, 256),
                head_channels: int = 256):
    """Fresh (segmentation, handshape, fusion) networks, fully determined by ``seed``."""
    seg = SegmentationNetwork(SegConfig(channels=seg_channels, head_channels=head_channels, seed=seed))
    hand = HandshapeNetwork(HandConfig(channels=hand_channels, seed=seed))
    fusion = FusionModule(FusionConfig(dim=seg.config.feature_dim, seed=seed))
    return seg, hand, fusion


_SECTIONS = {"seg": (SegmentationNetwork, SegConfig), "hand": (HandshapeNetwork, HandConfig),
             "fusion": (FusionModule, FusionConfig), "gloss": (GlossClassifier, GlossConfig)}


def bundle_state(stage: int, **models: Module) -> tuple[dict, dict]:
    params, configs = {}, {}
    for section, model in models.items():
        if model is None:
            continue
        if section not in _SECTIONS:
            raise ValueError(f"unknown checkpoint section {section!r}")
        for k, v in model.state_dict().items():
            params[f"{section}.{k}"] = v
        configs[section] = asdict(model.config)
    return params, {"stage": int(stage), "configs": configs}


def save_models(path, stage: int, **models: Module) -> str:
    params, meta = bundle_state(stage, **models)
    return checkpoint.save(path, params, meta)


def load_models(path) -> tuple[dict[str, Module], int]:
    """Rebuild every network stored in a checkpoint; returns ``(models, stage)``."""
    params, meta = checkpoint.load(path)
    models = {}
    for section, cfg_dict in meta["configs"].items():
        cls, cfg_cls = _SECTIONS[section]
        model = cls(cfg_cls(**cfg_dict))
        prefix = section + "."
        model.load_state_dict({k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)})
        models[section] = model
    return models, int(meta["stage"])


def parameter_checksum(model: Module) -> str:
    return checkpoint.checksum(model.state_dict())
