"""Joint graphs, pose files and skeletal feature engineering.

Body layout (27 joints)::

    0 nose   1 l_shoulder  2 r_shoulder  3 l_elbow  4 r_elbow  5 l_wrist  6 r_wrist
    7..16    left hand:  root, thumb_tip, then (base, tip) for index/middle/ring/pinky
    17..26   right hand: same order as the left hand

The hand block holds 10 keypoints; the thumb's base is taken to coincide with
the hand root.  The 21-joint hand model uses the usual wrist + 4 joints per
finger ordering (thumb, index, middle, ring, pinky).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

# label indices
P, O, I, B = 0, 1, 2, 3
LABEL_CHARS = {P: "P", O: "O", I: "I", B: "B"}
CHAR_LABELS = {v: k for k, v in LABEL_CHARS.items()}

BODY_JOINTS = 27
HAND_JOINTS = 21
NUM_HANDSHAPES = 87

FINGERS = ("index", "middle", "ring", "pinky")
_HAND_BLOCK = ["root", "thumb_tip"] + [f"{f}_{p}" for f in FINGERS for p in ("base", "tip")]
BODY_NAMES = (
    ["nose", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist"]
    + [f"l_{n}" for n in _HAND_BLOCK]
    + [f"r_{n}" for n in _HAND_BLOCK]
)
LEFT_HAND = slice(7, 17)
RIGHT_HAND = slice(17, 27)

HAND_NAMES = ["wrist"] + [f"{f}_{j}" for f in ("thumb",) + FINGERS
                          for j in ("1", "2", "3", "tip")]


class PoseFormatError(ValueError):
    """Malformed pose or handshape file."""


class SchemaError(ValueError):
    """Well-formed file whose contents do not fit the expected schema."""


class DegeneratePoseWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# graphs

@dataclass(frozen=True)
class JointGraph:
    names: tuple
    edges: tuple
    mirror: tuple | None = None  # permutation swapping left/right joints

    @property
    def joint_count(self) -> int:
        return len(self.names)

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.joint_count, self.joint_count))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    @cached_property
    def a_hat(self) -> np.ndarray:
        """Symmetric-normalized adjacency with self loops."""
        a = self.adjacency + np.eye(self.joint_count)
        d = 1.0 / np.sqrt(a.sum(axis=1))
        out = a * d[:, None] * d[None, :]
        return (out + out.T) / 2  # exact symmetry


def _hand_block_edges(root: int) -> list[tuple[int, int]]:
    edges = [(root, root + 1)]
    for f in range(4):
        base = root + 2 + 2 * f
        edges += [(root, base), (base, base + 1)]
    return edges


def build_body_graph() -> JointGraph:
    edges = [(0, 1), (0, 2), (1, 2), (1, 3), (3, 5), (2, 4), (4, 6), (5, 7), (6, 17)]
    edges += _hand_block_edges(7) + _hand_block_edges(17)
    mirror = [0, 2, 1, 4, 3, 6, 5] + list(range(17, 27)) + list(range(7, 17))
    return JointGraph(tuple(BODY_NAMES), tuple(edges), tuple(mirror))


def build_hand_graph() -> JointGraph:
    edges = []
    for f in range(5):
        chain = [0] + [1 + 4 * f + k for k in range(4)]
        edges += list(zip(chain[:-1], chain[1:]))
    return JointGraph(tuple(HAND_NAMES), tuple(edges))


def graph_for(joint_count: int) -> JointGraph:
    if joint_count == BODY_JOINTS:
        return build_body_graph()
    if joint_count == HAND_JOINTS:
        return build_hand_graph()
    raise SchemaError(f"no joint graph with {joint_count} joints")


# ---------------------------------------------------------------------------
# data containers

@dataclass
class PoseSequence:
    frames: np.ndarray  # (T, J, 2)
    fps: float = 30.0
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[-1] != 2 or len(self.frames) < 1:
            raise SchemaError(f"pose frames must be T x J x 2 with T >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise SchemaError("pose coordinates must be finite")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]


@dataclass
class FeatureSequence:
    """Channels (x, y, vx, vy, ax, ay) stored as ``6 x T x J``."""

    features: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.features.shape[1], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def num_frames(self) -> int:
        return self.features.shape[1]

    @property
    def length(self) -> int:
        """Number of real (non-padding) frames."""
        return int(self.mask.sum())

    def channels_last(self) -> np.ndarray:
        return np.ascontiguousarray(self.features.transpose(1, 2, 0))


@dataclass
class HandshapeSample:
    joints: np.ndarray  # (21, 2)
    label: int

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.shape != (HAND_JOINTS, 2):
            raise SchemaError(f"handshape sample must be 21 x 2, got {self.joints.shape}")
        if not 0 <= int(self.label) < NUM_HANDSHAPES:
            raise SchemaError(f"handshape label {self.label} outside [0, 86]")
        self.label = int(self.label)


def labels_from_string(s: str) -> np.ndarray:
    try:
        return np.array([CHAR_LABELS[c] for c in s], dtype=np.int64)
    except KeyError as exc:
        raise PoseFormatError(f"unknown label character {exc.args[0]!r}") from None


def labels_to_string(labels) -> str:
    return "".join(LABEL_CHARS[int(v)] for v in labels)


# ---------------------------------------------------------------------------
# feature engineering

def normalize_coords(p: PoseSequence) -> PoseSequence:
    """Map the sequence bounding box into [-1, 1]^2 with uniform scale."""
    lo = p.frames.reshape(-1, 2).min(axis=0)
    hi = p.frames.reshape(-1, 2).max(axis=0)
    half = (hi - lo).max() / 2
    if half == 0:
        warnings.warn(f"degenerate pose {p.source_id!r}: all joints coincide", DegeneratePoseWarning)
        return PoseSequence(np.zeros_like(p.frames), p.fps, p.source_id)
    center = (lo + hi) / 2
    out = np.clip((p.frames - center) / half, -1.0, 1.0)
    return PoseSequence(out, p.fps, p.source_id)


def normalize_hand_frames(hands: np.ndarray) -> np.ndarray:
    """Per-frame bounding-box normalization of ``(..., 21, 2)`` hand joints."""
    hands = np.asarray(hands, dtype=np.float64)
    lo = hands.min(axis=-2, keepdims=True)
    hi = hands.max(axis=-2, keepdims=True)
    half = (hi - lo).max(axis=-1, keepdims=True) / 2
    safe = np.where(half > 0, half, 1.0)
    out = (hands - (lo + hi) / 2) / safe
    return np.where(half > 0, np.clip(out, -1.0, 1.0), 0.0)


def horizontal_flip(p: PoseSequence, graph: JointGraph | None = None) -> PoseSequence:
    """Negate x and swap left/right joints."""
    graph = graph or graph_for(p.num_joints)
    frames = p.frames.copy()
    frames[..., 0] = -frames[..., 0]
    if graph.mirror is not None:
        frames = frames[:, list(graph.mirror)]
    return PoseSequence(frames, p.fps, p.source_id)


def compute_kinematics(p: PoseSequence) -> FeatureSequence:
    """Stack positions with backward-difference velocity and acceleration."""
    x = p.frames
    v = np.zeros_like(x)
    v[1:] = x[1:] - x[:-1]
    a = np.zeros_like(x)
    a[1:] = v[1:] - v[:-1]
    feats = np.concatenate([x, v, a], axis=-1).transpose(2, 0, 1)
    return FeatureSequence(np.ascontiguousarray(feats), np.ones(p.num_frames, dtype=bool))


def pad_to_length(f: FeatureSequence, labels, t_max: int):
    """Zero-pad features, extend labels with P and the mask with False."""
    labels = np.asarray(labels, dtype=np.int64)
    t = f.num_frames
    if t > t_max:
        raise ValueError(f"sequence of {t} frames exceeds t_max={t_max}; split it first")
    if len(labels) != t:
        raise ValueError("labels and features differ in length")
    extra = t_max - t
    feats = np.pad(f.features, ((0, 0), (0, extra), (0, 0)))
    mask = np.concatenate([f.mask, np.zeros(extra, dtype=bool)])
    labels = np.concatenate([labels, np.full(extra, P, dtype=np.int64)])
    return FeatureSequence(feats, mask), labels


def split_windows(f: FeatureSequence, labels, t_max: int = 256, overlap: int = 16):
    """Cut an over-long sequence into overlapping windows of at most ``t_max`` frames."""
    labels = np.asarray(labels, dtype=np.int64)
    t = f.num_frames
    if t <= t_max:
        return [(f, labels)]
    if overlap >= t_max:
        raise ValueError("overlap must be smaller than t_max")
    step = t_max - overlap
    starts = list(range(0, t - overlap, step))
    out = []
    for s in starts:
        e = min(s + t_max, t)
        out.append((FeatureSequence(f.features[:, s:e], f.mask[s:e]), labels[s:e]))
    return out


def prepare_sequence(p: PoseSequence, labels=None, t_max: int | None = None, flip: bool = False):
    """Normalize, optionally flip, add kinematics and pad: the full input pipeline."""
    p = normalize_coords(p)
    if flip:
        p = horizontal_flip(p)
    f = compute_kinematics(p)
    if labels is None:
        labels = np.full(f.num_frames, O, dtype=np.int64)
    if t_max is not None:
        f, labels = pad_to_length(f, labels, t_max)
    return f, np.asarray(labels, dtype=np.int64)


def stack_features(seqs: list[FeatureSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Batch equal-length sequences into ``(N, T, J, 6)`` plus an ``(N, T)`` mask."""
    x = np.stack([s.channels_last() for s in seqs])
    mask = np.stack([s.mask for s in seqs])
    return x, mask


# ---------------------------------------------------------------------------
# dominant-hand remap (body hand block -> 21-joint hand)

def _remap_table():
    # each 21-joint entry is (body-block index a, body-block index b, fraction along a->b)
    table = [(0, 0, 0.0)]
    for k in range(4):  # thumb: root -> thumb_tip
        table.append((0, 1, (k + 1) / 4))
    for f in range(4):
        base, tip = 2 + 2 * f, 3 + 2 * f
        for k in range(4):
            table.append((base, tip, k / 3))
    return table


_REMAP = _remap_table()
_REMAP_A = np.array([a for a, _, _ in _REMAP])
_REMAP_B = np.array([b for _, b, _ in _REMAP])
_REMAP_W = np.array([w for _, _, w in _REMAP])
# 21-joint indices that carry a body keypoint unchanged
HAND_FROM_BLOCK = {0: 0, 1: 4, 2: 5, 3: 8, 4: 9, 5: 12, 6: 13, 7: 16, 8: 17, 9: 20}


def block_to_hand(block: np.ndarray) -> np.ndarray:
    """Expand ``(..., 10, 2)`` hand-block keypoints to the 21-joint hand model.

    Missing intermediate finger joints are linearly interpolated along each
    finger chain.
    """
    a = block[..., _REMAP_A, :]
    b = block[..., _REMAP_B, :]
    w = _REMAP_W[:, None]
    return (1.0 - w) * a + w * b


def hand_to_block(hand: np.ndarray) -> np.ndarray:
    idx = [HAND_FROM_BLOCK[i] for i in range(10)]
    return hand[..., idx, :]


def dominant_hand(frames: np.ndarray) -> np.ndarray:
    """Right-hand joints of body frames ``(..., 27, 2)`` as ``(..., 21, 2)``."""
    if frames.shape[-2] != BODY_JOINTS:
        raise SchemaError(f"dominant-hand extraction needs 27 joints, got {frames.shape[-2]}")
    return block_to_hand(frames[..., RIGHT_HAND, :])


# ---------------------------------------------------------------------------
# file formats

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_pose_file(path, p: PoseSequence, labels=None) -> None:
    lines = ["format: 1", "kind: pose", f"source_id: {p.source_id}", f"fps: {p.fps!r}",
             f"joints: {p.num_joints}", "channels: 2", f"frames: {p.num_frames}"]
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != p.num_frames:
            raise ValueError("labels and frames differ in length")
        if np.any(labels == P):
            raise ValueError("padding labels are not stored in pose files")
        lines.append(f"labels: {labels_to_string(labels)}")
    lines.append("---")
    lines += [_fmt(fr.reshape(-1)) for fr in p.frames]
    Path(path).write_text("\n".join(lines) + "\n")


def save_handshape_dataset(path, samples: list[HandshapeSample]) -> None:
    lines = ["format: 1", "kind: handshape", f"joints: {HAND_JOINTS}", f"records: {len(samples)}", "---"]
    lines += [f"{s.label} {_fmt(s.joints.reshape(-1))}" for s in samples]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_header(lines: list[str], path) -> tuple[dict, int]:
    header = {}
    for n, line in enumerate(lines):
        if line.strip() == "---":
            return header, n + 1
        if ":" not in line:
            raise PoseFormatError(f"{path}:{n + 1}: expected 'key: value' header line")
        key, _, value = line.partition(":")
        header[key.strip()] = value.strip()
    raise PoseFormatError(f"{path}: header not terminated by '---'")


def _floats(text: str, where: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split()], dtype=np.float64)
    except ValueError as exc:
        raise PoseFormatError(f"{where}: {exc}") from None


def _int_field(header: dict, key: str, path) -> int:
    if key not in header:
        raise PoseFormatError(f"{path}: missing header field {key!r}")
    try:
        return int(header[key])
    except ValueError:
        raise PoseFormatError(f"{path}: field {key!r} is not an integer: {header[key]!r}") from None


def load_pose_file(path):
    """Read a pose or handshape file.

    Returns ``(PoseSequence, labels_or_None)`` for sentence streams and a list
    of :class:`HandshapeSample` for handshape datasets.
    """
    lines = Path(path).read_text().splitlines()
    header, body_start = _read_header(lines, path)
    if header.get("format") != "1":
        raise PoseFormatError(f"{path}:1: unsupported or missing format version {header.get('format')!r}")
    joints = _int_field(header, "joints", path)
    kind = header.get("kind", "pose" if joints == BODY_JOINTS else "handshape")
    body = [(body_start + i + 1, ln) for i, ln in enumerate(lines[body_start:]) if ln.strip()]

    if kind == "handshape":
        if joints != HAND_JOINTS:
            raise SchemaError(f"{path}: handshape datasets need 21 joints, got {joints}")
        samples = []
        for lineno, ln in body:
            head, _, rest = ln.strip().partition(" ")
            try:
                label = int(head)
            except ValueError:
                raise PoseFormatError(f"{path}:{lineno}: field 1: label {head!r} is not an integer") from None
            vals = _floats(rest, f"{path}:{lineno}")
            if vals.size != 2 * HAND_JOINTS:
                raise PoseFormatError(f"{path}:{lineno}: expected {2 * HAND_JOINTS} coordinates, got {vals.size}")
            samples.append(HandshapeSample(vals.reshape(HAND_JOINTS, 2), label))
        return samples

    if kind != "pose":
        raise PoseFormatError(f"{path}: unknown kind {kind!r}")
    if joints not in (BODY_JOINTS, HAND_JOINTS):
        raise SchemaError(f"{path}: pose streams need 27 (or 21) joints, got {joints}")
    channels = _int_field(header, "channels", path) if "channels" in header else 2
    if channels not in (2, 3):
        raise PoseFormatError(f"{path}: channels must be 2 or 3")
    frames = []
    for lineno, ln in body:
        vals = _floats(ln, f"{path}:{lineno}")
        if vals.size != joints * channels:
            raise PoseFormatError(f"{path}:{lineno}: expected {joints * channels} values, got {vals.size}")
        frames.append(vals.reshape(joints, channels)[:, :2])  # confidences ignored
    if "frames" in header and _int_field(header, "frames", path) != len(frames):
        raise PoseFormatError(f"{path}: header declares {header['frames']} frames, found {len(frames)}")
    if not frames:
        raise PoseFormatError(f"{path}: no frames")
    fps = float(header.get("fps", 30.0))
    seq = PoseSequence(np.stack(frames), fps, header.get("source_id", Path(path).stem))
    labels = None
    if header.get("labels"):
        labels = labels_from_string(header["labels"])
        if np.any(labels == P):
            raise PoseFormatError(f"{path}: label string may only use B, I, O")
        if len(labels) != len(frames):
            raise SchemaError(f"{path}: {len(labels)} labels for {len(frames)} frames")
    return seq, labels


def hand_speed(frames: np.ndarray) -> np.ndarray:
    """Per-frame speed of the right wrist, 0 at the first frame."""
    w = frames[:, 6]
    s = np.zeros(len(frames))
    s[1:] = np.linalg.norm(w[1:] - w[:-1], axis=-1)
    return s


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])
