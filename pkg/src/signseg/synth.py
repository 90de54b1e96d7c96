"""Synthetic continuous-signing streams and handshape datasets.

Everything is generated in a pixel-like frame (y grows downward, signer
faces the camera).  Each gloss class owns a prototype: a location in
signing space, a periodic wrist trajectory that returns to that location,
a hand orientation, and start/end handshapes.  Transitions between signs
are slow drifts with a relaxed hand, and with probability ``adjacent_prob``
two signs follow each other with no transition at all.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .metrics import SegmentSpan, encode_bio
from .skeleton import (
    HAND_JOINTS,
    NUM_HANDSHAPES,
    HandshapeSample,
    PoseSequence,
    hand_to_block,
    normalize_hand_frames,
    save_handshape_dataset,
    save_pose_file,
)

BODY_HALF_EXTENT = 160.0  # approx. half the bounding box of a signing body, px
HAND_SCALE = 35.0         # px per local hand unit

REST = {
    "nose": (0.0, -150.0),
    "l_shoulder": (70.0, -80.0), "r_shoulder": (-70.0, -80.0),
    "l_elbow": (90.0, 20.0), "r_elbow": (-90.0, 20.0),
    "l_wrist": (80.0, 110.0), "r_wrist": (-80.0, 110.0),
}
UPPER_ARM = 105.0
SIGN_SPACE_CENTER = np.array([-25.0, -15.0])


@dataclass
class SynthConfig:
    seed: int = 0
    num_sequences: int = 100
    signs_per_sequence_range: tuple = (2, 5)
    transition_duration_range: tuple = (3, 10)
    sign_duration_range: tuple = (8, 20)
    noise_sigma: float = 0.02
    num_classes: int = NUM_HANDSHAPES   # handshape categories
    num_glosses: int = 40               # sign vocabulary of the streams
    samples_per_class: int = 30
    adjacent_prob: float = 0.3
    gloss_zipf: float = 1.0
    t_max: int = 128
    fps: float = 30.0
    vocab_seed: int | None = None
    continuous_adjacent: bool = False   # adjacent signs continue from the previous wrist pose

    def __post_init__(self):
        self.signs_per_sequence_range = tuple(self.signs_per_sequence_range)
        self.transition_duration_range = tuple(self.transition_duration_range)
        self.sign_duration_range = tuple(self.sign_duration_range)
        lo, hi = self.sign_duration_range
        if not 2 <= lo <= hi <= 60:
            raise ValueError("sign_duration_range must lie within [2, 60]")
        if not 1 <= self.signs_per_sequence_range[0] <= self.signs_per_sequence_range[1]:
            raise ValueError("signs_per_sequence_range must be positive and ordered")
        if not 1 <= self.transition_duration_range[0] <= self.transition_duration_range[1]:
            raise ValueError("transition_duration_range must be positive and ordered")
        if not 0 <= self.adjacent_prob <= 1:
            raise ValueError("adjacent_prob must be a probability")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.num_sequences < 0 or self.num_glosses < 1:
            raise ValueError("num_sequences and num_glosses must be positive")
        min_len = 2 + self.sign_duration_range[1]
        if self.t_max < min_len:
            raise ValueError(f"t_max must be at least {min_len} to fit one sign")


@dataclass(frozen=True)
class SignPrototype:
    class_id: int
    duration_range: tuple
    location: tuple
    amplitude: tuple
    cycles: int
    phase: tuple
    orientation: float
    start_handshape: int
    end_handshape: int


class SynthSequence(NamedTuple):
    pose: PoseSequence
    labels: np.ndarray
    glosses: list
    spans: list


# ---------------------------------------------------------------------------
# hands

_FINGER_BASES = np.array([[-0.32, -0.2], [-0.3, -0.9], [-0.1, -0.95], [0.1, -0.92], [0.28, -0.85]])
_FINGER_DIRS = np.radians([-50.0, -8.0, 0.0, 6.0, 14.0])  # splay, 0 = straight up
_FINGER_LENGTHS = np.array([[0.35, 0.3, 0.25], [0.45, 0.28, 0.22], [0.5, 0.3, 0.24],
                            [0.46, 0.28, 0.22], [0.36, 0.22, 0.18]])
_FLEX_ANGLES = np.radians([[0, 0, 0], [35, 45, 30], [70, 90, 60]])


def _hand_pose(flexion) -> np.ndarray:
    """21-joint local hand pose; ``flexion`` is one level (0..2, may be fractional) per finger."""
    pts = np.zeros((HAND_JOINTS, 2))
    for f in range(5):
        level = float(flexion[f])
        lo = int(math.floor(min(level, 1.999)))
        frac = level - lo
        angles = (1 - frac) * _FLEX_ANGLES[lo] + frac * _FLEX_ANGLES[lo + 1]
        d = _FINGER_DIRS[f]
        up = np.array([math.sin(d), -math.cos(d)])
        side = np.array([math.cos(d), math.sin(d)])
        p = _FINGER_BASES[f].copy()
        pts[1 + 4 * f] = p
        cum = 0.0
        for k in range(3):
            cum += angles[k]
            # frontal projection of a curling finger: foreshortened, folding back past 90 deg,
            # with a slight sideways drift toward the palm
            p = p + _FINGER_LENGTHS[f, k] * (math.cos(cum) * up + 0.25 * math.sin(cum) * side)
            pts[2 + 4 * f + k] = p
    return pts


def canonical_handshapes(num_classes: int = NUM_HANDSHAPES) -> np.ndarray:
    """Fixed set of distinct finger-flexion patterns, ``(num_classes, 21, 2)``."""
    if not 1 <= num_classes <= NUM_HANDSHAPES:
        raise ValueError(f"num_classes must be within [1, {NUM_HANDSHAPES}]")
    combos = np.array(np.meshgrid(*[range(3)] * 5, indexing="ij")).reshape(5, -1).T
    order = np.random.default_rng(87).permutation(len(combos))
    return np.stack([_hand_pose(combos[i]) for i in order[:num_classes]])


RELAXED_HAND = _hand_pose([0.6, 0.55, 0.7, 0.8, 0.9])


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _place_hand(local: np.ndarray, wrist: np.ndarray, theta: float) -> np.ndarray:
    return wrist + HAND_SCALE * local @ _rot(theta).T


def generate_handshape_dataset(cfg: SynthConfig) -> list[HandshapeSample]:
    """Noisy, rotated renditions of each canonical handshape, normalized per sample."""
    shapes = canonical_handshapes(cfg.num_classes)
    rng = np.random.default_rng([cfg.seed, 2])
    jitter = cfg.noise_sigma * BODY_HALF_EXTENT / HAND_SCALE
    samples = []
    for label, shape in enumerate(shapes):
        for _ in range(cfg.samples_per_class):
            theta = rng.uniform(-15, 15) * cfg.noise_sigma
            scale = 1.0 + rng.uniform(-5, 5) * cfg.noise_sigma
            pts = scale * shape @ _rot(theta).T + jitter * rng.normal(size=shape.shape)
            samples.append(HandshapeSample(normalize_hand_frames(pts), label))
    return samples


# ---------------------------------------------------------------------------
# streams

def make_vocabulary(cfg: SynthConfig) -> list[SignPrototype]:
    rng = np.random.default_rng([cfg.seed if cfg.vocab_seed is None else cfg.vocab_seed, 1])
    lo, hi = cfg.sign_duration_range
    protos = []
    for c in range(cfg.num_glosses):
        centre = int(rng.integers(lo, hi + 1))
        spread = max(1, (hi - lo) // 6)
        h1 = int(rng.integers(cfg.num_classes))
        h2 = h1 if rng.random() < 0.4 else int(rng.integers(cfg.num_classes))
        protos.append(SignPrototype(
            class_id=c,
            duration_range=(max(lo, centre - spread), min(hi, centre + spread)),
            location=tuple(SIGN_SPACE_CENTER + rng.uniform(-12, 12, size=2)),
            amplitude=tuple(rng.uniform(22, 40, size=2)),
            cycles=int(rng.integers(1, 3)),
            phase=tuple(rng.uniform(0, 2 * math.pi, size=2)),
            orientation=float(rng.uniform(-0.3, 0.3)),
            start_handshape=h1,
            end_handshape=h2,
        ))
    return protos


def _gloss_probs(cfg: SynthConfig) -> np.ndarray:
    w = 1.0 / np.arange(1, cfg.num_glosses + 1) ** cfg.gloss_zipf
    return w / w.sum()


def _elbow(shoulder: np.ndarray, wrist: np.ndarray, outward: float) -> np.ndarray:
    d = wrist - shoulder
    dist = max(np.linalg.norm(d), 1e-6)
    mid = shoulder + d / 2
    h = math.sqrt(max(UPPER_ARM ** 2 - (dist / 2) ** 2, 0.0))
    perp = np.array([-d[1], d[0]]) / dist
    if perp[0] * outward < 0:
        perp = -perp
    return mid + h * perp


def _plan(cfg: SynthConfig, rng: np.random.Generator, probs: np.ndarray, protos) -> list:
    """Sequence layout as a list of ("O", length) and ("S", class, duration) items."""
    tlo, thi = cfg.transition_duration_range
    n_signs = int(rng.integers(cfg.signs_per_sequence_range[0], cfg.signs_per_sequence_range[1] + 1))
    items = [("O", int(rng.integers(tlo, thi + 1)))]
    for k in range(n_signs):
        c = int(rng.choice(len(probs), p=probs))
        dlo, dhi = protos[c].duration_range
        items.append(("S", c, int(rng.integers(dlo, dhi + 1))))
        if k < n_signs - 1:
            gap = 0 if rng.random() < cfg.adjacent_prob else int(rng.integers(tlo, thi + 1))
            if gap:
                items.append(("O", gap))
    items.append(("O", int(rng.integers(tlo, thi + 1))))

    def total():
        return sum(it[-1] for it in items)

    while total() > cfg.t_max and sum(it[0] == "S" for it in items) > 1:
        # drop the final sign together with the gap before it
        last_s = max(i for i, it in enumerate(items) if it[0] == "S")
        del items[last_s]
        if items[last_s - 1][0] == "O" and last_s - 1 > 0:
            del items[last_s - 1]
    if total() > cfg.t_max:
        items[-1] = ("O", max(1, items[-1][1] - (total() - cfg.t_max)))
        items[0] = ("O", max(1, items[0][1] - (total() - cfg.t_max)))
    return items


def _render(items, protos, shapes, cfg: SynthConfig, rng: np.random.Generator):
    t_total = sum(it[-1] for it in items)
    wrist = np.zeros((t_total, 2))
    theta = np.zeros(t_total)
    hand = np.zeros((t_total, HAND_JOINTS, 2))
    spans, glosses = [], []
    rest_wrist = np.array(REST["r_wrist"])

    # anchor points: where the wrist should be at the start of each item
    t = 0
    prev_pos, prev_theta = rest_wrist, math.pi
    for idx, it in enumerate(items):
        if it[0] == "S":
            _, c, d = it
            p = protos[c]
            s = np.arange(d) / d
            amp, ph = np.array(p.amplitude), np.array(p.phase)
            traj = amp * (np.sin(2 * math.pi * p.cycles * s[:, None] + ph) - np.sin(ph))
            chained = cfg.continuous_adjacent and idx > 0 and items[idx - 1][0] == "S"
            origin = prev_pos if chained else np.array(p.location)
            wrist[t:t + d] = origin + traj
            theta[t:t + d] = prev_theta if chained else p.orientation
            frac = (s / max(s[-1], 1e-9))[:, None, None] if d > 1 else np.zeros((1, 1, 1))
            hand[t:t + d] = (1 - frac) * shapes[p.start_handshape] + frac * shapes[p.end_handshape]
            spans.append(SegmentSpan(t, t + d - 1, c))
            glosses.append(c)
            prev_pos, prev_theta = wrist[t + d - 1], theta[t + d - 1]
        else:
            _, d = it
            nxt = next((items[j] for j in range(idx + 1, len(items)) if items[j][0] == "S"), None)
            if nxt is None:
                target, target_theta = rest_wrist, math.pi
            else:
                target, target_theta = np.array(protos[nxt[1]].location), protos[nxt[1]].orientation
            if idx == 0:
                # enter from a point between rest and signing space
                prev_pos = target + 0.25 * (rest_wrist - target)
                prev_theta = target_theta
            u = (np.arange(1, d + 1) / d)[:, None]
            ease = u * u * (3 - 2 * u)
            wrist[t:t + d] = prev_pos + ease * (target - prev_pos)
            theta[t:t + d] = prev_theta + ease[:, 0] * (target_theta - prev_theta)
            hand[t:t + d] = RELAXED_HAND
            prev_pos, prev_theta = target, target_theta
        t += it[-1]

    frames = np.zeros((t_total, 27, 2))
    sway = 2.0 * np.sin(2 * math.pi * np.arange(t_total) / 45.0 + rng.uniform(0, 2 * math.pi))
    for name, idx in (("nose", 0), ("l_shoulder", 1), ("r_shoulder", 2)):
        frames[:, idx] = np.array(REST[name])
        frames[:, idx, 0] += sway
    l_wrist = np.array(REST["l_wrist"]) + np.stack([sway * 0.5, np.zeros(t_total)], axis=1)
    frames[:, 5] = l_wrist
    frames[:, 6] = wrist
    for ti in range(t_total):
        frames[ti, 3] = _elbow(frames[ti, 1], l_wrist[ti], +1.0)
        frames[ti, 4] = _elbow(frames[ti, 2], wrist[ti], -1.0)
        left = _place_hand(RELAXED_HAND, l_wrist[ti], math.pi)
        right = _place_hand(hand[ti], wrist[ti], theta[ti])
        frames[ti, 7:17] = hand_to_block(left)
        frames[ti, 17:27] = hand_to_block(right)
    if cfg.noise_sigma > 0:
        frames = frames + cfg.noise_sigma * BODY_HALF_EXTENT * rng.normal(size=frames.shape)
    return frames, spans, glosses


def generate_sequence(cfg: SynthConfig, index: int, protos=None, shapes=None) -> SynthSequence:
    protos = protos or make_vocabulary(cfg)
    shapes = canonical_handshapes(cfg.num_classes) if shapes is None else shapes
    rng = np.random.default_rng([cfg.seed, 0, index])
    items = _plan(cfg, rng, _gloss_probs(cfg), protos)
    frames, spans, glosses = _render(items, protos, shapes, cfg, rng)
    labels = encode_bio(spans, len(frames))
    pose = PoseSequence(frames, cfg.fps, f"seq{cfg.seed:04d}_{index:05d}")
    return SynthSequence(pose, labels, glosses, spans)


def generate_stream(cfg: SynthConfig) -> list[SynthSequence]:
    """Generate ``cfg.num_sequences`` labeled streams; output depends only on ``cfg``."""
    protos = make_vocabulary(cfg)
    shapes = canonical_handshapes(cfg.num_classes)
    return [generate_sequence(cfg, i, protos, shapes) for i in range(cfg.num_sequences)]


# ---------------------------------------------------------------------------
# corpus on disk

def gloss_counts(seqs: list[SynthSequence]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for s in seqs:
        for g in s.glosses:
            counts[g] = counts.get(g, 0) + 1
    return dict(sorted(counts.items()))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_corpus(out_dir, cfg: SynthConfig, train_fraction: float = 0.8) -> dict:
    """Write pose files, the handshape dataset and a manifest; return the manifest."""
    out = Path(out_dir)
    (out / "poses").mkdir(parents=True, exist_ok=True)
    seqs = generate_stream(cfg)
    n_train = int(round(train_fraction * len(seqs)))
    entries = []
    for i, s in enumerate(seqs):
        path = out / "poses" / f"{s.pose.source_id}.pose"
        save_pose_file(path, s.pose, s.labels)
        entries.append({
            "id": s.pose.source_id,
            "file": str(path.relative_to(out)),
            "split": "train" if i < n_train else "test",
            "glosses": list(s.glosses),
            "spans": [[sp.start, sp.end] for sp in s.spans],
            "sha256": _sha(path),
        })
    hs_path = out / "handshapes.txt"
    save_handshape_dataset(hs_path, generate_handshape_dataset(cfg))
    manifest = {
        "format": 1,
        "config": asdict(cfg),
        "sequences": entries,
        "train_counts": {str(k): v for k, v in gloss_counts(seqs[:n_train]).items()},
        "handshape_file": hs_path.name,
        "handshape_sha256": _sha(hs_path),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
