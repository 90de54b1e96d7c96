"""BIO decoding, boundary/segment F1 metrics and tolerance-based matching."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

P, O, I, B = 0, 1, 2, 3

DEFAULT_BOUNDARY_THRESHOLDS = (1, 2, 3, 4)
DEFAULT_IOU_THRESHOLDS = tuple(round(0.40 + 0.05 * i, 2) for i in range(8))
RECOGNITION_K_GRID = (6, 10, 15, 20, 30)


class SegmentSpan(NamedTuple):
    start: int
    end: int  # inclusive
    gloss: int | None = None

    @property
    def duration(self) -> int:
        return self.end - self.start + 1


class OrphanInsideError(ValueError):
    pass


def decode_bio(labels, strict: bool = False) -> list[SegmentSpan]:
    """Turn frame labels into segments.

    A segment is a B frame plus the run of I frames that follows it.  An I run
    with no B in front starts its own segment (or raises, if ``strict``).
    P frames are treated like O.
    """
    spans = []
    start = None
    labels = [int(v) for v in labels]
    for t, lab in enumerate(labels):
        if lab == B:
            if start is not None:
                spans.append(SegmentSpan(start, t - 1))
            start = t
        elif lab == I:
            if start is None:
                if strict:
                    raise OrphanInsideError(f"I frame at {t} without a preceding B")
                start = t
        else:
            if start is not None:
                spans.append(SegmentSpan(start, t - 1))
            start = None
    if start is not None:
        spans.append(SegmentSpan(start, len(labels) - 1))
    return spans


def encode_bio(spans: Iterable, t: int) -> np.ndarray:
    """Inverse of :func:`decode_bio` for sorted, disjoint spans."""
    out = np.full(t, O, dtype=np.int64)
    prev_end = -1
    for sp in spans:
        s, e = int(sp[0]), int(sp[1])
        if s <= prev_end:
            raise ValueError(f"span ({s}, {e}) overlaps or precedes the previous span")
        if not 0 <= s <= e < t:
            raise ValueError(f"span ({s}, {e}) outside [0, {t})")
        out[s] = B
        out[s + 1:e + 1] = I
        prev_end = e
    return out


def boundaries(spans: Iterable) -> list[int]:
    return [int(sp[0]) for sp in spans]


# ---------------------------------------------------------------------------
# matching

@dataclass
class MatchResult:
    pairs: list          # (gt index, pred index)
    unmatched_gt: list
    unmatched_pred: list

    @property
    def num_matches(self) -> int:
        return len(self.pairs)


def max_matching(n_gt: int, n_pred: int, admissible: Callable[[int, int], bool],
                 cost: Callable[[int, int], float] | None = None) -> MatchResult:
    """Maximum-cardinality one-to-one matching.

    Pairs are first taken greedily in order of increasing ``cost``; augmenting
    paths then enlarge the greedy matching until it is maximum, so the
    result keeps the greedy preference for close pairs wherever it is not
    forced to give it up.
    """
    adj = [[j for j in range(n_pred) if admissible(i, j)] for i in range(n_gt)]
    cand = [(cost(i, j) if cost else 0.0, i, j) for i in range(n_gt) for j in adj[i]]
    cand.sort()
    gt_of = [-1] * n_pred
    pred_of = [-1] * n_gt
    for _, i, j in cand:
        if pred_of[i] < 0 and gt_of[j] < 0:
            pred_of[i], gt_of[j] = j, i

    def augment(i, seen):
        for j in adj[i]:
            if j in seen:
                continue
            seen.add(j)
            if gt_of[j] < 0 or augment(gt_of[j], seen):
                gt_of[j], pred_of[i] = i, j
                return True
        return False

    for i in range(n_gt):
        if pred_of[i] < 0:
            augment(i, set())
    pairs = [(i, pred_of[i]) for i in range(n_gt) if pred_of[i] >= 0]
    return MatchResult(pairs,
                       [i for i in range(n_gt) if pred_of[i] < 0],
                       [j for j in range(n_pred) if gt_of[j] < 0])


def f1_from_counts(matches: int, n_pred: int, n_gt: int) -> float:
    if n_pred + n_gt == 0:
        return 1.0
    return 2.0 * matches / (n_pred + n_gt)


def match_boundaries(pred: Sequence[int], gt: Sequence[int], threshold: float) -> MatchResult:
    """Pairs with distance strictly below ``threshold``."""
    return max_matching(len(gt), len(pred), lambda i, j: abs(pred[j] - gt[i]) < threshold,
                        lambda i, j: abs(pred[j] - gt[i]))


def iou(a, b) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def match_segments_iou(pred: Sequence, gt: Sequence, threshold: float) -> MatchResult:
    """Pairs whose IoU strictly exceeds ``threshold``."""
    return max_matching(len(gt), len(pred), lambda i, j: iou(pred[j], gt[i]) > threshold,
                        lambda i, j: -iou(pred[j], gt[i]))


def _is_span(x) -> bool:
    return isinstance(x, SegmentSpan) or (
        isinstance(x, (tuple, list, np.ndarray)) and len(x) in (2, 3)
        and all(isinstance(v, (int, np.integer)) or v is None for v in x))


def _as_corpus(pred, gt, is_item):
    """Wrap a single sequence into a one-sequence corpus."""
    first = next((x for x in (gt[:1] or pred[:1])), None)
    if first is None or is_item(first):
        return [pred], [gt]
    return pred, gt


def _corpus_f1(preds, gts, thresholds, match_fn, micro: bool) -> float:
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("threshold set is empty")
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth corpora differ in length")
    if not gts:
        raise ValueError("empty corpus")
    if micro:
        scores = []
        for th in thresholds:
            m = npred = ngt = 0
            for p, g in zip(preds, gts):
                m += match_fn(p, g, th).num_matches
                npred += len(p)
                ngt += len(g)
            scores.append(f1_from_counts(m, npred, ngt))
        return float(np.mean(scores))
    per_seq = []
    for p, g in zip(preds, gts):
        per_seq.append(np.mean([f1_from_counts(match_fn(p, g, th).num_matches, len(p), len(g))
                                for th in thresholds]))
    return float(np.mean(per_seq))


def mf1b(pred_boundaries, gt_boundaries, thresholds=DEFAULT_BOUNDARY_THRESHOLDS,
         micro: bool = False) -> float:
    """Mean boundary F1 over distance thresholds, then over sequences.

    Accepts one sequence (a list of frame indices) or a corpus (a list of such
    lists).  ``micro`` pools matches over the corpus before computing F1.
    """
    pred_boundaries, gt_boundaries = _as_corpus(list(pred_boundaries), list(gt_boundaries),
                                                lambda x: isinstance(x, (int, np.integer)))
    return _corpus_f1(pred_boundaries, gt_boundaries, thresholds, match_boundaries, micro)


def mf1s(pred_spans, gt_spans, iou_thresholds=DEFAULT_IOU_THRESHOLDS, micro: bool = False) -> float:
    """Mean segment F1 over IoU thresholds, then over sequences."""
    pred_spans, gt_spans = _as_corpus(list(pred_spans), list(gt_spans), _is_span)
    return _corpus_f1(pred_spans, gt_spans, iou_thresholds, match_segments_iou, micro)


# ---------------------------------------------------------------------------
# boundary tolerance

def tolerance_for_duration(d: int) -> int:
    """Allowed start/end offset (frames) for a sign lasting ``d`` frames."""
    if d < 1:
        raise ValueError(f"duration must be at least 1 frame, got {d}")
    if d <= 5:
        return 2
    if d <= 10:
        return 3
    if d <= 23:
        return 4
    return 5


def match_tolerance(gt_spans: Sequence, pred_spans: Sequence, basis: str = "gt") -> MatchResult:
    """One-to-one matching where both start and end lie within the duration tolerance.

    The tolerance comes from the ground-truth duration by default;
    ``basis="pred"`` uses the predicted segment's duration instead.
    """
    if basis not in ("gt", "pred"):
        raise ValueError("basis must be 'gt' or 'pred'")

    def ok(i, j):
        g, p = gt_spans[i], pred_spans[j]
        ref = g if basis == "gt" else p
        tol = tolerance_for_duration(ref[1] - ref[0] + 1)
        return abs(p[0] - g[0]) <= tol and abs(p[1] - g[1]) <= tol

    def dist(i, j):
        g, p = gt_spans[i], pred_spans[j]
        return abs(p[0] - g[0]) + abs(p[1] - g[1])

    return max_matching(len(gt_spans), len(pred_spans), ok, dist)


def matched_proportions(results: Iterable[MatchResult]):
    """Corpus-level (gt_prop, pred_prop); ``None`` where a denominator is zero."""
    m = ngt = npred = 0
    for r in results:
        m += r.num_matches
        ngt += r.num_matches + len(r.unmatched_gt)
        npred += r.num_matches + len(r.unmatched_pred)
    return (m / ngt if ngt else None), (m / npred if npred else None)


def proportions_from_counts(matches: int, total_gt: int, total_pred: int):
    """Same arithmetic as :func:`matched_proportions`, from raw counts."""
    return (matches / total_gt if total_gt else None), (matches / total_pred if total_pred else None)


# ---------------------------------------------------------------------------
# recognition harness

class MatchedSegment(NamedTuple):
    gt_gloss: int
    segment: object  # whatever the classifier consumes


def qualifying(pairs: Sequence[MatchedSegment], train_counts: dict, k: int) -> list[MatchedSegment]:
    return [p for p in pairs if train_counts.get(int(p.gt_gloss), 0) >= k]


def top1_harness(pairs: Sequence[MatchedSegment], classifier: Callable, train_counts: dict,
                 k: int) -> float | None:
    """Top-1 accuracy over matched segments whose class has at least ``k`` training samples.

    ``classifier(segment)`` returns class ids ranked best-first.  Returns
    ``None`` when no pair qualifies.
    """
    q = qualifying(pairs, train_counts, k)
    if not q:
        return None
    hits = 0
    for p in q:
        ranked = list(classifier(p.segment))
        hits += bool(ranked) and int(ranked[0]) == int(p.gt_gloss)
    return hits / len(q)


# ---------------------------------------------------------------------------
# report

@dataclass
class MetricsReport:
    mf1b: float
    mf1s: float
    gt_matched_proportion: float | None
    pred_matched_proportion: float | None
    boundary_thresholds: list = field(default_factory=lambda: list(DEFAULT_BOUNDARY_THRESHOLDS))
    iou_thresholds: list = field(default_factory=lambda: list(DEFAULT_IOU_THRESHOLDS))
    matched: int = 0
    total_gt: int = 0
    total_pred: int = 0
    top1_accuracy_by_k: dict = field(default_factory=dict)
    sequences: int = 0

    def __post_init__(self):
        for name in ("mf1b", "mf1s", "gt_matched_proportion", "pred_matched_proportion"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_text(self) -> str:
        d = asdict(self)
        d["top1_accuracy_by_k"] = {str(k): v for k, v in sorted(self.top1_accuracy_by_k.items())}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["top1_accuracy_by_k"] = {int(k): v for k, v in d.get("top1_accuracy_by_k", {}).items()}
        return cls(**d)


def evaluate_corpus(pred_spans: Sequence[Sequence], gt_spans: Sequence[Sequence],
                    boundary_thresholds=DEFAULT_BOUNDARY_THRESHOLDS,
                    iou_thresholds=DEFAULT_IOU_THRESHOLDS, micro: bool = False,
                    tolerance_basis: str = "gt") -> tuple[MetricsReport, list[MatchResult]]:
    results = [match_tolerance(g, p, tolerance_basis) for p, g in zip(pred_spans, gt_spans)]
    gp, pp = matched_proportions(results)
    report = MetricsReport(
        mf1b=mf1b([boundaries(p) for p in pred_spans], [boundaries(g) for g in gt_spans],
                  boundary_thresholds, micro),
        mf1s=mf1s([list(p) for p in pred_spans], [list(g) for g in gt_spans], iou_thresholds, micro),
        gt_matched_proportion=gp,
        pred_matched_proportion=pp,
        boundary_thresholds=list(boundary_thresholds),
        iou_thresholds=list(iou_thresholds),
        matched=sum(r.num_matches for r in results),
        total_gt=sum(len(g) for g in gt_spans),
        total_pred=sum(len(p) for p in pred_spans),
        sequences=len(gt_spans),
    )
    return report, results


def frame_accuracy(pred_labels: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred_labels, labels = np.asarray(pred_labels), np.asarray(labels)
    if mask is None:
        return float(np.mean(pred_labels == labels))
    mask = np.asarray(mask, dtype=bool)
    return float(np.mean(pred_labels[mask] == labels[mask])) if mask.any() else math.nan
