"""Span files and two-row SVG timelines (ground truth above prediction)."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .metrics import MatchResult, SegmentSpan

SPAN_HEADER = "sequence_id\tstart\tend\tgloss\tmatched"


class SpanFileError(ValueError):
    pass


def write_spans(path, seq_id: str, spans, matched=None) -> None:
    """One row per span; ``gloss`` is ``-`` when unknown, ``matched`` is 0/1 or ``-``."""
    lines = [SPAN_HEADER]
    for i, sp in enumerate(spans):
        gloss = "-" if len(sp) < 3 or sp[2] is None else str(int(sp[2]))
        flag = "-" if matched is None else str(int(bool(matched[i])))
        lines.append(f"{seq_id}\t{int(sp[0])}\t{int(sp[1])}\t{gloss}\t{flag}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_spans(path) -> tuple[str | None, list[SegmentSpan], list]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SPAN_HEADER:
        raise SpanFileError(f"{path}:1: expected header {SPAN_HEADER!r}")
    seq_id, spans, flags = None, [], []
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise SpanFileError(f"{path}:{n}: expected 5 tab-separated fields, got {len(parts)}")
        try:
            start, end = int(parts[1]), int(parts[2])
            gloss = None if parts[3] == "-" else int(parts[3])
            flag = None if parts[4] == "-" else bool(int(parts[4]))
        except ValueError:
            raise SpanFileError(f"{path}:{n}: malformed number") from None
        if seq_id is not None and parts[0] != seq_id:
            raise SpanFileError(f"{path}:{n}: mixed sequence ids {seq_id!r} and {parts[0]!r}")
        seq_id = parts[0]
        spans.append(SegmentSpan(start, end, gloss))
        flags.append(flag)
    return seq_id, spans, flags


def annotate_matches(pred_spans, gt_spans, result: MatchResult) -> tuple[list[SegmentSpan], list[bool]]:
    """Prediction spans labeled with the gloss of their matched ground truth."""
    gt_of = {j: i for i, j in result.pairs}
    out, flags = [], []
    for j, sp in enumerate(pred_spans):
        if j in gt_of:
            g = gt_spans[gt_of[j]]
            out.append(SegmentSpan(sp[0], sp[1], g[2] if len(g) > 2 else None))
            flags.append(True)
        else:
            out.append(SegmentSpan(sp[0], sp[1], None))
            flags.append(False)
    return out, flags


ROW_HEIGHT = 18
ROW_GAP = 8
MARGIN = 40


def timeline_svg(seq_id: str, num_frames: int, gt_spans, pred_spans, px_per_frame: float = 4.0) -> str:
    """Filled bars mark sign segments; the empty row outline is background."""
    width = MARGIN + num_frames * px_per_frame + 10
    height = 2 * ROW_HEIGHT + ROW_GAP + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}">',
           f'<title>{escape(seq_id)}</title>']
    for row, (name, spans) in enumerate((("gt", gt_spans), ("pred", pred_spans))):
        y = 10 + row * (ROW_HEIGHT + ROW_GAP)
        label = "GT" if name == "gt" else "Pred"
        out.append(f'<text x="2" y="{y + ROW_HEIGHT - 5}" font-size="11">{label}</text>')
        out.append(f'<rect class="background" x="{MARGIN}" y="{y}" width="{num_frames * px_per_frame:g}" '
                   f'height="{ROW_HEIGHT}" fill="none" stroke="#888"/>')
        out.append(f'<g id="{name}">')
        for sp in spans:
            x = MARGIN + sp[0] * px_per_frame
            w = (sp[1] - sp[0] + 1) * px_per_frame
            out.append(f'<rect class="sign" x="{x:g}" y="{y}" width="{w:g}" height="{ROW_HEIGHT}" '
                       f'fill="#3b6ea5"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def count_bars(svg: str, row: str) -> int:
    start = svg.index(f'<g id="{row}">')
    end = svg.index("</g>", start)
    return svg[start:end].count('class="sign"')


def accuracy_table(rows: list[tuple[int, int, float | None]]) -> str:
    """Rows of (k, qualifying segments, top-1 accuracy or None)."""
    lines = ["| k | qualifying | top-1 |", "|---|---|---|"]
    for k, n, acc in rows:
        val = "undefined (no qualifying segments)" if acc is None else f"{100 * acc:.2f}%"
        lines.append(f"| {k} | {n} | {val} |")
    return "\n".join(lines) + "\n"
