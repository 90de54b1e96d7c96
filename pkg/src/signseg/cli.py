"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 missing prerequisite.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PREREQ = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# shared plumbing

def _config(args) -> dict:
    from .config import ConfigError, load_config

    values = {}
    if getattr(args, "config", None):
        try:
            values = load_config(args.config)
        except FileNotFoundError:
            raise CliError(f"config file not found: {args.config}", EXIT_CONFIG) from None
        except ConfigError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return values


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args, config: dict, inputs: list, outputs: list, t0: float) -> None:
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(config.items())},
        "seed": config.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": {str(Path(p).relative_to(out)): _sha(p) for p in sorted(outputs)},
        "wall_time_s": round(time.time() - t0, 3),
    }
    (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def _build(cls, values, required=()):
    from .config import ConfigError, build

    try:
        return build(cls, values, required)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def _check_keys(values, *classes):
    from .config import ConfigError, check_known

    try:
        check_known(values, *classes)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def load_corpus(data_dir) -> tuple[dict, list]:
    """Manifest plus ``(entry, PoseSequence, labels)`` for every listed sequence."""
    from .skeleton import PoseFormatError, SchemaError, load_pose_file

    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.json"
    if not mpath.exists():
        raise CliError(f"no manifest.json in {data_dir}", EXIT_DATA)
    manifest = json.loads(mpath.read_text())
    items = []
    for entry in manifest["sequences"]:
        try:
            pose, labels = load_pose_file(data_dir / entry["file"])
        except (PoseFormatError, SchemaError, FileNotFoundError) as exc:
            raise CliError(str(exc), EXIT_DATA) from None
        items.append((entry, pose, labels))
    return manifest, items


def _gt_spans(entry, labels):
    from .metrics import SegmentSpan, decode_bio

    glosses = entry.get("glosses") or []
    spans = decode_bio(labels)
    if len(glosses) == len(spans):
        return [SegmentSpan(s.start, s.end, g) for s, g in zip(spans, glosses)]
    return spans


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    from .synth import SynthConfig, write_corpus

    t0 = time.time()
    values = _config(args)
    allowed = {"train_fraction"}
    _check_keys({k: v for k, v in values.items() if k not in allowed}, SynthConfig)
    cfg = _build(SynthConfig, values, required=("num_sequences",))
    out = _out_dir(args, "corpus")
    manifest = write_corpus(out, cfg, float(values.get("train_fraction", 0.8)))
    outputs = [out / e["file"] for e in manifest["sequences"]] + [out / "handshapes.txt", out / "manifest.json"]
    _write_manifest(out, "gen-data", args, values, [], outputs, t0)
    print(f"wrote {len(manifest['sequences'])} sequences to {out}")
    return EXIT_OK


def _seg_data(items, split, t_max, with_flip):
    from .training import build_seg_data

    chosen = [(pose, labels) for entry, pose, labels in items if entry.get("split") == split]
    if not chosen:
        return None
    if any(lab is None for _, lab in chosen):
        raise CliError(f"{split} sequences need frame labels", EXIT_DATA)
    return build_seg_data(chosen, t_max, with_flip)


def cmd_train(args) -> int:
    import numpy as np

    from . import models as M
    from . import training as tr
    from .skeleton import load_pose_file

    t0 = time.time()
    values = _config(args)
    _check_keys(values, tr.TrainConfig, tr.LossConfig)
    cfg = _build(tr.TrainConfig, values)
    loss_cfg = _build(tr.LossConfig, values)
    out = _out_dir(args, "run")
    stage = args.stage
    log_path = out / f"stage{stage}.log.jsonl"
    ckpt = out / f"stage{stage}.ckpt"
    inputs = [args.data]

    if stage == "3":
        missing = [name for name, p in (("stage 1", args.stage1), ("stage 2", args.stage2))
                   if not p or not Path(p).exists()]
        if missing:
            raise CliError(f"stage 3 needs the {' and '.join(missing)} checkpoint (--stage1/--stage2)", EXIT_PREREQ)

    manifest, items = load_corpus(args.data)
    lines = []
    log = lambda e: lines.append(tr.epoch_log_line(e))

    if stage == "1":
        train = _seg_data(items, "train", cfg.t_max, True)
        if train is None:
            raise CliError("no training sequences in corpus", EXIT_DATA)
        val = _seg_data(items, "test", cfg.t_max, False)
        seg = M.SegmentationNetwork(M.SegConfig(channels=cfg.seg_channels, head_channels=cfg.head_channels,
                                                seed=cfg.seed))
        res = tr.train_stage1(seg, train, val, cfg, loss_cfg, log)
        M.save_models(ckpt, 1, seg=seg)
    elif stage == "2":
        try:
            samples = load_pose_file(Path(args.data) / manifest["handshape_file"])
        except Exception as exc:  # noqa: BLE001 - any parse failure is a data error here
            raise CliError(f"cannot read handshape dataset: {exc}", EXIT_DATA) from None
        x = np.stack([s.joints for s in samples])
        y = np.array([s.label for s in samples])
        if len(np.unique(y)) < 2:
            raise CliError("handshape dataset has fewer than 2 classes", EXIT_DATA)
        train, val = tr.split_handshapes(x, y, cfg.hand_val_fraction, cfg.seed)
        hand = M.HandshapeNetwork(M.HandConfig(channels=cfg.hand_channels, seed=cfg.seed))
        res = tr.train_stage2(hand, train, val, cfg, log)
        M.save_models(ckpt, 2, hand=hand)
    elif stage == "3":
        m1, s1 = M.load_models(args.stage1)
        m2, s2 = M.load_models(args.stage2)
        if "seg" not in m1:
            raise CliError(f"{args.stage1} holds no stage-1 segmentation network", EXIT_PREREQ)
        if "hand" not in m2:
            raise CliError(f"{args.stage2} holds no stage-2 handshape network", EXIT_PREREQ)
        inputs += [args.stage1, args.stage2]
        seg, hand = m1["seg"], m2["hand"]
        fusion = M.FusionModule(M.FusionConfig(dim=seg.config.feature_dim, seed=cfg.seed))
        train = _seg_data(items, "train", cfg.t_max, False)
        val = _seg_data(items, "test", cfg.t_max, False)
        res = tr.train_stage3(seg, hand, fusion, train, val, cfg, loss_cfg, log)
        M.save_models(ckpt, 3, seg=seg, hand=hand, fusion=fusion)
    else:  # gloss recognizer
        from .skeleton import prepare_sequence

        def clips_of(split):
            clips, glosses = [], []
            for entry, pose, labels in items:
                if entry.get("split") != split:
                    continue
                f, _ = prepare_sequence(pose, labels)
                spans = _gt_spans(entry, labels)
                clips += tr.segment_clips(f.channels_last(), spans)
                glosses += [sp[2] for sp in spans]
            return clips, glosses

        clips, glosses = clips_of("train")
        if not clips:
            raise CliError("no training segments in corpus", EXIT_DATA)
        val = clips_of("test")
        n_cls = int(manifest.get("config", {}).get("num_glosses", max(glosses) + 1))
        clf = M.GlossClassifier(M.GlossConfig(num_classes=n_cls, channels=cfg.gloss_channels, seed=cfg.seed))
        res = tr.train_gloss_classifier(clf, clips, glosses, val if val[0] else None, cfg, log)
        M.save_models(ckpt, 0, gloss=clf)

    log_path.write_text("".join(line + "\n" for line in lines))
    _write_manifest(out, f"train --stage {stage}", args, values, inputs, [ckpt, log_path], t0)
    print(f"stage {stage}: best epoch {res.best_epoch}, held-out {res.best_metric}; wrote {ckpt}")
    return EXIT_OK


def _pose_inputs(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            if (p / "manifest.json").exists():
                m = json.loads((p / "manifest.json").read_text())
                files += [p / e["file"] for e in m["sequences"]]
            else:
                files += sorted(p.glob("*.pose"))
        else:
            files.append(p)
    return files


def cmd_segment(args) -> int:
    import numpy as np

    from . import models as M
    from . import tensor as tc
    from .metrics import decode_bio
    from .report import write_spans
    from .skeleton import O, P, PoseFormatError, SchemaError, labels_to_string, load_pose_file, prepare_sequence

    t0 = time.time()
    values = _config(args)
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_PREREQ)
    models, stage = M.load_models(args.checkpoint)
    if "seg" not in models or stage < 1:
        raise CliError("segmentation needs a stage-1 or stage-3 checkpoint", EXIT_PREREQ)
    seg = models["seg"]
    fused = stage == 3 and "fusion" in models and "hand" in models
    out = _out_dir(args, "segments")
    outputs = []
    files = _pose_inputs(args.inputs)
    if not files:
        raise CliError("no pose files given", EXIT_DATA)
    for path in files:
        try:
            pose, _ = load_pose_file(path)
        except (PoseFormatError, SchemaError, FileNotFoundError) as exc:
            raise CliError(str(exc), EXIT_DATA) from None
        if pose.num_joints != seg.joint_count:
            raise CliError(f"{path}: {pose.num_joints} joints, model expects {seg.joint_count}", EXIT_DATA)
        f, _ = prepare_sequence(pose)
        x = f.channels_last()[None]
        mask = f.mask[None]
        with tc.no_grad():
            if fused:
                logits = M.fused_seg_forward(seg, models["hand"], models["fusion"], x, mask)
            else:
                logits = seg.forward(x, mask)[1]
        pred = np.argmax(logits.data[0], axis=-1)
        pred = np.where(pred == P, O, pred)
        spans = decode_bio(pred)
        sid = pose.source_id or path.stem
        write_spans(out / f"{sid}.spans.tsv", sid, spans)
        (out / f"{sid}.labels").write_text(labels_to_string(pred) + "\n")
        outputs += [out / f"{sid}.spans.tsv", out / f"{sid}.labels"]
    _write_manifest(out, "segment", args, values, [args.checkpoint] + [str(p) for p in files], outputs, t0)
    print(f"segmented {len(files)} sequences into {out}")
    return EXIT_OK


def _read_span_dir(d: Path) -> dict:
    from .report import SpanFileError, read_spans

    out = {}
    for p in sorted(d.glob("*.spans.tsv")):
        try:
            sid, spans, _ = read_spans(p)
        except SpanFileError as exc:
            raise CliError(str(exc), EXIT_DATA) from None
        out[sid or p.name[:-len(".spans.tsv")]] = spans
    return out


def _ground_truth(gt_path: Path) -> tuple[dict, dict]:
    """``{id: spans}`` and ``{id: frame count}`` from a corpus or a span-file directory."""
    if (gt_path / "manifest.json").exists():
        _, items = load_corpus(gt_path)
        spans, lengths = {}, {}
        for entry, pose, labels in items:
            if labels is None:
                raise CliError(f"{entry['file']}: ground truth needs frame labels", EXIT_DATA)
            spans[entry["id"]] = _gt_spans(entry, labels)
            lengths[entry["id"]] = pose.num_frames
        return spans, lengths
    spans = _read_span_dir(gt_path)
    return spans, {k: (max((s[1] for s in v), default=0) + 1) for k, v in spans.items()}


def cmd_evaluate(args) -> int:
    from .metrics import DEFAULT_BOUNDARY_THRESHOLDS, DEFAULT_IOU_THRESHOLDS, evaluate_corpus
    from .report import annotate_matches, timeline_svg, write_spans

    t0 = time.time()
    values = _config(args)
    pred = _read_span_dir(Path(args.pred))
    gt, lengths = _ground_truth(Path(args.gt))
    if args.split:
        manifest = json.loads((Path(args.gt) / "manifest.json").read_text())
        keep = {e["id"] for e in manifest["sequences"] if e.get("split") == args.split}
        gt = {k: v for k, v in gt.items() if k in keep}
    missing_pred = sorted(set(gt) - set(pred))
    extra_pred = sorted(set(pred) - set(gt))
    if missing_pred or (extra_pred and not args.split):
        msg = []
        if missing_pred:
            msg.append("no prediction for: " + ", ".join(missing_pred))
        if extra_pred:
            msg.append("no ground truth for: " + ", ".join(extra_pred))
        raise CliError("sequence id mismatch; " + "; ".join(msg), EXIT_DATA)
    ids = sorted(gt)
    bt = tuple(values.get("boundary_thresholds", DEFAULT_BOUNDARY_THRESHOLDS))
    it = tuple(values.get("iou_thresholds", DEFAULT_IOU_THRESHOLDS))
    report, results = evaluate_corpus([pred[i] for i in ids], [gt[i] for i in ids], bt, it,
                                      micro=args.micro, tolerance_basis=args.basis)
    out = _out_dir(args, "evaluation")
    (out / "timelines").mkdir(exist_ok=True)
    (out / "matched").mkdir(exist_ok=True)
    outputs = []
    for i, res in zip(ids, results):
        svg = out / "timelines" / f"{i}.svg"
        n = max(lengths.get(i, 0), max((s[1] + 1 for s in pred[i]), default=0))
        svg.write_text(timeline_svg(i, n, gt[i], pred[i]))
        spans, flags = annotate_matches(pred[i], gt[i], res)
        mpath = out / "matched" / f"{i}.spans.tsv"
        write_spans(mpath, i, spans, flags)
        outputs += [svg, mpath]
    (out / "metrics.json").write_text(report.to_text())
    outputs.append(out / "metrics.json")
    _write_manifest(out, "evaluate", args, values, [args.pred, args.gt], outputs, t0)
    print(report.to_text(), end="")
    return EXIT_OK


def _classifier(spec: str, truth: dict, num_classes: int):
    """``oracle`` / ``wrong`` for harness checks, otherwise a checkpoint path."""
    if spec == "oracle":
        return lambda seg: [truth[seg[0]]]
    if spec == "wrong":
        return lambda seg: [(truth[seg[0]] + 1) % max(num_classes, 2)]
    from . import models as M

    if not Path(spec).exists():
        raise CliError(f"recognition classifier checkpoint not found: {spec}", EXIT_PREREQ)
    models, _ = M.load_models(spec)
    if "gloss" not in models:
        raise CliError(f"{spec} holds no recognition classifier", EXIT_PREREQ)
    clf = models["gloss"]
    return lambda seg: clf.rank(seg[1])


def cmd_recognize(args) -> int:
    from .metrics import MatchedSegment, qualifying, top1_harness
    from .report import SpanFileError, accuracy_table, read_spans
    from .skeleton import prepare_sequence
    from .training import segment_clips

    t0 = time.time()
    values = _config(args)
    manifest, items = load_corpus(args.data)
    counts = {int(k): v for k, v in manifest["train_counts"].items()}
    feats = {entry["id"]: prepare_sequence(pose)[0].channels_last() for entry, pose, _ in items}
    pairs = []
    for p in sorted(Path(args.matched).glob("*.spans.tsv")):
        try:
            sid, spans, flags = read_spans(p)
        except SpanFileError as exc:
            raise CliError(str(exc), EXIT_DATA) from None
        if sid is None:
            continue
        if sid not in feats:
            raise CliError(f"{p}: sequence {sid!r} not in corpus {args.data}", EXIT_DATA)
        for sp, flag, clip in zip(spans, flags, segment_clips(feats[sid], spans)):
            if flag and sp[2] is not None:
                pairs.append(MatchedSegment(sp[2], (len(pairs), clip)))
    truth = {pr.segment[0]: pr.gt_gloss for pr in pairs}
    n_cls = int(manifest.get("config", {}).get("num_glosses", 2))
    clf = _classifier(args.classifier, truth, n_cls)
    rows = []
    for k in args.k:
        acc = top1_harness(pairs, clf, counts, k)
        rows.append((k, len(qualifying(pairs, counts, k)), acc))
    out = _out_dir(args, "recognition")
    table = accuracy_table(rows)
    (out / "recognition.md").write_text(table)
    (out / "recognition.json").write_text(json.dumps(
        {"classifier": args.classifier, "rows": [{"k": k, "qualifying": n, "top1": a} for k, n, a in rows]},
        indent=1, sort_keys=True) + "\n")
    _write_manifest(out, "recognize", args, values, [args.data, args.matched],
                    [out / "recognition.md", out / "recognition.json"], t0)
    print(table, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .metrics import MetricsReport

    t0 = time.time()
    values = _config(args)
    run = Path(args.run)
    parts = ["# Segmentation run report", ""]
    metrics_path = next(iter(sorted(run.rglob("metrics.json"))), None)
    if metrics_path is None:
        raise CliError(f"no metrics.json under {run}; run `evaluate` first", EXIT_PREREQ)
    rep = MetricsReport.from_text(metrics_path.read_text())
    fmt = lambda v: "undefined" if v is None else f"{100 * v:.2f}"
    parts += [
        f"Sequences: {rep.sequences}",
        "",
        "| metric | value |", "|---|---|",
        f"| mF1B (thresholds {rep.boundary_thresholds}) | {fmt(rep.mf1b)} |",
        f"| mF1S (IoU thresholds {rep.iou_thresholds}) | {fmt(rep.mf1s)} |",
        f"| GT matched proportion ({rep.matched}/{rep.total_gt}) | {fmt(rep.gt_matched_proportion)} |",
        f"| Pred matched proportion ({rep.matched}/{rep.total_pred}) | {fmt(rep.pred_matched_proportion)} |",
        "",
    ]
    rec = next(iter(sorted(run.rglob("recognition.md"))), None)
    if rec is not None:
        parts += ["## Recognition on matched segments", "", rec.read_text()]
    for log in sorted(run.rglob("stage*.log.jsonl")):
        lines = [json.loads(x) for x in log.read_text().splitlines() if x.strip()]
        if lines:
            last = lines[-1]
            keys = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(last.items()))
            parts += [f"## {log.name}", "", f"{len(lines)} epochs; last: {keys}", ""]
    timelines = sorted(run.rglob("timelines/*.svg"))
    if timelines:
        parts += ["## Timelines", ""] + [f"- {p.relative_to(run)}" for p in timelines] + [""]
    out = _out_dir(args, str(run))
    target = out / "report.md"
    target.write_text("\n".join(parts))
    if out != run:
        _write_manifest(out, "report", args, values, [str(run)], [target], t0)
    print(f"wrote {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=d, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=d, help="BLAS threads (default: all cores)")
    p.add_argument("--out", default=d, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signseg", description="Sign boundary detection from skeletal streams.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _global_flags(p, True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    _global_flags(p, True)
    p.add_argument("--stage", required=True, choices=["1", "2", "3", "gloss"])
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--stage1", help="stage-1 checkpoint (stage 3)")
    p.add_argument("--stage2", help="stage-2 checkpoint (stage 3)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="predict sign spans for pose files")
    _global_flags(p, True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="pose files or directories")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predicted spans against ground truth")
    _global_flags(p, True)
    p.add_argument("--pred", required=True, help="directory of .spans.tsv files")
    p.add_argument("--gt", required=True, help="corpus directory or directory of .spans.tsv files")
    p.add_argument("--split", help="only evaluate sequences of this corpus split")
    p.add_argument("--micro", action="store_true", help="pool matches over the corpus")
    p.add_argument("--basis", choices=["gt", "pred"], default="gt", help="duration that sets the tolerance")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recognize", help="top-1 accuracy on matched segments per training-count threshold")
    _global_flags(p, True)
    p.add_argument("--classifier", required=True, help="checkpoint path, or 'oracle' / 'wrong'")
    p.add_argument("--matched", required=True, help="matched span directory from evaluate")
    p.add_argument("--data", required=True, help="corpus directory (features and train counts)")
    p.add_argument("--k", type=int, nargs="+", default=[6, 10, 15, 20, 30])
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("report", help="summarize a run directory")
    _global_flags(p, True)
    p.add_argument("run", help="directory holding evaluate/recognize outputs")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads or os.cpu_count() or 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))
    try:
        return args.func(args)
    except CliError as exc:
        print(f"signseg {args.command}: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
