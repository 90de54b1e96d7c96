"""Generate a few synthetic streams, train a small segmenter briefly, segment a held-out stream.

    python3 demos/quickstart.py

Runs in about a minute on one core.  The nets are far below full width, so
expect rough boundaries; the point is the shape of the API.
"""

from signseg import metrics as mt
from signseg import models as M
from signseg import synth
from signseg import training as tr
from signseg.skeleton import labels_to_string

cfg = synth.SynthConfig(seed=7, num_sequences=40, t_max=96)
seqs = synth.generate_stream(cfg)
train = tr.build_seg_data([(s.pose, s.labels) for s in seqs[:32]], cfg.t_max)
held = tr.build_seg_data([(s.pose, s.labels) for s in seqs[32:]], cfg.t_max, with_flip=False)
print(f"{len(train)} training windows, {len(held)} held-out; first labels:")
print(" ", labels_to_string(seqs[32].labels))

seg = M.SegmentationNetwork(M.SegConfig(channels=(8, 8, 8, 8, 16, 16, 16, 32, 32, 32), head_channels=32))
tr.train_stage1(
    seg, train, held, tr.TrainConfig(epochs=15, batch_size=8),
    log=lambda e: print(f"epoch {e['epoch']}: loss {e['loss']:.3f}  held-out mF1B {e['val_mf1b']:.3f}"))

pred = tr.segment(seg, held)
spans = mt.decode_bio(pred[0][: held.lengths[0]])
print("predicted:", labels_to_string(mt.encode_bio(spans, held.lengths[0])))
print("true spans:", [(s.start, s.end) for s in held.gt_spans()[0]])
print("predicted spans:", [(s.start, s.end) for s in spans])
print("scores:", {k: round(v, 3) for k, v in tr.seg_scores(pred, held).items()})
