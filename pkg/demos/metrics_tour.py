"""Boundary F1, segment F1, the duration tolerance and the recognition filter on small hand-made cases.

    python3 demos/metrics_tour.py
"""
from signseg import metrics as mt
from signseg.skeleton import labels_from_string

truth = labels_from_string("OOBIIIIOOBIIIBIIIOO")
guess = labels_from_string("OOOBIIIOOBIIIIIIIOO")
gt, pred = mt.decode_bio(truth), mt.decode_bio(guess)
print("gt spans  ", [(s.start, s.end) for s in gt])
print("pred spans", [(s.start, s.end) for s in pred])

# one boundary is a frame late, and the adjacent-sign boundary at 13 is missed
for th in mt.DEFAULT_BOUNDARY_THRESHOLDS:
    r = mt.match_boundaries(mt.boundaries(pred), mt.boundaries(gt), th)
    print(f"boundaries within <{th} frames: {r.num_matches} matched")
print("mF1B", round(mt.mf1b(mt.boundaries(pred), mt.boundaries(gt)), 3))
print("mF1S", round(mt.mf1s(pred, gt), 3))

# tolerance grows with the sign's duration
for d in (3, 8, 15, 40):
    print(f"a {d}-frame sign may be off by {mt.tolerance_for_duration(d)} frames at each end")
r = mt.match_tolerance(gt, pred)
print("tolerance matches", r.pairs, "proportions", mt.matched_proportions([r]))

# recognition only counts segments whose gloss has >= k training samples
pairs = [mt.MatchedSegment(0, "a"), mt.MatchedSegment(1, "b"), mt.MatchedSegment(2, "c")]
counts = {0: 40, 1: 12, 2: 7}
guesses = {"a": [0], "b": [2], "c": [2]}
for k in (6, 10, 15):
    print(f"k={k}: top-1 {mt.top1_harness(pairs, guesses.get, counts, k)}")
