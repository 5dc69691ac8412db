"""
Error rates, EER and the ROC curve
==================================

Scores are attack probabilities.  A presentation counts as an attack when its
score reaches the threshold, so APCER is the share of attacks scored below it
and BPCER the share of bona fide samples scored at or above it.
"""

import numpy as np

from padkit.cli import plot_roc
from padkit.metrics import ATTACK, GENUINE, ScoreRecord, compute_report, roc_points

rng = np.random.default_rng(0)

# %%
# Two overlapping score populations
att = np.clip(rng.normal(0.7, 0.15, 400), 0, 1)
gen = np.clip(rng.normal(0.35, 0.15, 600), 0, 1)
scores = [ScoreRecord(f"a{i}", p, ATTACK, attack_type=3) for i, p in enumerate(att)]
scores += [ScoreRecord(f"g{i}", p, GENUINE) for i, p in enumerate(gen)]

report = compute_report(scores)
print(f"APCER@0.5 {100 * report.apcer:.2f}%  BPCER@0.5 {100 * report.bpcer:.2f}%")
print(f"EER {100 * report.eer:.2f}% at threshold {report.eer_threshold:.3f}")

# %%
# The ROC sweeps every distinct score.  Its first point accepts everything
# (APCER 1, BPCER 0) and its last rejects everything.
pts = roc_points(scores)
print(pts[0], pts[-1], len(pts))

# BPCER is drawn on a log axis, which spreads out the low-error region
plot_roc(scores, "roc_demo.png", title="two gaussians")
