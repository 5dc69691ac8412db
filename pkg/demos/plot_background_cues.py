"""
Does the background help?
=========================

The synthetic generator draws replay attacks whose only evidence is a dark
display bezel in the margin around the face.  A classifier that sees the whole
frame can find it; one that only sees the face crop cannot.  Grad-CAM++ shows
where the full-frame model looks.

Takes a couple of minutes on a laptop CPU.
"""

import numpy as np
from PIL import Image

from padkit.dataset import CROP, FULL, TEST, SyntheticConfig, generate_synthetic
from padkit.explain import gradcam_pp, in_box, save_overlay
from padkit.metrics import compute_report
from padkit.model import ModelConfig
from padkit.protocols import render_table
from padkit.training import TrainConfig, build_model_for, score_manifest, train

cfg = SyntheticConfig(n_subjects=16, n_train_subjects=10, attack_codes=(3, 4), seed=0)
full, crop = generate_synthetic(cfg)
print(len(full.records), "frames per variant")

# %%
# A strip of example frames: genuine, replay, and the replay's face crop
row = [full.load(full.records[0]), full.load(full.records[10])]
row.append(np.asarray(Image.fromarray(crop.load(crop.records[10])).resize((64, 64))))
Image.fromarray(np.hstack(row)).resize((384, 128), Image.NEAREST).save("frames_demo.png")

# %%
# Same strategy, same seed, two variants
models, rows = {}, []
for name, manifest in ((FULL, full), (CROP, crop)):
    model = build_model_for("bc", ModelConfig(input_size=64))
    model, log = train(model, manifest, TrainConfig(strategy="bc", epochs=6))
    models[name] = model
    report = compute_report(score_manifest(model, manifest, TEST))
    rows.append({"method": "BC", "background": "Yes" if name == FULL else "No",
                 "apcer": report.apcer, "bpcer": report.bpcer, "eer": report.eer})
    print(name, "loss by epoch", [round(v, 3) for v in log.phase("train")])

print(render_table(rows))

# %%
# Where does the full-frame model look on test replays?
attacks = [r for r in full.split(TEST) if r.is_attack][::10]
maps = [gradcam_pp(models[FULL], full.load(r)) for r in attacks]
inside = sum(in_box(h.argmax, r.cue_box) for h, r in zip(maps, attacks))
print(f"heatmap peak on the bezel for {inside}/{len(attacks)} frames")
save_overlay(maps[0], full.load(attacks[0]), "cam_demo.png")
