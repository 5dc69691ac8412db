"""
Picking frames per video
========================

Frame selection trains on the three frames the current model finds hardest:
for an attack video the least attack-like ones, for a genuine video the most
attack-like ones.  At test time a video is scored by its most attack-like
frame.  Here only the second half of each attack video carries the cue.
"""

import numpy as np

from padkit.dataset import TEST, TRAIN, SyntheticConfig, generate_synthetic
from padkit.model import ModelConfig
from padkit.training import (
    PER_VIDEO_DFS,
    TrainConfig,
    build_model_for,
    group_videos,
    score_manifest,
    select_positions,
    train,
)

# %%
# The rule itself, on a hand-written probability vector
probs = [0.9, 0.1, 0.8, 0.2, 0.3]
print("attack video keeps", select_positions(probs, is_attack=True))
print("genuine video keeps", select_positions(probs, is_attack=False))

# %%
cfg = SyntheticConfig(n_subjects=8, n_train_subjects=6, videos_per_subject=4, frames_per_video=10,
                      attack_codes=(5,), background_cue_classes=frozenset(), cue_strength=1.0,
                      cue_frames=frozenset(range(5, 10)))
full, _ = generate_synthetic(cfg)
model = build_model_for("dfs", ModelConfig(input_size=64))
model, log = train(model, full, TrainConfig(strategy="dfs", epochs=8, batch_size=8))

# Which frames were picked for attack videos, epoch by epoch?
attack_ids = {v.video_id for v in group_videos(full, TRAIN) if v.is_attack}
for epoch, picked in log.selections.items():
    frames = np.concatenate([picked[v] for v in sorted(attack_ids)])
    print(f"epoch {epoch}: {np.mean(frames < 5):.0%} of picks are cue-free frames")

# %%
# One score per test video
scores = score_manifest(model, full, TEST, PER_VIDEO_DFS)
print(len(scores), "videos scored;", sum(s.attack_prob >= 0.5 for s in scores), "flagged")
