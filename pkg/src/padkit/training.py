"""Training loops for the seven strategies and test-time scoring.

``bc``/``mt`` train a :class:`~padkit.model.PadModel`; ``adv_bc``/``adv_mt``
alternate MAIN and ADVERSARY updates on a :class:`~padkit.model.UaiModel`;
the ``*dfs`` strategies wrap either loop in a per-epoch frame-selection pass.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import losses
from .dataset import TRAIN, DatasetManifest, SampleRecord, iterate_batches, load_batch
from .losses import AlphaSchedule, alpha_at
from .metrics import ATTACK, GENUINE, ScoreRecord
from .model import (
    BINARY_ONLY,
    BINARY_PLUS_MULTICLASS,
    ConfigError,
    ModelConfig,
    PadModel,
    UaiConfig,
    UaiModel,
    build_classifier,
    build_uai,
    predict_attack_prob,
)

log = logging.getLogger(__name__)

STRATEGIES = ("bc", "mt", "adv_bc", "adv_mt", "dfs", "mt_dfs", "adv_dfs")
MULTITASK = {"mt", "adv_mt", "mt_dfs"}
ADVERSARIAL = {"adv_bc", "adv_mt", "adv_dfs"}
FRAME_SELECTION = {"dfs", "mt_dfs", "adv_dfs"}
PER_FRAME = "per_frame"
PER_VIDEO_DFS = "per_video_dfs"

Iterate = Callable[..., object]


@dataclass
class TrainConfig:
    strategy: str = "bc"
    learning_rate: float = 0.001
    epochs: int = 20
    batch_size: int = 32
    alpha_schedule: AlphaSchedule = field(default_factory=AlphaSchedule)
    seed: int = 0
    dfs_frames_per_video: int = 3
    shuffle: bool = True
    # ADVERSARY updates per MAIN update
    adversary_steps: int = 1

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.dfs_frames_per_video < 1:
            raise ConfigError("dfs_frames_per_video must be >= 1")
        if self.adversary_steps < 1:
            raise ConfigError("adversary_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("alpha_schedule"), dict):
            d["alpha_schedule"] = AlphaSchedule(**d["alpha_schedule"])
        return cls(**d)


@dataclass
class LossLog:
    entries: list = field(default_factory=list)  # (epoch, phase, loss)
    alphas: dict = field(default_factory=dict)  # epoch -> alpha
    selections: dict = field(default_factory=dict)  # epoch -> {video_id: [frame_index, ...]}
    frames_seen: dict = field(default_factory=dict)  # epoch -> number of training frames

    def add(self, epoch: int, phase: str, loss: float):
        self.entries.append((epoch, phase, float(loss)))

    def phase(self, name: str) -> list:
        return [loss for _, p, loss in self.entries if p == name]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "phase", "loss"])
            for e, p, loss in self.entries:
                w.writerow([e, p, repr(loss)])


@dataclass
class VideoGroup:
    video_id: str
    label: str
    attack_type: int
    frames: list  # SampleRecord, ordered by frame_index

    def __post_init__(self):
        for r in self.frames:
            if r.label != self.label or r.attack_type != self.attack_type:
                raise ValueError(f"frame {r.path} disagrees with video {self.video_id} label")

    @property
    def is_attack(self) -> bool:
        return self.label == ATTACK


def group_videos(manifest: DatasetManifest, split: Optional[str] = None) -> list:
    groups: dict = {}
    for r in manifest.records:
        if split is None or r.split == split:
            groups.setdefault((r.subject_id, r.video_id), []).append(r)
    out = []
    for (_, vid), recs in groups.items():
        recs.sort(key=lambda r: r.frame_index)
        out.append(VideoGroup(vid, recs[0].label, recs[0].attack_type, recs))
    return out


def input_size_of(model) -> int:
    cfg = model.config
    return cfg.base.input_size if isinstance(model, UaiModel) else cfg.input_size


def build_model_for(strategy: str, model_config: ModelConfig, dim_e1: int = 128, dim_e2: int = 64,
                    dropout_rate: float = 0.5):
    """Model whose heads/assembly match ``strategy``."""
    heads = BINARY_PLUS_MULTICLASS if strategy in MULTITASK else BINARY_ONLY
    cfg = ModelConfig(**{**asdict(model_config), "heads": heads})
    if strategy in ADVERSARIAL:
        return build_uai(UaiConfig(base=cfg, dim_e1=dim_e1, dim_e2=dim_e2, dropout_rate=dropout_rate))
    return build_classifier(cfg)


_DFS_BASE = {"dfs": "bc", "mt_dfs": "mt", "adv_dfs": "adv_bc"}


def _check_model(model, strategy: str):
    strategy = _DFS_BASE.get(strategy, strategy)
    wants_uai = strategy in ADVERSARIAL
    if wants_uai and not isinstance(model, UaiModel):
        raise ConfigError(f"strategy {strategy} needs an adversarial-invariance model")
    if not wants_uai and not isinstance(model, PadModel):
        raise ConfigError(f"strategy {strategy} needs a plain classifier")
    if strategy in MULTITASK and not model.has_multiclass:
        raise ConfigError(f"strategy {strategy} needs a multiclass head")


def _tensors(batch):
    x, y, codes = batch
    return torch.from_numpy(x), torch.from_numpy(y), torch.from_numpy(codes)


def _classification_loss(probs, y, codes, multitask: bool):
    yf = y.to(torch.float32)
    if multitask:
        p_bin, p_multi = probs
        return losses.loss_multi(yf, p_bin[:, 1], codes, p_multi)
    return losses.bce(yf, probs[:, 1])


class _Stepper:
    """Owns the optimisers and performs one update per batch."""

    def __init__(self, model, config: TrainConfig):
        self.model = model
        self.cfg = config
        self.multitask = config.strategy in MULTITASK
        self.adversarial = config.strategy in ADVERSARIAL
        lr = config.learning_rate
        if self.adversarial:
            self.opt_main = torch.optim.Adam(model.main_parameters(), lr=lr)
            self.opt_adv = torch.optim.Adam(model.adversary_parameters(), lr=lr)
        else:
            self.opt_main = torch.optim.Adam(model.parameters(), lr=lr)
            self.opt_adv = None

    def step(self, x, y, codes, alpha: float) -> dict:
        model = self.model
        model.train()
        if not self.adversarial:
            loss = _classification_loss(model(x), y, codes, self.multitask)
            self.opt_main.zero_grad()
            loss.backward()
            self.opt_main.step()
            return {"train": loss.item()}
        return self.adversarial_step(x, y, codes, alpha)

    def adversarial_step(self, x, y, codes, alpha: float) -> dict:
        model = self.model
        out = model(x)
        # phase A: MAIN minimises classification + alpha*reconstruction + adversarial term
        if self.multitask:
            p_bin, p_multi = out.probs
            cls = losses.loss_class_mt(y.to(torch.float32), p_bin[:, 1], codes, p_multi, x, out.x_recon, alpha)
        else:
            cls = losses.loss_class_bc(y.to(torch.float32), out.probs[:, 1], x, out.x_recon, alpha)
        main_loss = cls + losses.loss_adv(out.e1, out.e2, out.e1_prime, out.e2_prime)
        self.opt_main.zero_grad()
        self.opt_adv.zero_grad()
        main_loss.backward()
        self.opt_main.step()
        # phase B: ADVERSARY learns to reconstruct each embedding from the other
        e1, e2 = out.e1.detach(), out.e2.detach()
        adv_loss = torch.zeros(())
        for _ in range(self.cfg.adversary_steps):
            adv_loss = losses.adversary_objective(e1, e2, model.f1(e2), model.f2(e1))
            self.opt_adv.zero_grad()
            adv_loss.backward()
            self.opt_adv.step()
        self.opt_main.zero_grad()
        return {"main": main_loss.item(), "adversary": adv_loss.item()}


def _run_epoch(stepper: _Stepper, batches, epoch: int, alpha: float, log_: LossLog):
    sums: dict = {}
    n = 0
    for batch in batches:
        x, y, codes = _tensors(batch)
        for phase, value in stepper.step(x, y, codes, alpha).items():
            sums[phase] = sums.get(phase, 0.0) + value * len(y)
        n += len(y)
    log_.frames_seen[epoch] = n
    for phase, total in sums.items():
        log_.add(epoch, phase, total / max(n, 1))


def _epochs(model, manifest, config: TrainConfig, iterate: Iterate, records_for_epoch=None):
    config.validate()
    _check_model(model, config.strategy)
    torch.manual_seed(config.seed)
    stepper = _Stepper(model, config)
    log_ = LossLog()
    size = input_size_of(model)
    for epoch in range(config.epochs):
        alpha = alpha_at(config.alpha_schedule, epoch)
        log_.alphas[epoch] = alpha
        records = records_for_epoch(epoch, log_) if records_for_epoch else None
        batches = iterate(
            manifest,
            TRAIN,
            config.batch_size,
            shuffle_seed=config.seed if config.shuffle else None,
            input_size=size,
            epoch=epoch,
            records=records,
        )
        _run_epoch(stepper, batches, epoch, alpha, log_)
    model.eval()
    return model, log_


def train_classifier(model: PadModel, manifest: DatasetManifest, config: TrainConfig,
                     iterate: Iterate = iterate_batches):
    """Minimise BCE (``bc``) or BCE + CE (``mt``) with Adam; one log row per epoch."""
    if config.strategy not in ("bc", "mt"):
        raise ConfigError(f"train_classifier does not run strategy {config.strategy!r}")
    return _epochs(model, manifest, config, iterate)


def train_adversarial(model: UaiModel, manifest: DatasetManifest, config: TrainConfig,
                      iterate: Iterate = iterate_batches):
    """Alternate MAIN and ADVERSARY updates on every batch."""
    if config.strategy not in ("adv_bc", "adv_mt"):
        raise ConfigError(f"train_adversarial does not run strategy {config.strategy!r}")
    return _epochs(model, manifest, config, iterate)


# --------------------------------------------------------------------------
# dynamic frame selection


def select_positions(probs, is_attack: bool, k: int = 3) -> list:
    """Positions of the k least attack-like frames (attack videos) or most (genuine)."""
    probs = np.asarray(probs, dtype=np.float64)
    if len(probs) < k:
        raise ValueError(f"need at least {k} frames, got {len(probs)}")
    keys = probs if is_attack else -probs
    return sorted(int(i) for i in np.argsort(keys, kind="stable")[:k])


def _frame_probs(model, video: VideoGroup, manifest: DatasetManifest, chunk: int = 256) -> np.ndarray:
    size = input_size_of(model)
    out = []
    for start in range(0, len(video.frames), chunk):
        x, _, _ = load_batch(manifest, video.frames[start:start + chunk], size)
        out.append(predict_attack_prob(model, x).numpy())
    return np.concatenate(out).astype(np.float64)


def dfs_select_frames(model, video: VideoGroup, manifest: DatasetManifest, k: int = 3) -> list:
    """Frame indices picked for learning: hardest ``k`` frames w.r.t. the video label."""
    probs = _frame_probs(model, video, manifest)
    return [video.frames[i].frame_index for i in select_positions(probs, video.is_attack, k)]


def pick_test_position(probs) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("empty video")
    return int(np.argmax(probs))


def dfs_test_select(model, video: VideoGroup, manifest: DatasetManifest) -> int:
    """Frame index with the highest attack probability (first on ties)."""
    if not video.frames:
        raise ValueError(f"video {video.video_id} has no frames")
    return video.frames[pick_test_position(_frame_probs(model, video, manifest))].frame_index


def dfs_train(model, manifest: DatasetManifest, config: TrainConfig, iterate: Iterate = iterate_batches):
    """Each epoch: select frames per video in eval mode, then learn on them."""
    if config.strategy not in FRAME_SELECTION:
        raise ConfigError(f"dfs_train does not run strategy {config.strategy!r}")
    k = config.dfs_frames_per_video
    videos = []
    for v in group_videos(manifest, TRAIN):
        if len(v.frames) < k:
            log.warning("skipping video %s: %d frames < %d", v.video_id, len(v.frames), k)
            continue
        videos.append(v)

    def select(epoch: int, log_: LossLog):
        chosen, picked = [], {}
        model.eval()
        for v in videos:
            frames = dfs_select_frames(model, v, manifest, k)
            picked[v.video_id] = frames
            keep = set(frames)
            chosen.extend(r for r in v.frames if r.frame_index in keep)
        log_.selections[epoch] = picked
        return chosen

    return _epochs(model, manifest, config, iterate, records_for_epoch=select)


def train(model, manifest: DatasetManifest, config: TrainConfig, iterate: Iterate = iterate_batches):
    """Dispatch to the loop matching ``config.strategy``."""
    config.validate()
    if config.strategy in FRAME_SELECTION:
        return dfs_train(model, manifest, config, iterate)
    if config.strategy in ADVERSARIAL:
        return train_adversarial(model, manifest, config, iterate)
    return train_classifier(model, manifest, config, iterate)


# --------------------------------------------------------------------------
# scoring


def _score(record: SampleRecord, prob: float, rid: str) -> ScoreRecord:
    return ScoreRecord(
        id=rid,
        attack_prob=min(max(float(prob), 0.0), 1.0),
        true_label=ATTACK if record.is_attack else GENUINE,
        attack_type=record.attack_type,
        subject_id=record.subject_id,
    )


def score_manifest(model, manifest: DatasetManifest, split: str, mode: str = PER_FRAME,
                   batch_size: int = 256) -> list:
    """One ScoreRecord per frame, or per video using the most attack-like frame."""
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} of {manifest.name} is empty")
    size = input_size_of(model)
    if mode == PER_FRAME:
        out = []
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            x, _, _ = load_batch(manifest, chunk, size)
            probs = predict_attack_prob(model, x).numpy()
            out.extend(_score(r, p, r.path) for r, p in zip(chunk, probs))
        return out
    if mode == PER_VIDEO_DFS:
        out = []
        for v in group_videos(manifest, split):
            probs = _frame_probs(model, v, manifest)
            i = pick_test_position(probs)
            out.append(_score(v.frames[i], probs[i], v.video_id))
        return out
    raise ValueError(f"unknown scoring mode {mode!r}")


def scoring_mode(strategy: str) -> str:
    return PER_VIDEO_DFS if strategy in FRAME_SELECTION else PER_FRAME
