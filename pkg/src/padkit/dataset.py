"""Manifests of labelled face images, in full-frame and face-crop variants.

A manifest is an ordered list of :class:`SampleRecord` rows plus, optionally,
an in-memory image store (used by the synthetic generator so that tests do
not need to touch disk).  Records reference images by a path relative to the
manifest root, laid out as ``<variant>/<subject>/<video>/<frame_index>.png``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import cv2
import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

GENUINE = "genuine"
ATTACK = "attack"
FULL = "full"
CROP = "crop"
TRAIN = "train"
TEST = "test"
DATASET_NAMES = ("rose_youtu", "nuaa", "replay_attack", "synthetic")
MANIFEST_FIELDS = ["path", "subject_id", "video_id", "frame_index", "label", "attack_type", "variant", "split"]


class ManifestError(ValueError):
    pass


class IngestionError(RuntimeError):
    pass


class NoFaceError(RuntimeError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class AttackType:
    code: int
    description: str

    @property
    def is_genuine(self) -> bool:
        return self.code == 0

    @property
    def category(self) -> str:
        if self.code == 0:
            return "genuine"
        if self.code in (1, 2):
            return "print"
        if self.code in (3, 4):
            return "replay"
        return "mask"


ATTACK_TYPES = {
    0: AttackType(0, "Genuine (bona fide)"),
    1: AttackType(1, "Still printed paper"),
    2: AttackType(2, "Quivering printed paper"),
    3: AttackType(3, "Video which records a Lenovo LCD display"),
    4: AttackType(4, "Video which records a Mac LCD display"),
    5: AttackType(5, "Paper mask with two eyes and mouth cropped out"),
    6: AttackType(6, "Paper mask without cropping"),
    7: AttackType(7, "Paper mask with the upper part cut in the middle"),
}


@dataclass(frozen=True)
class SampleRecord:
    path: str
    subject_id: int
    video_id: str
    frame_index: int
    label: str
    attack_type: int
    variant: str = FULL
    split: str = TRAIN
    # full-image (x0, y0, x1, y1) of a rendered cue; synthetic data only
    cue_box: Optional[tuple] = None

    def __post_init__(self):
        if self.label not in (GENUINE, ATTACK):
            raise ManifestError(f"unknown label {self.label!r}")
        if self.attack_type not in ATTACK_TYPES:
            raise ManifestError(f"attack type {self.attack_type} outside 0..7")
        if (self.label == GENUINE) != (self.attack_type == 0):
            raise ManifestError(f"{self.path}: label {self.label} inconsistent with attack type {self.attack_type}")
        if self.frame_index < 0:
            raise ManifestError(f"{self.path}: negative frame index")
        if self.variant not in (FULL, CROP):
            raise ManifestError(f"unknown variant {self.variant!r}")
        if self.split not in (TRAIN, TEST):
            raise ManifestError(f"unknown split {self.split!r}")

    @property
    def key(self) -> tuple:
        return (self.subject_id, self.video_id, self.frame_index)

    @property
    def is_attack(self) -> bool:
        return self.label == ATTACK


@dataclass
class DatasetManifest:
    name: str
    records: list = field(default_factory=list)
    attack_codes_present: Optional[set] = None
    root: Optional[Path] = None
    images: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ManifestError(f"unknown dataset {self.name!r}")
        if self.attack_codes_present is None:
            self.attack_codes_present = {r.attack_type for r in self.records}
        else:
            self.attack_codes_present = set(self.attack_codes_present)

    def __len__(self):
        return len(self.records)

    def split(self, which: str) -> list:
        return [r for r in self.records if r.split == which]

    def subjects(self, which: Optional[str] = None) -> set:
        return {r.subject_id for r in self.records if which is None or r.split == which}

    def with_records(self, records: list, **changes) -> "DatasetManifest":
        return DatasetManifest(
            name=changes.get("name", self.name),
            records=list(records),
            attack_codes_present=changes.get("attack_codes_present"),
            root=self.root,
            images=self.images,
        )

    def validate(self) -> None:
        overlap = self.subjects(TRAIN) & self.subjects(TEST)
        if overlap:
            raise ManifestError(f"subjects in both splits: {sorted(overlap)}")
        seen = set()
        for r in self.records:
            if r.attack_type not in self.attack_codes_present:
                raise ManifestError(f"{r.path}: attack type {r.attack_type} not declared present")
            k = (r.video_id, r.variant, r.frame_index)
            if k in seen:
                raise ManifestError(f"duplicate frame {k}")
            seen.add(k)

    def load(self, record: SampleRecord) -> np.ndarray:
        """Decoded RGB uint8 image for ``record``."""
        img = self.images.get(record.path)
        if img is not None:
            return img
        path = Path(record.path)
        if not path.is_absolute() and self.root is not None:
            path = Path(self.root) / path
        try:
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"))
        except (OSError, ValueError) as exc:
            raise IngestionError(f"cannot decode image {path}: {exc}") from exc


# --------------------------------------------------------------------------
# persistence


def frame_relpath(variant: str, subject_id: int, video_id: str, frame_index: int) -> str:
    return f"{variant}/{subject_id}/{video_id}/{frame_index}.png"


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in manifest.records:
            w.writerow([r.path, r.subject_id, r.video_id, r.frame_index, r.label, r.attack_type, r.variant, r.split])


def read_manifest(path, name: str, root=None) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ManifestError(f"{path}: expected header {','.join(MANIFEST_FIELDS)}")
        records = [
            SampleRecord(
                path=row["path"],
                subject_id=int(row["subject_id"]),
                video_id=row["video_id"],
                frame_index=int(row["frame_index"]),
                label=row["label"],
                attack_type=int(row["attack_type"]),
                variant=row["variant"],
                split=row["split"],
            )
            for row in reader
        ]
    return DatasetManifest(name=name, records=records, root=Path(root) if root else path.parent)


def save_images(manifest: DatasetManifest, root) -> int:
    """Write in-memory images as PNGs under ``root``; existing files are kept."""
    root = Path(root)
    written = 0
    for r in manifest.records:
        dest = root / r.path
        if dest.exists():
            continue
        dest.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(manifest.load(r)).save(dest)
        written += 1
    return written


# --------------------------------------------------------------------------
# ingestion


def extract_frames(video_path, stride: int = 1) -> list:
    """Decode ``video_path`` and keep every ``stride``-th frame as RGB."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    video_path = str(video_path)
    cap = cv2.VideoCapture(video_path)
    if not cap.isOpened():
        raise IngestionError(f"cannot open video {video_path}")
    frames = []
    idx = 0
    try:
        while True:
            ok, bgr = cap.read()
            if not ok:
                break
            if idx % stride == 0:
                frames.append((idx, cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)))
            idx += 1
    finally:
        cap.release()
    if idx == 0:
        raise IngestionError(f"no decodable frames in {video_path}")
    return frames


Detection = tuple  # ((x0, y0, x1, y1), confidence)
FaceDetector = Callable[[np.ndarray], Sequence[Detection]]


class CentralFaceDetector:
    """Reports one box covering the central ``fraction`` of the image.

    This is exactly where the synthetic generator draws faces, so it stands in
    for a learned detector in tests and demos.
    """

    def __init__(self, fraction: float = 0.5):
        self.fraction = fraction

    def __call__(self, image: np.ndarray):
        h, w = image.shape[:2]
        bh, bw = int(round(h * self.fraction)), int(round(w * self.fraction))
        y0, x0 = (h - bh) // 2, (w - bw) // 2
        return [((x0, y0, x0 + bw, y0 + bh), 1.0)]


def crop_face(image: np.ndarray, detector: FaceDetector) -> np.ndarray:
    """Crop the highest-confidence detection (raw box, no margin)."""
    dets = list(detector(image))
    if not dets:
        raise NoFaceError("no face detected")
    (x0, y0, x1, y1), _ = max(dets, key=lambda d: d[1])
    h, w = image.shape[:2]
    x0, y0 = max(0, int(round(x0))), max(0, int(round(y0)))
    x1, y1 = min(w, int(round(x1))), min(h, int(round(y1)))
    if x1 <= x0 or y1 <= y0:
        raise NoFaceError("detection box lies outside the image")
    return image[y0:y1, x0:x1].copy()


ROSE_YOUTU_TRAIN = frozenset({2, 3, 4, 5, 6, 7, 9, 10, 11, 12})
ROSE_YOUTU_SUBJECTS = frozenset(range(2, 24))


def rose_youtu_split(manifest: DatasetManifest) -> DatasetManifest:
    """Assign the subject-disjoint train/test split used for ROSE-Youtu."""
    if manifest.name != "rose_youtu":
        raise ManifestError(f"rose_youtu_split applied to {manifest.name!r}")
    unknown = manifest.subjects() - ROSE_YOUTU_SUBJECTS
    if unknown:
        raise ManifestError(f"unknown ROSE-Youtu subject ids {sorted(unknown)}")
    records = [replace(r, split=TRAIN if r.subject_id in ROSE_YOUTU_TRAIN else TEST) for r in manifest.records]
    return manifest.with_records(records, attack_codes_present=manifest.attack_codes_present)


# ROSE-Youtu file names start with a type prefix, e.g. "Vm_..." for a Mac replay.
ROSE_YOUTU_PREFIX = {"G": 0, "Ps": 1, "Pq": 2, "Vl": 3, "Vm": 4, "Mc": 5, "Mf": 6, "Mu": 7}


def rose_youtu_attack_code(filename: str) -> int:
    prefix = Path(filename).name.split("_", 1)[0]
    if prefix not in ROSE_YOUTU_PREFIX:
        raise ManifestError(f"{filename}: unrecognised ROSE-Youtu type prefix {prefix!r}")
    return ROSE_YOUTU_PREFIX[prefix]


# --------------------------------------------------------------------------
# protocol filtering and batching


def filter_attacks(manifest: DatasetManifest, train_codes: Iterable[int], test_codes: Iterable[int]) -> DatasetManifest:
    """Keep genuine plus ``train_codes`` in train and genuine plus ``test_codes`` in test."""
    train_codes, test_codes = set(train_codes), set(test_codes)
    if 0 in train_codes or 0 in test_codes:
        raise ProtocolError("genuine (0) is always kept; pass attack codes only")
    absent = (train_codes | test_codes) - manifest.attack_codes_present
    if absent:
        raise ProtocolError(f"attack codes {sorted(absent)} not present in {manifest.name}")
    keep = []
    for r in manifest.records:
        allowed = train_codes if r.split == TRAIN else test_codes
        if r.attack_type == 0 or r.attack_type in allowed:
            keep.append(r)
    out = manifest.with_records(keep, attack_codes_present={0} | train_codes | test_codes)
    for split in (TRAIN, TEST):
        if not out.split(split):
            raise ProtocolError(f"{split} split is empty after attack filtering")
    return out


def load_batch(manifest: DatasetManifest, records: Sequence[SampleRecord], input_size: Optional[int] = None):
    """Stack records into (images NCHW float32 in [0,1], binary labels, attack labels)."""
    imgs = []
    for r in records:
        img = manifest.load(r)
        if input_size is not None and img.shape[:2] != (input_size, input_size):
            img = cv2.resize(img, (input_size, input_size), interpolation=cv2.INTER_LINEAR)
        imgs.append(img)
    x = np.stack(imgs).astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    y = np.array([1 if r.is_attack else 0 for r in records], dtype=np.int64)
    codes = np.array([r.attack_type for r in records], dtype=np.int64)
    return x, y, codes


def iterate_batches(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    input_size: Optional[int] = None,
    epoch: int = 0,
    records: Optional[Sequence[SampleRecord]] = None,
) -> Iterator[tuple]:
    """Yield ``(images, binary_labels, attack_labels)`` over one epoch.

    With ``shuffle_seed`` set the order is a permutation drawn from
    ``(shuffle_seed, epoch)``; otherwise manifest order is kept.  ``records``
    overrides the split selection (used for DFS-selected frames).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    recs = list(records) if records is not None else manifest.split(split)
    order = np.arange(len(recs))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(recs))
    for start in range(0, len(recs), batch_size):
        chunk = [recs[i] for i in order[start:start + batch_size]]
        yield load_batch(manifest, chunk, input_size)


# --------------------------------------------------------------------------
# synthetic substitute


@dataclass(frozen=True)
class SyntheticConfig:
    n_subjects: int = 30
    n_train_subjects: int = 20
    videos_per_subject: int = 10
    frames_per_video: int = 10
    image_size: int = 64
    face_fraction: float = 0.5
    cue_strength: float = 0.8
    # width in pixels of background cues (bezel / paper edge / pin band)
    cue_thickness: int = 8
    attack_codes: tuple = (1, 2, 3, 4, 5, 6, 7)
    background_cue_classes: frozenset = frozenset({3, 4})
    # frames that carry the attack cue; None means every frame
    cue_frames: Optional[frozenset] = None
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_video < 3:
            raise ValueError("frames_per_video must be >= 3")
        if not 0.0 <= self.cue_strength <= 1.0:
            raise ValueError("cue_strength must lie in [0, 1]")
        if not 0 < self.n_train_subjects <= self.n_subjects:
            raise ValueError("n_train_subjects must lie in 1..n_subjects")
        if not set(self.attack_codes) <= set(range(1, 8)):
            raise ValueError("attack_codes must be drawn from 1..7")
        if self.videos_per_subject < 1:
            raise ValueError("videos_per_subject must be >= 1")
        if self.face_box()[0] < self.cue_thickness:
            raise ValueError("background margin narrower than cue_thickness")

    def face_box(self) -> tuple:
        """(x0, y0, x1, y1) of the face region, identical to the crop box."""
        f = int(round(self.image_size * self.face_fraction))
        m = (self.image_size - f) // 2
        return (m, m, m + f, m + f)


def _video_codes(cfg: SyntheticConfig) -> list:
    """Attack code of each video of a subject: even slots genuine, odd slots cycle attacks."""
    codes = []
    k = 0
    for v in range(cfg.videos_per_subject):
        if v % 2 == 0 or not cfg.attack_codes:
            codes.append(0)
        else:
            codes.append(cfg.attack_codes[k % len(cfg.attack_codes)])
            k += 1
    return codes


def _draw_face(img, box, skin, rng, yy, xx):
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2 + rng.uniform(-1, 1), (y0 + y1) / 2 + rng.uniform(-1, 1)
    rx, ry = (x1 - x0) * 0.42, (y1 - y0) * 0.48
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img[inside] = skin
    s = (x1 - x0) / 32.0
    for ex in (-7, 7):
        eye = ((xx - (cx + ex * s)) ** 2 + (yy - (cy - 4 * s)) ** 2) <= (2.2 * s) ** 2
        img[eye] = (40, 30, 30)
    mouth = (np.abs(yy - (cy + 8 * s)) <= 1.2 * s) & (np.abs(xx - cx) <= 6 * s)
    img[mouth] = (150, 60, 60)
    return inside


def _face_cue(img, code, face_mask, strength, rng, yy, xx, frame):
    amp = 70.0 * strength
    if code in (1, 2):
        # halftone print dots; quivering prints shift the grid per frame
        shift = frame % 3 if code == 2 else 0
        pattern = (((yy + shift) % 3 == 0) & ((xx + shift) % 3 == 0))
        delta = -amp * pattern
    elif code in (3, 4):
        period = 4 if code == 3 else 6
        delta = amp * 0.6 * np.sin(2 * np.pi * yy / period)
    elif code == 5:
        delta = amp * 0.8 * (((xx // 4) + (yy // 4)) % 2 == 0)
    elif code == 6:
        delta = -amp * 0.7 * ((xx % 4) < 2)
    else:
        cy = yy[face_mask].mean() if face_mask.any() else 0
        delta = -amp * (np.abs(yy - cy) <= 1.5)
    img[face_mask] += np.asarray(delta, dtype=np.float64)[face_mask][:, None]


def _background_cue(img, code, box, size, strength, geom, thick):
    """Render a cue strictly outside the face box; returns its bounding box."""
    x0f, y0f, x1f, y1f = box
    side, offset, along, length = geom
    margin = x0f  # face box is centred, so all four margins are equal
    pos = int(offset * (margin - thick))
    start = int(along * (size - length))
    if side == 0:  # left
        cb = (pos, start, pos + thick, start + length)
    elif side == 1:  # right
        cb = (size - pos - thick, start, size - pos, start + length)
    elif side == 2:  # top
        cb = (start, pos, start + length, pos + thick)
    else:  # bottom
        cb = (start, size - pos - thick, start + length, size - pos)
    cx0, cy0, cx1, cy1 = cb
    category = ATTACK_TYPES[code].category
    if category == "replay":
        # dark display bezel
        img[cy0:cy1, cx0:cx1] = img[cy0:cy1, cx0:cx1] * (1 - strength) + 15 * strength
    elif category == "print":
        img[cy0:cy1, cx0:cx1] = img[cy0:cy1, cx0:cx1] * (1 - strength) + 250 * strength
    else:
        # paper-mask pins: a grid of bright dots
        for k in range(cx0 + 1, cx1 - 1, 3):
            for j in range(cy0 + 1, cy1 - 1, 3):
                img[j:j + 2, k:k + 2] = img[j:j + 2, k:k + 2] * (1 - strength) + 245 * strength
    return cb


def generate_synthetic(config: SyntheticConfig) -> tuple:
    """Render paired (full, crop) manifests with images held in memory.

    Attack codes in ``background_cue_classes`` get their artifact only in the
    background margin; all other attacks get an in-face texture artifact;
    genuine frames get neither.  Each crop is the exact face box of its full
    frame.  Subjects ``1..n_train_subjects`` form the train split.
    """
    cfg = config
    size = cfg.image_size
    box = cfg.face_box()
    bx0, by0, bx1, by1 = box
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    full_recs, crop_recs = [], []
    full_imgs, crop_imgs = {}, {}
    codes = _video_codes(cfg)
    for subject in range(1, cfg.n_subjects + 1):
        srng = np.random.default_rng([cfg.seed, subject])
        skin = srng.uniform([150, 100, 80], [235, 190, 160])
        split = TRAIN if subject <= cfg.n_train_subjects else TEST
        for v, code in enumerate(codes):
            video_id = f"s{subject:03d}_v{v:02d}"
            vrng = np.random.default_rng([cfg.seed, subject, v])
            bg0 = vrng.uniform(40, 215, size=3)
            bg1 = vrng.uniform(40, 215, size=3)
            angle = vrng.uniform(0, 2 * np.pi)
            ramp = (np.cos(angle) * xx + np.sin(angle) * yy) / size
            ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
            background = bg0 + (bg1 - bg0) * ramp[..., None]
            # video-level cue geometry: side, offset in margin, position along side, length
            geom = (int(vrng.integers(0, 4)), vrng.uniform(0, 1), vrng.uniform(0, 1), int(vrng.integers(size // 3, size // 2)))
            label = GENUINE if code == 0 else ATTACK
            for frame in range(cfg.frames_per_video):
                frng = np.random.default_rng([cfg.seed, subject, v, frame])
                img = background.copy()
                face_mask = _draw_face(img, box, skin, frng, yy, xx)
                img *= frng.uniform(0.9, 1.1)
                cue_on = code != 0 and (cfg.cue_frames is None or frame in cfg.cue_frames)
                cue_box = None
                if cue_on:
                    if code in cfg.background_cue_classes:
                        cue_box = _background_cue(img, code, box, size, cfg.cue_strength, geom, cfg.cue_thickness)
                    else:
                        _face_cue(img, code, face_mask, cfg.cue_strength, frng, yy, xx, frame)
                        cue_box = box
                img += frng.normal(0, 4.0, img.shape)
                full = np.clip(np.rint(img), 0, 255).astype(np.uint8)
                crop = full[by0:by1, bx0:bx1].copy()
                fpath = frame_relpath(FULL, subject, video_id, frame)
                cpath = frame_relpath(CROP, subject, video_id, frame)
                full_imgs[fpath] = full
                crop_imgs[cpath] = crop
                common = dict(subject_id=subject, video_id=video_id, frame_index=frame, label=label,
                              attack_type=code, split=split, cue_box=cue_box)
                full_recs.append(SampleRecord(path=fpath, variant=FULL, **common))
                crop_recs.append(SampleRecord(path=cpath, variant=CROP, **common))
    present = {0} | {c for c in codes if c}
    full_m = DatasetManifest("synthetic", full_recs, attack_codes_present=present, images=full_imgs)
    crop_m = DatasetManifest("synthetic", crop_recs, attack_codes_present=present, images=crop_imgs)
    return full_m, crop_m
