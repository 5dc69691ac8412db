"""``padkit`` command line: prepare, synth, train, eval, explain, protocol, plot-roc.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Options given on the command line override values from ``--config`` JSON.
"""

from __future__ import annotations

import argparse
import csv
import importlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset as ds
from .losses import AlphaSchedule
from .metrics import compute_report, read_scores, roc_points, write_report, write_scores
from .model import ConfigError, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("padkit")

VIDEO_EXT = {".mp4", ".avi", ".mov", ".mkv", ".webm", ".m4v"}
IMAGE_EXT = {".png", ".jpg", ".jpeg", ".bmp"}


class UsageError(Exception):
    pass


def _load_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _merge(file_values: dict, args: argparse.Namespace, keys) -> dict:
    """File values overridden by explicitly given flags (flags default to None)."""
    out = {k: file_values[k] for k in keys if k in file_values}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _background(value: str) -> str:
    mapping = {"yes": ds.FULL, "full": ds.FULL, "no": ds.CROP, "crop": ds.CROP}
    if value.lower() not in mapping:
        raise argparse.ArgumentTypeError("background must be yes/no (or full/crop)")
    return mapping[value.lower()]


# --------------------------------------------------------------------------
# prepare


def _detector(spec: str):
    if spec == "center":
        return ds.CentralFaceDetector()
    if ":" not in spec:
        raise UsageError("--detector must be 'center' or 'module:callable'")
    mod, attr = spec.split(":", 1)
    try:
        return getattr(importlib.import_module(mod), attr)()
    except (ImportError, AttributeError) as exc:
        raise UsageError(f"cannot load detector {spec}: {exc}") from None


def _labels(input_dir: Path, dataset: str) -> dict:
    """file path (relative to input) -> (subject_id, attack_type, split or None)."""
    table = input_dir / "labels.csv"
    out = {}
    if table.exists():
        with open(table, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                out[row["file"]] = (int(row["subject_id"]), int(row["attack_type"]), row.get("split") or None)
        return out
    if dataset != "rose_youtu":
        raise UsageError(f"{input_dir}: labels.csv (file,subject_id,attack_type[,split]) is required for {dataset}")
    for path in sorted(input_dir.rglob("*")):
        if path.suffix.lower() in VIDEO_EXT | IMAGE_EXT:
            rel = path.relative_to(input_dir)
            out[str(rel)] = (int(rel.parts[0]), ds.rose_youtu_attack_code(path.name), None)
    return out


def cmd_prepare(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    if not src.is_dir():
        raise UsageError(f"input directory not found: {src}")
    variants = [ds.FULL, ds.CROP] if args.variant == "both" else [args.variant]
    detector = _detector(args.detector) if ds.CROP in variants else None
    labels = _labels(src, args.dataset)
    dst.mkdir(parents=True, exist_ok=True)
    records = {v: [] for v in variants}
    for rel, (subject, code, split) in sorted(labels.items()):
        path = src / rel
        video_id = Path(rel).stem
        if path.suffix.lower() in IMAGE_EXT:
            with Image.open(path) as im:
                frames = [(0, np.asarray(im.convert("RGB")))]
        else:
            frames = ds.extract_frames(path, args.stride)
        for idx, img in frames:
            images = {ds.FULL: img}
            if detector is not None:
                try:
                    images[ds.CROP] = ds.crop_face(img, detector)
                except ds.NoFaceError:
                    log.warning("no face in %s frame %d; skipped", rel, idx)
                    continue
            for v in variants:
                relpath = ds.frame_relpath(v, subject, video_id, idx)
                target = dst / relpath
                if not target.exists():
                    target.parent.mkdir(parents=True, exist_ok=True)
                    Image.fromarray(images[v]).save(target)
                records[v].append(ds.SampleRecord(
                    path=relpath, subject_id=subject, video_id=video_id, frame_index=idx,
                    label=ds.GENUINE if code == 0 else ds.ATTACK, attack_type=code, variant=v,
                    split=split or ds.TRAIN,
                ))
    for v in variants:
        manifest = ds.DatasetManifest(args.dataset, records[v], root=dst)
        if args.dataset == "rose_youtu":
            manifest = ds.rose_youtu_split(manifest)
        manifest.validate()
        ds.write_manifest(manifest, dst / f"{v}.csv")
        print(f"{v}: {len(manifest)} frames -> {dst / f'{v}.csv'}")
    return 0


# --------------------------------------------------------------------------
# synth

SYNTH_KEYS = ("n_subjects", "n_train_subjects", "videos_per_subject", "frames_per_video", "image_size",
              "cue_strength", "cue_thickness", "seed")


def cmd_synth(args) -> int:
    values = _merge(_load_json(args.config), args, SYNTH_KEYS + ("attack_codes", "background_cue_classes"))
    if "attack_codes" in values:
        values["attack_codes"] = tuple(values["attack_codes"])
    if "background_cue_classes" in values:
        values["background_cue_classes"] = frozenset(values["background_cue_classes"])
    try:
        cfg = ds.SyntheticConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    log.info("resolved config: %s", json.dumps({k: (sorted(v) if isinstance(v, (set, frozenset)) else v)
                                                 for k, v in asdict(cfg).items()}))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for manifest in ds.generate_synthetic(cfg):
        ds.save_images(manifest, out)
        variant = manifest.records[0].variant
        ds.write_manifest(manifest, out / f"{variant}.csv")
        print(f"{variant}: {len(manifest)} images -> {out / f'{variant}.csv'}")
    return 0


# --------------------------------------------------------------------------
# train / eval


TRAIN_KEYS = ("strategy", "learning_rate", "epochs", "batch_size", "seed", "dfs_frames_per_video")
MODEL_KEYS = ("backbone", "input_size", "pretrained")


def _load_data(path: str, variant: str, dataset: str) -> ds.DatasetManifest:
    try:
        return ds.read_manifest(Path(path) / f"{variant}.csv", dataset)
    except ds.ManifestError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    from .training import TrainConfig, build_model_for, train

    file_values = _load_json(args.config)
    tvals = _merge(file_values, args, TRAIN_KEYS)
    mvals = _merge(file_values, args, MODEL_KEYS)
    background = args.background or _background(file_values.get("background", "yes"))
    alpha = AlphaSchedule(**file_values["alpha_schedule"]) if "alpha_schedule" in file_values else AlphaSchedule()
    try:
        tcfg = TrainConfig(alpha_schedule=alpha, **tvals)
        tcfg.validate()
        mcfg = ModelConfig(seed=tcfg.seed, **mvals)
        mcfg.validate()
    except (TypeError, ConfigError) as exc:
        raise UsageError(str(exc)) from None
    manifest = _load_data(args.data, background, args.dataset)
    model = build_model_for(tcfg.strategy, mcfg)
    log.info("resolved config: %s", json.dumps({"train": tcfg.to_dict(), "model": asdict(model.config),
                                                 "background": background, "data": args.data}))
    model, loss_log = train(model, manifest, tcfg)
    out = Path(args.output)
    save_checkpoint(model, out / "checkpoint")
    loss_log.write_csv(out / "losses.csv")
    print(f"checkpoint -> {out / 'checkpoint'}; losses -> {out / 'losses.csv'}")
    return 0


def cmd_eval(args) -> int:
    from .training import PER_FRAME, score_manifest

    if args.scores:
        try:
            scores = read_scores(args.scores)
        except FileNotFoundError:
            raise UsageError(f"score file not found: {args.scores}") from None
        mode = args.mode or PER_FRAME
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("eval needs --scores, or --checkpoint with --data")
        model = load_checkpoint(args.checkpoint)
        manifest = _load_data(args.data, args.background or ds.FULL, args.dataset)
        mode = args.mode or PER_FRAME
        scores = score_manifest(model, manifest, ds.TEST, mode)
        if args.write_scores:
            write_scores(scores, args.write_scores)
    report = compute_report(scores, threshold=args.threshold, mode=mode)
    print(f"APCER@{args.threshold:g}: {100 * report.apcer:.2f}%")
    print(f"BPCER@{args.threshold:g}: {100 * report.bpcer:.2f}%")
    print(f"EER: {100 * report.eer:.2f}% (threshold {report.eer_threshold:.4f})")
    if args.output:
        write_report(report, args.output)
    return 0


# --------------------------------------------------------------------------
# explain / plot-roc / protocol


def cmd_explain(args) -> int:
    from .explain import gradcam_pp, save_overlay

    model = load_checkpoint(args.checkpoint)
    try:
        with Image.open(args.image) as im:
            image = np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise UsageError(f"image not found: {args.image}") from None
    heat = gradcam_pp(model, image, target_class=args.target_class, layer=args.layer, head=args.head)
    path = save_overlay(heat, image, args.output, opacity=args.opacity)
    print(f"overlay -> {path}; p(class {args.target_class}) = {heat.probability:.4f}")
    return 0


def plot_roc(scores, path, title: str = "ROC") -> Path:
    """ROC with BPCER on a logarithmic x-axis and 1 - APCER on y."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = roc_points(scores)
    x = [b for _, _, b in pts]
    y = [1 - a for _, a, _ in pts]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(x, y, where="post")
    ax.set_xscale("log", nonpositive="clip")
    ax.set_xlabel("BPCER (log scale)")
    ax.set_ylabel("1 - APCER")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def cmd_plot_roc(args) -> int:
    try:
        scores = read_scores(args.scores)
    except FileNotFoundError:
        raise UsageError(f"score file not found: {args.scores}") from None
    path = plot_roc(scores, args.output, title=args.title)
    print(f"ROC -> {path}")
    return 0


def cmd_protocol(args) -> int:
    from .protocols import ExperimentConfig, emit_report, run_background_comparison, run_experiment

    raw = _load_json(args.config)
    for key in ("strategy", "protocol", "train_dataset", "test_dataset", "attack_code", "output_dir", "data_root"):
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    if args.background is not None:
        raw["background"] = args.background
    tc = raw.setdefault("train_config", {})
    raw["strategy"] = tc["strategy"] = raw.get("strategy", tc.get("strategy", "bc"))
    if args.seed is not None:
        raw["train_config"]["seed"] = args.seed
    try:
        config = ExperimentConfig.from_dict(raw)
        config.validate()
    except (TypeError, ConfigError) as exc:
        raise UsageError(str(exc)) from None
    log.info("resolved config: %s", json.dumps(config.to_dict()))
    try:
        if args.compare_background:
            full, crop, _ = run_background_comparison(config)
            results = [full, crop]
        else:
            results = [run_experiment(config)]
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    jpath, mpath = emit_report(results, Path(config.output_dir), name=args.report_name)
    print(mpath.read_text(encoding="utf-8"), end="")
    print(f"report -> {jpath}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="padkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="extract frames and face crops into manifests")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--variant", choices=["full", "crop", "both"], default="both")
    s.add_argument("--stride", type=int, default=10)
    s.add_argument("--dataset", choices=["rose_youtu", "nuaa", "replay_attack"], default="rose_youtu")
    s.add_argument("--detector", default="center", help="'center' or module:callable returning a detector")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="generate the synthetic paired dataset")
    s.add_argument("--output", required=True)
    s.add_argument("--config")
    for key in SYNTH_KEYS:
        s.add_argument("--" + key.replace("_", "-"), dest=key, type=float if key == "cue_strength" else int)
    s.add_argument("--attack-codes", dest="attack_codes", type=int, nargs="+")
    s.add_argument("--background-cue-classes", dest="background_cue_classes", type=int, nargs="*")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one strategy on a prepared dataset")
    s.add_argument("--data", required=True, help="directory holding full.csv / crop.csv")
    s.add_argument("--dataset", choices=list(ds.DATASET_NAMES), default="synthetic")
    s.add_argument("--output", required=True)
    s.add_argument("--config")
    s.add_argument("--strategy", choices=["bc", "mt", "adv_bc", "adv_mt", "dfs", "mt_dfs", "adv_dfs"])
    s.add_argument("--background", type=_background)
    s.add_argument("--learning-rate", dest="learning_rate", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--dfs-frames-per-video", dest="dfs_frames_per_video", type=int)
    s.add_argument("--backbone", choices=["toy_cnn", "paper_default"])
    s.add_argument("--input-size", dest="input_size", type=int)
    s.add_argument("--pretrained", action="store_true", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="APCER/BPCER at a threshold and EER")
    s.add_argument("--scores")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--dataset", choices=list(ds.DATASET_NAMES), default="synthetic")
    s.add_argument("--background", type=_background)
    s.add_argument("--mode", choices=["per_frame", "per_video_dfs"])
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--write-scores", dest="write_scores")
    s.add_argument("--output", help="metrics JSON path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("explain", help="Grad-CAM++ overlay for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--target-class", dest="target_class", type=int, default=1)
    s.add_argument("--head", type=int, default=0)
    s.add_argument("--layer")
    s.add_argument("--opacity", type=float, default=0.5)
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("protocol", help="run one experiment (or a with/without background pair)")
    s.add_argument("--config", required=True)
    s.add_argument("--strategy")
    s.add_argument("--protocol", choices=["same_dataset", "cross_dataset", "one_attack", "unseen_attack"])
    s.add_argument("--background", type=_background)
    s.add_argument("--train-dataset", dest="train_dataset")
    s.add_argument("--test-dataset", dest="test_dataset")
    s.add_argument("--attack-code", dest="attack_code", type=int)
    s.add_argument("--output-dir", dest="output_dir")
    s.add_argument("--data-root", dest="data_root")
    s.add_argument("--seed", type=int)
    s.add_argument("--compare-background", action="store_true")
    s.add_argument("--report-name", default="report")
    s.set_defaults(func=cmd_protocol)

    s = sub.add_parser("plot-roc", help="ROC curve with a log-scale x-axis")
    s.add_argument("--scores", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--title", default="ROC")
    s.set_defaults(func=cmd_plot_roc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ds.ManifestError, ds.ProtocolError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
