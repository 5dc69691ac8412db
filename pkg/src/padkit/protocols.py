"""Experiment runner for same-dataset, cross-dataset, one-attack and unseen-attack protocols.

Datasets are looked up by key in a registry ``{key: {"full": manifest,
"crop": manifest}}``.  When no registry is given, manifests are read from
``<data_root>/<key>/<variant>.csv``.  A key's dataset type is the name it
starts with, so ``synthetic_b`` is a second synthetic dataset.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import torch

from .dataset import (
    CROP,
    DATASET_NAMES,
    FULL,
    TEST,
    TRAIN,
    DatasetManifest,
    ManifestError,
    filter_attacks,
    iterate_batches,
    read_manifest,
)
from .metrics import MetricsReport, compute_report, write_report, write_scores
from .model import ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .training import (
    STRATEGIES,
    LossLog,
    TrainConfig,
    build_model_for,
    score_manifest,
    scoring_mode,
    train,
)

log = logging.getLogger(__name__)

PROTOCOLS = ("same_dataset", "cross_dataset", "one_attack", "unseen_attack")
METHOD_NAMES = {
    "bc": "BC",
    "mt": "MT",
    "adv_bc": "Adv.+BC",
    "adv_mt": "Adv.+MT",
    "dfs": "DFS",
    "mt_dfs": "MT+DFS",
    "adv_dfs": "Adv.+DFS",
}
Registry = Mapping[str, Mapping[str, DatasetManifest]]


@dataclass
class ExperimentConfig:
    strategy: str = "bc"
    background: str = FULL
    protocol: str = "same_dataset"
    train_dataset: str = "synthetic"
    test_dataset: Optional[str] = None
    attack_code: Optional[int] = None
    train_config: TrainConfig = field(default_factory=TrainConfig)
    model_config: ModelConfig = field(default_factory=ModelConfig)
    output_dir: str = "runs"
    data_root: Optional[str] = None
    dim_e1: int = 128
    dim_e2: int = 64
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.test_dataset is None:
            self.test_dataset = self.train_dataset

    @property
    def seed(self) -> int:
        return self.train_config.seed

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.train_config.strategy != self.strategy:
            raise ConfigError("train_config.strategy must equal strategy")
        if self.background not in (FULL, CROP):
            raise ConfigError(f"background must be 'full' or 'crop', not {self.background!r}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        needs_code = self.protocol in ("one_attack", "unseen_attack")
        if needs_code != (self.attack_code is not None):
            raise ConfigError("attack_code is required for one/unseen-attack protocols and only for them")
        if needs_code and not 1 <= self.attack_code <= 7:
            raise ConfigError("attack_code must lie in 1..7")
        if self.protocol == "cross_dataset" and self.train_dataset == self.test_dataset:
            raise ConfigError("cross_dataset needs different train and test datasets")
        if self.protocol != "cross_dataset" and self.train_dataset != self.test_dataset:
            raise ConfigError(f"{self.protocol} trains and tests on one dataset")
        self.train_config.validate()
        self.model_config.validate()

    def tag(self) -> str:
        """Directory name of the protocol level of the results grid."""
        parts = [self.protocol, self.train_dataset]
        if self.protocol == "cross_dataset":
            parts.append(self.test_dataset)
        if self.attack_code is not None:
            parts.append(str(self.attack_code))
        return "-".join(parts)

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.tag() / self.strategy / self.background / str(self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if isinstance(d.get("train_config"), dict):
            d["train_config"] = TrainConfig.from_dict(d["train_config"])
        if isinstance(d.get("model_config"), dict):
            d["model_config"] = ModelConfig(**d["model_config"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: Optional[MetricsReport]
    loss_log: str
    checkpoint: str
    wall_time: float
    scores: str = ""

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "metrics": self.metrics.to_dict() if self.metrics else None,
            "loss_log": self.loss_log,
            "checkpoint": self.checkpoint,
            "wall_time": self.wall_time,
            "scores": self.scores,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(
            config=ExperimentConfig.from_dict(d["config"]),
            metrics=MetricsReport.from_dict(d["metrics"]) if d.get("metrics") else None,
            loss_log=d["loss_log"],
            checkpoint=d["checkpoint"],
            wall_time=d["wall_time"],
            scores=d.get("scores", ""),
        )


def dataset_type(key: str) -> str:
    for name in sorted(DATASET_NAMES, key=len, reverse=True):
        if key.startswith(name):
            return name
    raise ConfigError(f"dataset key {key!r} does not start with a known dataset name")


def _resolve(config: ExperimentConfig, registry: Optional[Registry], key: str) -> DatasetManifest:
    variant = config.background
    if registry is not None:
        try:
            return registry[key][variant]
        except KeyError:
            raise ConfigError(f"no {variant} manifest registered for dataset {key!r}") from None
    if config.data_root is None:
        raise ConfigError("neither a manifest registry nor data_root was given")
    path = Path(config.data_root) / key / f"{variant}.csv"
    try:
        return read_manifest(path, dataset_type(key))
    except ManifestError as exc:
        raise ConfigError(str(exc)) from exc


def protocol_manifests(config: ExperimentConfig, registry: Optional[Registry] = None):
    """(train manifest, test manifest) after protocol filtering."""
    train_m = _resolve(config, registry, config.train_dataset)
    test_m = _resolve(config, registry, config.test_dataset)
    code = config.attack_code
    if config.protocol == "one_attack":
        train_m = test_m = filter_attacks(train_m, {code}, {code})
    elif config.protocol == "unseen_attack":
        seen = train_m.attack_codes_present - {0, code}
        train_m = test_m = filter_attacks(train_m, seen, {code})
    if not train_m.split(TRAIN):
        raise ConfigError(f"dataset {config.train_dataset!r} has an empty train split")
    if not test_m.split(TEST):
        raise ConfigError(f"dataset {config.test_dataset!r} has an empty test split")
    return train_m, test_m


def _model_config(config: ExperimentConfig) -> ModelConfig:
    return replace(config.model_config, seed=config.seed)


def run_experiment(config: ExperimentConfig, manifests: Optional[Registry] = None,
                   iterate=iterate_batches) -> ExperimentResult:
    """Filter, train, score and evaluate one configuration; writes its run directory."""
    config.validate()
    train_m, test_m = protocol_manifests(config, manifests)
    out = config.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2), encoding="utf-8")
    start = time.perf_counter()
    try:
        model, loss_log = _train_or_reuse(config, train_m, iterate)
        ckpt = save_checkpoint(model, out / "checkpoint")
        mode = scoring_mode(config.strategy)
        scores = score_manifest(model, test_m, TEST, mode)
        report = compute_report(scores, mode=mode)
    except Exception as exc:
        (out / "error.json").write_text(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}, indent=2), encoding="utf-8"
        )
        raise
    loss_log.write_csv(out / "losses.csv")
    write_scores(scores, out / "scores.csv")
    write_report(report, out / "metrics.json")
    result = ExperimentResult(
        config=config,
        metrics=report,
        loss_log=str(out / "losses.csv"),
        checkpoint=str(ckpt),
        wall_time=time.perf_counter() - start,
        scores=str(out / "scores.csv"),
    )
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2), encoding="utf-8")
    return result


def _train_or_reuse(config: ExperimentConfig, train_m: DatasetManifest, iterate):
    if config.protocol == "cross_dataset":
        same = replace(config, protocol="same_dataset", test_dataset=config.train_dataset)
        ckpt = same.run_dir() / "checkpoint"
        if (ckpt / "weights.pt").exists():
            log.info("reusing same-dataset checkpoint %s", ckpt)
            model = load_checkpoint(ckpt)
            reused = LossLog()
            for e, phase, loss in _read_losses(same.run_dir() / "losses.csv"):
                reused.add(e, phase, loss)
            return model, reused
    model = build_model_for(config.strategy, _model_config(config), config.dim_e1, config.dim_e2,
                            config.dropout_rate)
    return train(model, train_m, config.train_config, iterate)


def _read_losses(path):
    if not Path(path).exists():
        return []
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return [(int(e), p, float(v)) for e, p, v in (r.split(",") for r in rows)]


def run_background_comparison(base_config: ExperimentConfig, manifests: Optional[Registry] = None,
                              iterate=iterate_batches):
    """Run the config twice, with and without background; returns (full, crop, rows)."""
    results = {}
    for variant in (FULL, CROP):
        results[variant] = run_experiment(replace(base_config, background=variant), manifests, iterate)
    rows = [comparison_row(results[FULL]), comparison_row(results[CROP])]
    return results[FULL], results[CROP], rows


def comparison_row(result: ExperimentResult) -> dict:
    m = result.metrics
    return {
        "method": METHOD_NAMES[result.config.strategy],
        "background": "Yes" if result.config.background == FULL else "No",
        "apcer": m.apcer,
        "bpcer": m.bpcer,
        "eer": m.eer,
    }


def format_pct(fraction: float) -> str:
    return f"{100.0 * fraction:.2f}"


def render_table(rows: list) -> str:
    """Markdown table in percent, best (lowest) value per column in bold."""
    cols = ("apcer", "bpcer", "eer")
    best = {c: min(r[c] for r in rows) for c in cols}
    lines = ["| Method | Background | APCER (%) | BPCER (%) | EER (%) |", "|---|---|---|---|---|"]
    for r in rows:
        cells = []
        for c in cols:
            s = format_pct(r[c])
            cells.append(f"**{s}**" if format_pct(best[c]) == s and len(rows) > 1 else s)
        lines.append(f"| {r['method']} | {r['background']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(results: list, out_dir, name: str = "report") -> tuple:
    """Write ``<name>.json`` (full results) and ``<name>.md`` (table); returns both paths."""
    if not results:
        raise ValueError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath, mpath = out_dir / f"{name}.json", out_dir / f"{name}.md"
    jpath.write_text(json.dumps([r.to_dict() for r in results], indent=2), encoding="utf-8")
    mpath.write_text(render_table([comparison_row(r) for r in results]), encoding="utf-8")
    return jpath, mpath


def load_report(path) -> list:
    return [ExperimentResult.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


def _run_isolated(config_dict: dict) -> dict:
    torch.set_num_threads(1)
    return run_experiment(ExperimentConfig.from_dict(config_dict)).to_dict()


def run_grid(configs: list, workers: int = 1) -> list:
    """Run disk-backed configs, each in its own process when ``workers > 1``."""
    for c in configs:
        c.validate()
    dirs = [c.run_dir() for c in configs]
    if len(set(dirs)) != len(dirs):
        raise ConfigError("two configs share a result directory")
    if workers <= 1:
        return [run_experiment(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [ExperimentResult.from_dict(d) for d in pool.map(_run_isolated, [c.to_dict() for c in configs])]
