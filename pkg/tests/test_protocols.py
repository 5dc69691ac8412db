import json
from dataclasses import asdict, replace

import pytest

from padkit.dataset import (
    CROP,
    FULL,
    TEST,
    TRAIN,
    SyntheticConfig,
    generate_synthetic,
    iterate_batches,
    rose_youtu_split,
    save_images,
    write_manifest,
)
from padkit.metrics import read_scores
from padkit.model import ConfigError, ModelConfig
from padkit.protocols import (
    ExperimentConfig,
    ExperimentResult,
    comparison_row,
    dataset_type,
    emit_report,
    format_pct,
    load_report,
    render_table,
    run_background_comparison,
    run_experiment,
    run_grid,
)
from padkit.training import TrainConfig

ALL_CODES = SyntheticConfig(n_subjects=4, n_train_subjects=2, videos_per_subject=14, frames_per_video=3, seed=2)


def pair(cfg):
    full, crop = generate_synthetic(cfg)
    return {FULL: full, CROP: crop}


@pytest.fixture(scope="module")
def registry():
    rose = {}
    subject_map = {1: 2, 2: 3, 3: 13, 4: 14}
    for variant, m in pair(ALL_CODES).items():
        recs = [replace(r, subject_id=subject_map[r.subject_id]) for r in m.records]
        rose[variant] = rose_youtu_split(m.with_records(recs, name="rose_youtu"))
    return {
        "synthetic": pair(ALL_CODES),
        "synthetic_b": pair(replace(ALL_CODES, seed=9, n_subjects=3, n_train_subjects=1)),
        "rose_youtu": rose,
    }


def config(tmp_path, **kw):
    strategy = kw.pop("strategy", "bc")
    return ExperimentConfig(
        strategy=strategy,
        train_config=TrainConfig(strategy=strategy, epochs=1, batch_size=32, seed=kw.pop("seed", 0)),
        model_config=ModelConfig(input_size=64),
        output_dir=str(tmp_path),
        dim_e1=16,
        dim_e2=8,
        **kw,
    )


class Recorder:
    def __init__(self):
        self.codes = []

    def __call__(self, manifest, split, bs, **kw):
        for batch in iterate_batches(manifest, split, bs, **kw):
            self.codes.extend(int(c) for c in batch[2])
            yield batch


# -- config -----------------------------------------------------------------------


def test_config_validation(tmp_path):
    config(tmp_path).validate()
    with pytest.raises(ConfigError):
        config(tmp_path, protocol="one_attack").validate()
    with pytest.raises(ConfigError):
        config(tmp_path, attack_code=2).validate()
    with pytest.raises(ConfigError):
        config(tmp_path, protocol="cross_dataset").validate()
    with pytest.raises(ConfigError):
        config(tmp_path, test_dataset="synthetic_b").validate()
    with pytest.raises(ConfigError):
        config(tmp_path, background="nope").validate()
    bad = config(tmp_path)
    bad.train_config.strategy = "mt"
    with pytest.raises(ConfigError):
        bad.validate()


def test_config_dict_round_trip(tmp_path):
    c = config(tmp_path, protocol="unseen_attack", attack_code=4, strategy="adv_mt")
    back = ExperimentConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back == c
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**c.to_dict(), "bogus": 1})


def test_dataset_type():
    assert dataset_type("synthetic_b") == "synthetic"
    assert dataset_type("rose_youtu") == "rose_youtu"
    with pytest.raises(ConfigError):
        dataset_type("casia")


# -- protocols ----------------------------------------------------------------------


def test_one_attack(tmp_path, registry):
    rec = Recorder()
    res = run_experiment(config(tmp_path, protocol="one_attack", attack_code=2), registry, rec)
    assert set(rec.codes) == {0, 2}
    assert {s.attack_type for s in read_scores(res.scores)} == {0, 2}


def test_unseen_attack(tmp_path, registry):
    rec = Recorder()
    res = run_experiment(config(tmp_path, protocol="unseen_attack", attack_code=4), registry, rec)
    assert 4 not in rec.codes
    assert set(rec.codes) == {0, 1, 2, 3, 5, 6, 7}
    assert {s.attack_type for s in read_scores(res.scores)} == {0, 4}


def test_cross_dataset_uses_rose_train_and_other_test(tmp_path, registry):
    rec = Recorder()
    c = config(tmp_path, protocol="cross_dataset", train_dataset="rose_youtu", test_dataset="synthetic_b")
    res = run_experiment(c, registry, rec)
    assert len(rec.codes) == len(registry["rose_youtu"][FULL].split(TRAIN))
    assert len(read_scores(res.scores)) == len(registry["synthetic_b"][FULL].split(TEST))


def test_cross_dataset_reuses_same_dataset_checkpoint(tmp_path, registry):
    same = run_experiment(config(tmp_path), registry)
    rec = Recorder()
    cross = run_experiment(config(tmp_path, protocol="cross_dataset", test_dataset="synthetic_b"), registry, rec)
    assert rec.codes == []
    assert (tmp_path / "cross_dataset-synthetic-synthetic_b").is_dir()
    with open(same.loss_log) as a, open(cross.loss_log) as b:
        assert a.read() == b.read()


def test_run_directory_layout(tmp_path, registry):
    res = run_experiment(config(tmp_path, seed=3), registry)
    run = tmp_path / "same_dataset-synthetic" / "bc" / FULL / "3"
    for name in ("config.json", "metrics.json", "losses.csv", "scores.csv", "result.json", "checkpoint/weights.pt"):
        assert (run / name).exists(), name
    assert res.metrics is not None and res.checkpoint == str(run / "checkpoint")


def test_missing_manifests_fail_before_compute(tmp_path):
    c = config(tmp_path, data_root=str(tmp_path / "nothing"))
    with pytest.raises(ConfigError):
        run_experiment(c)
    assert not any(tmp_path.iterdir())
    with pytest.raises(ConfigError):
        run_experiment(config(tmp_path, train_dataset="nuaa"), {"synthetic": {}})


def test_failed_run_writes_error_record(tmp_path, registry):
    def broken(*a, **k):
        raise RuntimeError("disk on fire")

    c = config(tmp_path)
    with pytest.raises(RuntimeError):
        run_experiment(c, registry, broken)
    err = json.loads((c.run_dir() / "error.json").read_text())
    assert err == {"error": "RuntimeError", "message": "disk on fire"}
    assert not (c.run_dir() / "metrics.json").exists()


def test_rerun_is_identical(tmp_path, registry):
    a = run_experiment(config(tmp_path / "a", strategy="mt_dfs"), registry)
    b = run_experiment(config(tmp_path / "b", strategy="mt_dfs"), registry)
    assert a.metrics == b.metrics
    assert open(a.loss_log).read() == open(b.loss_log).read()


# -- background comparison and reporting ---------------------------------------------


def test_background_comparison_pairing(tmp_path, registry):
    full, crop, rows = run_background_comparison(config(tmp_path, strategy="adv_bc"), registry)
    a, b = asdict(full.config), asdict(crop.config)
    assert {k for k in a if a[k] != b[k]} == {"background"}
    assert [r["background"] for r in rows] == ["Yes", "No"]
    assert set(rows[0]) == {"method", "background", "apcer", "bpcer", "eer"}
    assert rows[0]["method"] == "Adv.+BC"


def test_percent_format():
    assert format_pct(0.0024) == "0.24"
    assert format_pct(1.0) == "100.00"


def test_table_marks_best(tmp_path):
    rows = [
        {"method": "BC", "background": "Yes", "apcer": 0.01, "bpcer": 0.2, "eer": 0.0024},
        {"method": "BC", "background": "No", "apcer": 0.05, "bpcer": 0.1, "eer": 0.09},
    ]
    table = render_table(rows)
    assert "| BC | Yes | **1.00** | 20.00 | **0.24** |" in table
    assert "| BC | No | 5.00 | **10.00** | 9.00 |" in table
    single = render_table(rows[:1])
    assert single.count("\n") == 3 and "**" not in single


def test_report_round_trip(tmp_path, registry):
    res = run_experiment(config(tmp_path), registry)
    jpath, mpath = emit_report([res], tmp_path / "report")
    assert load_report(jpath) == [res]
    assert mpath.read_text().count("| BC |") == 1
    assert comparison_row(res)["eer"] == res.metrics.eer
    assert ExperimentResult.from_dict(res.to_dict()) == res


def test_run_grid_on_disk(tmp_path):
    cfg = replace(ALL_CODES, n_subjects=2, n_train_subjects=1, videos_per_subject=4)
    root = tmp_path / "data" / "synthetic"
    for variant, m in pair(cfg).items():
        save_images(m, root)
        write_manifest(m, root / f"{variant}.csv")
    configs = [config(tmp_path / "runs", seed=s, data_root=str(tmp_path / "data")) for s in (0, 1)]
    serial = run_grid(configs, workers=1)
    parallel = run_grid([replace(c, output_dir=str(tmp_path / "par")) for c in configs], workers=2)
    assert [r.metrics for r in serial] == [r.metrics for r in parallel]
    with pytest.raises(ConfigError):
        run_grid([configs[0], configs[0]])
