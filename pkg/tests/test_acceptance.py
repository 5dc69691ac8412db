"""Acceptance criteria, one test each.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the PASS/FAIL
line of every criterion as it finishes; the same lines are repeated in the
terminal summary.
"""

import time

import numpy as np
import pytest
import torch

from acceptance_log import criterion
from oracles import (
    brute_eer,
    central_diff,
    count_apcer,
    count_bpcer,
    np_bce,
    np_ce,
    np_mse,
    sorted_selection,
    sorted_test_pick,
)
from padkit import losses
from padkit.dataset import CROP, FULL, TEST, TRAIN, SyntheticConfig, generate_synthetic, iterate_batches
from padkit.explain import gradcam_pp, in_box
from padkit.losses import AlphaSchedule, alpha_at
from padkit.metrics import ATTACK, GENUINE, apcer, bpcer, eer
from padkit.model import ModelConfig, predict_attack_prob
from padkit.protocols import ExperimentConfig, run_experiment
from padkit.training import STRATEGIES, TrainConfig, build_model_for, pick_test_position, select_positions, train

SEEDS = (0, 1, 2)
_trained = {}


def background_data(seed):
    """2000 train / 1000 test 64x64 frames; replay attacks whose only cue sits in the background."""
    cfg = SyntheticConfig(attack_codes=(3, 4), background_cue_classes=frozenset({3, 4}), seed=seed)
    return generate_synthetic(cfg)


def trained_bc(seed, variant, manifest):
    key = (seed, variant)
    if key not in _trained:
        model = build_model_for("bc", ModelConfig(input_size=64, seed=seed))
        _trained[key] = train(model, manifest, TrainConfig(strategy="bc", epochs=10, batch_size=32, seed=seed))[0]
    return _trained[key]


def score_sets(rng, n_sets):
    for k in range(n_sets):
        n = int(rng.integers(2, 501))
        n_att = int(rng.integers(1, n))
        scores = rng.random(n)
        if k % 2:
            scores = np.round(scores, int(rng.integers(1, 3)))  # heavy ties
        yield scores[:n_att], scores[n_att:]


def test_c01_metric_oracle_equivalence():
    with criterion(1, "EER/APCER/BPCER vs brute-force oracles on 1000 score sets") as state:
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for att, gen in score_sets(rng, 1000):
            pairs = [(p, ATTACK) for p in att] + [(p, GENUINE) for p in gen]
            probs = np.array([p for p, _ in pairs])
            labels = [lab for _, lab in pairs]
            value, thr = eer((probs, labels))
            ref_value, ref_thr = brute_eer(list(att), list(gen))
            worst = max(worst, abs(value - ref_value), abs(thr - ref_thr))
            for t in (0.5, float(rng.random()), float(rng.choice(probs))):
                assert apcer((probs, labels), t) == count_apcer(att, t)
                assert bpcer((probs, labels), t) == count_bpcer(gen, t)
        elapsed = time.perf_counter() - start
        state["detail"] = f"max |EER - oracle| = {worst:.1e}"
        assert worst <= 1e-9
        assert elapsed < 30


def _loss_cases(rng):
    """(name, implementation, numpy oracle, differentiable argument index, args) for every loss."""
    b, m, d, img = 4, 8, 6, (3, 4, 4)

    def probs():
        return rng.uniform(0.05, 0.95, b)

    def simplex():
        p = rng.dirichlet(np.ones(m), b)
        return 0.9 * p + 0.1 / m  # keep away from the clamp

    def onehot():
        return np.eye(m)[rng.integers(0, m, b)]

    y = rng.integers(0, 2, b).astype(np.float64)
    x, xr = rng.random((b, *img)), rng.random((b, *img))
    e1, e2 = rng.normal(size=(b, d)), rng.normal(size=(b, d + 2))
    e1p, e2p = rng.normal(size=(b, d)), rng.normal(size=(b, d + 2))
    alpha = float(rng.uniform(0, 1))
    p1, p2, y2 = probs(), simplex(), onehot()
    return [
        ("bce", losses.bce, np_bce, 1, (y, p1)),
        ("ce", losses.ce, lambda a, b_: np_ce(a, b_), 1, (y2, p2)),
        ("loss_multi", losses.loss_multi, lambda a, b_, c, e: np_bce(a, b_) + np_ce(c, e), 3, (y, p1, y2, p2)),
        ("mse", losses.mse, np_mse, 1, (x, xr)),
        ("loss_adv", losses.loss_adv, lambda a, b_, c, e: -np_mse(a, c) - np_mse(b_, e), 2, (e1, e2, e1p, e2p)),
        ("loss_class_bc", lambda *a: losses.loss_class_bc(*a, alpha),
         lambda a, b_, c, e: np_bce(a, b_) + alpha * np_mse(c, e), 3, (y, p1, x, xr)),
        ("loss_class_mt", lambda *a: losses.loss_class_mt(*a, alpha),
         lambda a, b_, c, e, f, g: np_bce(a, b_) + np_ce(c, e) + alpha * np_mse(f, g), 5, (y, p1, y2, p2, x, xr)),
    ]


def test_c02_losses_match_oracles_and_gradients():
    with criterion(2, "seven losses vs direct formulas (1e-10) and finite differences (1e-4)") as state:
        start = time.perf_counter()
        rng = np.random.default_rng(7)
        worst_value, worst_grad = 0.0, 0.0
        for _ in range(100):
            for name, impl, oracle, gi, args in _loss_cases(rng):
                tensors = [torch.tensor(a, dtype=torch.float64) for a in args]
                tensors[gi].requires_grad_(True)
                value = impl(*tensors)
                worst_value = max(worst_value, abs(value.item() - oracle(*args)))
                (analytic,) = torch.autograd.grad(value, tensors[gi])

                def f(arr, gi=gi, impl=impl, tensors=tensors):
                    call = [t.detach() for t in tensors]
                    call[gi] = torch.from_numpy(arr)
                    return impl(*call).item()

                numeric = central_diff(f, args[gi], h=1e-5)
                rel = np.linalg.norm(analytic.numpy() - numeric) / max(np.linalg.norm(numeric), 1e-12)
                worst_grad = max(worst_grad, rel)
        elapsed = time.perf_counter() - start
        state["detail"] = f"max value error {worst_value:.1e}, max gradient rel. error {worst_grad:.1e}"
        assert worst_value <= 1e-10
        assert worst_grad < 1e-4
        assert elapsed < 60


def test_c03_alpha_schedule():
    with criterion(3, "alpha_at(default, e) == 0.025*(e+1) for e in 0..99") as state:
        mismatches = [e for e in range(100) if alpha_at(AlphaSchedule(), e) != 0.025 * (e + 1)]
        state["detail"] = f"{100 - len(mismatches)}/100 exact"
        assert not mismatches


def test_c04_dfs_selection_property():
    with criterion(4, "DFS selection vs sort oracle on 10^4 vectors") as state:
        rng = np.random.default_rng(11)
        agree = 0
        for k in range(10_000):
            n = int(rng.integers(3, 40))
            probs = rng.random(n)
            if k % 3 == 0:
                probs = np.round(probs, 1)
            probs = probs.tolist()
            ok = (
                select_positions(probs, True) == sorted_selection(probs, True)
                and select_positions(probs, False) == sorted_selection(probs, False)
                and pick_test_position(probs) == sorted_test_pick(probs)
            )
            agree += ok
        state["detail"] = f"{agree}/10000 agree"
        assert agree == 10_000


def test_c05_background_directional_claim():
    with criterion(5, "BC-full EER <= 5% and BC-crop EER >= BC-full + 10 pp, 3/3 seeds") as state:
        from padkit.metrics import eer as eer_of
        from padkit.training import score_manifest

        start = time.perf_counter()
        rows = []
        for seed in SEEDS:
            full, crop = background_data(seed)
            assert len(full.split(TRAIN)) == 2000 and len(full.split(TEST)) == 1000
            result = {}
            for variant, m in ((FULL, full), (CROP, crop)):
                model = trained_bc(seed, variant, m)
                result[variant] = eer_of(score_manifest(model, m, TEST))[0]
            rows.append(result)
        elapsed = time.perf_counter() - start
        state["detail"] = ", ".join(
            f"seed {s}: full {100 * r[FULL]:.2f}% crop {100 * r[CROP]:.2f}%" for s, r in zip(SEEDS, rows)
        )
        for r in rows:
            assert r[FULL] <= 0.05
            assert r[CROP] - r[FULL] >= 0.10
        assert elapsed <= 600


def test_c06_multitask_decomposition():
    with criterion(6, "loss_multi == bce + ce bit-for-bit; MT heads are 2- and 8-way") as state:
        gen = torch.Generator().manual_seed(3)
        for _ in range(200):
            b = int(torch.randint(1, 33, (1,), generator=gen))
            y1 = torch.randint(0, 2, (b,), generator=gen).double()
            p1 = torch.rand(b, generator=gen, dtype=torch.float64)
            y2 = torch.randint(0, 8, (b,), generator=gen)
            p2 = torch.softmax(torch.randn(b, 8, generator=gen, dtype=torch.float64), dim=1)
            assert torch.equal(losses.loss_multi(y1, p1, y2, p2), losses.bce(y1, p1) + losses.ce(y2, p2))
        model = build_model_for("mt", ModelConfig(input_size=32)).eval()
        p_bin, p_multi = model(torch.rand(3, 3, 32, 32))
        state["detail"] = f"head widths {p_bin.shape[1]} and {p_multi.shape[1]}"
        assert (p_bin.shape[1], p_multi.shape[1]) == (2, 8)
        assert model.heads.binary.out_features == 2 and model.heads.multiclass.out_features == 8


def test_c07_uai_structure():
    with criterion(7, "UAI group isolation, decoder shape, adversary descent with MAIN frozen") as state:
        from padkit import training

        cfg = SyntheticConfig(n_subjects=2, n_train_subjects=2, videos_per_subject=4, frames_per_video=4, seed=4)
        full = generate_synthetic(cfg)[0]
        model = build_model_for("adv_bc", ModelConfig(input_size=64))
        stepper = training._Stepper(model, TrainConfig(strategy="adv_bc"))

        def snap(params):
            return [p.detach().clone() for p in params]

        isolated = []
        for opt, untouched in ((stepper.opt_main, model.adversary_parameters),
                               (stepper.opt_adv, model.main_parameters)):
            def guarded(*a, _inner=opt.step, _untouched=untouched, **k):
                before = snap(_untouched())
                out = _inner(*a, **k)
                isolated.append(all(torch.equal(x, y) for x, y in zip(before, snap(_untouched()))))
                return out

            opt.step = guarded
        for x, y, codes in iterate_batches(full, TRAIN, 8, input_size=64):
            stepper.step(torch.from_numpy(x), torch.from_numpy(y), torch.from_numpy(codes), 0.05)
        assert len(isolated) == 8 and all(isolated)

        x = torch.from_numpy(next(iterate_batches(full, TRAIN, 16, input_size=64))[0])
        assert model(x).x_recon.shape == x.shape

        main_before = snap(model.main_parameters())
        opt = torch.optim.Adam(model.adversary_parameters(), lr=1e-3)
        with torch.no_grad():
            e1, e2 = model.embed(x)
        values = []
        for _ in range(10):
            obj = losses.adversary_objective(e1, e2, model.f1(e2), model.f2(e1))
            values.append(obj.item())
            opt.zero_grad()
            obj.backward()
            opt.step()
        state["detail"] = f"{len(isolated)} isolated steps, adversary {values[0]:.3f} -> {values[-1]:.3f}"
        assert all(b <= a for a, b in zip(values, values[1:])) and values[-1] < values[0]
        assert all(torch.equal(a, b) for a, b in zip(main_before, snap(model.main_parameters())))


def test_c08_unseen_attack_isolation(tmp_path):
    with criterion(8, "unseen-attack run never trains on the held-out code") as state:
        cfg = SyntheticConfig(n_subjects=4, n_train_subjects=2, videos_per_subject=14, frames_per_video=3, seed=8)
        full, crop = generate_synthetic(cfg)
        seen = []

        def recording(manifest, split, bs, **kw):
            for batch in iterate_batches(manifest, split, bs, **kw):
                seen.append(set(batch[2].tolist()))
                yield batch

        exp = ExperimentConfig(strategy="bc", protocol="unseen_attack", attack_code=4,
                               train_config=TrainConfig(strategy="bc", epochs=2, batch_size=16),
                               model_config=ModelConfig(input_size=64), output_dir=str(tmp_path))
        result = run_experiment(exp, {"synthetic": {FULL: full, CROP: crop}}, recording)
        from padkit.metrics import read_scores

        test_codes = {s.attack_type for s in read_scores(result.scores)}
        leaked = sum(4 in codes for codes in seen)
        state["detail"] = f"{len(seen)} training batches, {leaked} with code 4, test codes {sorted(test_codes)}"
        assert seen and leaked == 0
        assert test_codes == {0, 4}


def test_c09_gradcam_localization():
    with criterion(9, "Grad-CAM++ argmax inside the cue box for >= 80% of >= 50 attacks") as state:
        full, _ = background_data(0)
        model = trained_bc(0, FULL, full)
        attacks = [r for r in full.split(TEST) if r.is_attack]
        x = np.stack([full.load(r) for r in attacks]).astype(np.float32).transpose(0, 3, 1, 2) / 255.0
        probs = predict_attack_prob(model, x).numpy()
        correct = [r for r, p in zip(attacks, probs) if p >= 0.5]
        hits = sum(in_box(gradcam_pp(model, full.load(r)).argmax, r.cue_box) for r in correct)
        rate = hits / max(len(correct), 1)

        handle = model.encoder.backbone.register_forward_hook(lambda m, i, o: torch.zeros_like(o))
        try:
            zeroed = gradcam_pp(model, full.load(correct[0]))
        finally:
            handle.remove()
        state["detail"] = f"{hits}/{len(correct)} = {100 * rate:.1f}% inside; zeroed raw max {zeroed.raw.max():.1f}"
        assert len(correct) >= 50
        assert rate >= 0.8
        assert not zeroed.raw.any()


def test_c10_reproducibility(tmp_path):
    with criterion(10, "identical config + seed gives identical loss logs and metrics") as state:
        cfg = SyntheticConfig(n_subjects=4, n_train_subjects=2, videos_per_subject=6, frames_per_video=4, seed=10)
        full, crop = generate_synthetic(cfg)
        registry = {"synthetic": {FULL: full, CROP: crop}}
        same = 0
        for strategy in STRATEGIES:
            runs = []
            for rep in ("a", "b"):
                exp = ExperimentConfig(strategy=strategy, train_config=TrainConfig(strategy=strategy, epochs=2, batch_size=16, seed=5),
                                       model_config=ModelConfig(input_size=64), output_dir=str(tmp_path / rep),
                                       dim_e1=16, dim_e2=8)
                runs.append(run_experiment(exp, registry))
            a, b = runs
            same += a.metrics == b.metrics and open(a.loss_log).read() == open(b.loss_log).read()
        state["detail"] = f"{same}/{len(STRATEGIES)} strategies identical"
        assert same == len(STRATEGIES)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
