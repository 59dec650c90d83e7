"""Acceptance suite: one test per criterion, each printing a PASS line.

Criterion 8 (end-to-end trend) honours VASCMAE_E2E_BUDGET=reduced|full;
the reduced profile is sized for a CPU-only box and is the default.
"""

import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from vascmae.evaluation import (
    froc,
    match_detections,
    permutation_test,
    se_at_fpr,
    sliding_window_infer,
)
from vascmae.geometry import BoundingCube, signed_distance_map
from vascmae.model import (
    AneurysmDetector,
    MaeModel,
    ModelConfig,
    attention_adjacency,
    attention_instrumentation,
    grid_coords,
    patchify,
)
from vascmae.pipeline import (
    default_config,
    load_cases,
    run_eval,
    run_finetune,
    run_infer,
    run_pretrain,
    run_synth,
    sha256_file,
    _load_detector,
)
from vascmae.sampling import CropSampler, plan_mask
from vascmae.synthvasc import PhantomParams, generate_case, write_manifest
from vascmae.training import FinetuneConfig, detection_loss, hungarian_match, mae_loss

from test_evaluation import matched_case
from test_geometry import brute_force_signed_distance
from test_training import brute_force_assignment


def test_c01_sdt_matches_brute_force():
    started = time.time()
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(100):
        shape = tuple(rng.integers(4, 17, size=3))
        mask = rng.random(shape) < rng.uniform(0.05, 0.95)
        if not mask.any() or mask.all():
            continue
        spacing = tuple(rng.uniform(0.2, 1.2, size=3))
        dmap = signed_distance_map(mask, spacing)
        oracle = brute_force_signed_distance(mask, spacing)
        np.testing.assert_allclose(dmap.values, oracle, atol=1e-6)
        checked += 1
    elapsed = time.time() - started
    assert checked >= 90
    assert elapsed < 30
    print(f"\nPASS criterion 1: SDT == brute force on {checked} masks <= 16^3 "
          f"(atol 1e-6 mm) in {elapsed:.1f}s")


def test_c02_hungarian_exact_vs_exhaustive():
    started = time.time()
    rng = np.random.default_rng(2)
    for _ in range(200):
        n, m = rng.integers(1, 7, size=2)
        cost = rng.random((n, m)) * rng.uniform(0.5, 20)
        pairs = hungarian_match(cost)
        total = sum(cost[r, c] for r, c in pairs)
        assert total == pytest.approx(brute_force_assignment(cost), abs=1e-9)
    elapsed = time.time() - started
    assert elapsed < 10
    print(f"\nPASS criterion 2: Hungarian == exhaustive minimum on 200 random "
          f"matrices up to 6x6 in {elapsed:.1f}s")


def test_c03_factorized_reachability_and_memory_bound():
    started = time.time()
    grid = (4, 4, 4)
    coords = grid_coords(grid)
    adjacency = attention_adjacency(coords, grid)
    n = coords.shape[0]
    predicate = torch.zeros(n + 1, n + 1, dtype=torch.bool)
    for i in range(n):
        for j in range(n):
            predicate[i, j] = bool(
                coords[i, 0] == coords[j, 0]
                or (coords[i, 1] == coords[j, 1] and coords[i, 2] == coords[j, 2])
            )
    predicate[n, :] = True
    predicate[:, n] = True
    assert torch.equal(adjacency, predicate)

    bound = (16 * 16 + 1) ** 2
    torch.manual_seed(0)
    detector = AneurysmDetector(ModelConfig(depth=1, dim=12, heads_spatial=4, heads_axial=4))
    with attention_instrumentation() as stats:
        detector(torch.randn(1, 2, 64, 64, 64))
    assert stats.max_elements <= bound
    assert (256, 257) in stats.shapes  # spatial step materialises 256 x 257
    elapsed = time.time() - started
    assert elapsed < 10
    print(f"\nPASS criterion 3: one-layer adjacency == {{slice, column, CLS}} "
          f"predicate; peak attention matrix {stats.max_shape} = "
          f"{stats.max_elements} <= {bound} entries; {elapsed:.1f}s")


GRADCHECK_CONFIG = ModelConfig(depth=1, dim=16, heads_spatial=8, heads_axial=8)
GRADCHECK_GTS = [[BoundingCube((1.1, 2.0, 1.5), 1.2), BoundingCube((2.6, 0.9, 2.2), 0.8)]]
GRADCHECK_EXTENT = (3.2, 3.2, 3.2)


def _gradcheck_setup(which: str):
    """Deterministically rebuild the float64 model and loss closure."""
    torch.manual_seed(3)
    gen = torch.Generator().manual_seed(17)
    crop = torch.randn(1, 2, 8, 8, 8, generator=gen, dtype=torch.float64) * 0.3 + 0.4
    if which == "mae":
        model = MaeModel(GRADCHECK_CONFIG).double()
        target = patchify(crop)
        masked = np.zeros(8, dtype=bool)
        masked[:6] = True  # round(0.75 * 8)
        visible = torch.from_numpy(~masked)[None]
        plan_t = torch.from_numpy(masked)[None]

        def loss_fn():
            return mae_loss(model(crop, visible), target, plan_t, ratio=0.75).total

    else:
        model = AneurysmDetector(GRADCHECK_CONFIG).double()
        fcfg = FinetuneConfig()

        def loss_fn():
            return detection_loss(model(crop), GRADCHECK_GTS, GRADCHECK_EXTENT, fcfg).total

    return model, loss_fn


def _fd_worker(args) -> list[float]:
    """Central differences for every parameter element with
    global_index % n_workers == worker_id; returns them in scan order."""
    which, worker_id, n_workers = args
    torch.set_num_threads(1)  # tiny tensors: thread fan-out only adds overhead
    model, loss_fn = _gradcheck_setup(which)
    out = []
    global_index = 0
    with torch.no_grad():
        for _, p in model.named_parameters():
            flat = p.reshape(-1)
            for idx in range(flat.numel()):
                if global_index % n_workers == worker_id:
                    orig = float(flat[idx])
                    h = 1e-6 * max(1.0, abs(orig))
                    flat[idx] = orig + h
                    plus = float(loss_fn())
                    flat[idx] = orig - h
                    minus = float(loss_fn())
                    flat[idx] = orig
                    out.append((plus - minus) / (2 * h))
                global_index += 1
    return out


def _max_grad_error(which: str, n_workers: int = 2) -> float:
    from concurrent.futures import ProcessPoolExecutor

    model, loss_fn = _gradcheck_setup(which)
    model.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for _, p in model.named_parameters()])

    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        parts = list(pool.map(_fd_worker, [(which, w, n_workers) for w in range(n_workers)]))
    fd = torch.empty_like(analytic)
    for worker_id, values in enumerate(parts):
        fd[worker_id::n_workers] = torch.tensor(values, dtype=torch.float64)

    denom = torch.maximum(analytic.abs(), fd.abs()).clamp_min(1e-3)
    return float(((analytic - fd).abs() / denom).max())


@pytest.mark.slow
def test_c04_gradients_match_central_differences():
    started = time.time()
    mae_err = _max_grad_error("mae")
    assert mae_err <= 1e-4, f"mae_loss gradient mismatch {mae_err:.3e}"
    det_err = _max_grad_error("det")
    assert det_err <= 1e-4, f"detection_loss gradient mismatch {det_err:.3e}"
    elapsed = time.time() - started
    assert elapsed < 300
    print(f"\nPASS criterion 4: max relative gradient error vs central "
          f"differences mae={mae_err:.2e}, detection={det_err:.2e} "
          f"(<= 1e-4) in {elapsed:.0f}s")


def test_c05_masking_contract(tiny_sampler):
    started = time.time()
    rng = np.random.default_rng(5)
    crop = tiny_sampler.sample(rng)

    # Exact count on every draw.
    for _ in range(50):
        plan = plan_mask(crop, rng)
        assert plan.n_masked == 3072
        assert int(plan.masked.sum()) == 3072

    # beta = 0: per-patch inclusion frequency consistent with uniform 0.75.
    n_draws = 20_000
    counts = np.zeros(4096)
    for _ in range(n_draws):
        counts += plan_mask(crop, rng, beta=0.0).flat()
    freq = counts / n_draws
    sigma = np.sqrt(0.75 * 0.25 / n_draws)
    z = np.abs(freq - 0.75) / sigma
    frac_within_3 = float((z <= 3.0).mean())
    assert frac_within_3 >= 0.99, f"only {frac_within_3:.4f} of patches within 3 sigma"
    assert z.max() <= 6.0, f"max |z| = {z.max():.2f}"

    # beta = 1 on a nonuniform crop: masked-set mean artery fraction beats
    # the unmasked set in at least 95% of draws.
    frac_values = crop.patch_artery_frac.reshape(-1)
    assert frac_values.std() > 0
    wins = 0
    for _ in range(1000):
        flags = plan_mask(crop, rng, beta=1.0).flat()
        wins += frac_values[flags].mean() > frac_values[~flags].mean()
    assert wins >= 950, f"bias held in only {wins}/1000 draws"

    elapsed = time.time() - started
    assert elapsed < 120
    print(f"\nPASS criterion 5: 3072/4096 masked every draw; beta=0 uniform "
          f"({frac_within_3:.3f} within 3 sigma, max z {z.max():.2f}); beta=1 bias won "
          f"{wins}/1000 draws; {elapsed:.0f}s")


def test_c06_crop_overlap_contract():
    started = time.time()
    params = PhantomParams(seed=6)
    rng = np.random.default_rng(6)
    n_total = 0
    min_frac = 1.0
    for index in range(10):
        case = generate_case(params, index)
        dmap = signed_distance_map(case.artery_mask, case.spacing_mm)
        sampler = CropSampler(case, dmap)
        for _ in range(1000):
            crop = sampler.sample(rng)
            oz, oy, ox = crop.origin_voxel
            frac = case.artery_mask[oz : oz + 64, oy : oy + 64, ox : ox + 64].mean()
            min_frac = min(min_frac, frac)
            assert frac >= 0.10
            n_total += 1
    elapsed = time.time() - started
    assert n_total == 10_000
    assert elapsed < 300
    print(f"\nPASS criterion 6: 10,000 sampled crops all >= 10% artery overlap "
          f"(min observed {min_frac:.3f}) in {elapsed:.0f}s")


def test_c07_froc_correctness():
    started = time.time()
    # Hand-constructed 2-case example: one TP@0.9, one FP@0.8, one miss.
    hand = [
        matched_case("a", [0.9], [True], [0.9], [5.0]),
        matched_case("b", [0.8], [False], [np.nan], [5.0]),
    ]
    curve = froc(hand)
    assert set(zip(curve.fpr.tolist(), curve.se.tolist())) == {(0.0, 0.5), (0.5, 0.5)}

    rng = np.random.default_rng(7)
    for _ in range(100):
        cases = []
        for c in range(4):
            n_gt = int(rng.integers(1, 4))
            n_det = int(rng.integers(0, 10))
            scores = rng.random(n_det)
            labels = np.zeros(n_det, dtype=bool)
            hits = np.full(n_gt, np.nan)
            order = np.argsort(-scores)
            for g, det_idx in enumerate(order[: int(rng.integers(0, n_gt + 1))]):
                labels[det_idx] = True
                hits[g] = scores[det_idx]
            cases.append(matched_case(f"c{c}", scores, labels, hits, rng.uniform(1, 9, n_gt)))
        curve = froc(cases)
        order = np.argsort(curve.fpr, kind="stable")
        assert (np.diff(curve.se[order]) >= -1e-12).all()
        budgets = [0.0, 0.25, 0.5, 1.0, 2.0, np.inf]
        values = [se_at_fpr(curve, b) for b in budgets]
        assert values == sorted(values)
    elapsed = time.time() - started
    assert elapsed < 60
    print(f"\nPASS criterion 7: hand-swept FROC points exact; monotone on 100 "
          f"random sets; Se@FPr monotone in budget; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion 8: end-to-end trend, pretrain + finetune vs from scratch.
# ---------------------------------------------------------------------------

# Pre-training draws on the full unlabeled pool; fine-tuning sees only a
# labeled subset (the asymmetry the method exists for). The two arms share
# the fine-tuning budget and labeled cases and differ only in encoder init.
E2E_PROFILES = {
    # Full profile per the criterion text (GPU-scale budget).
    "full": dict(
        train_cases=180, labeled_cases=45, eval_cases=20,
        pretrain_epochs=20, finetune_epochs=20,
        pretrain_crops=4, finetune_crops=4, pretrain_batch=8, finetune_batch=8,
        finetune_lr=1e-3, seeds=(11, 12, 13),
    ),
    # Reduced CPU-only profile (criterion allows a reduced budget off-GPU):
    # same volumes, model, held-out size, seeds and thresholds.
    "reduced": dict(
        train_cases=24, labeled_cases=12, eval_cases=20,
        pretrain_epochs=8, finetune_epochs=120,
        pretrain_crops=2, finetune_crops=1, pretrain_batch=4, finetune_batch=4,
        finetune_lr=1e-3, seeds=(11, 12, 13),
    ),
}


def _e2e_config(seed: int, profile: dict):
    cfg = default_config(seed=seed).model_copy(deep=True)
    cfg.phantom.lesion_diameter_mm = (4.0, 9.0)
    cfg.phantom.n_lesions = (0, 2)  # healthy cases provide negative crops
    cfg.pretrain.epochs = profile["pretrain_epochs"]
    cfg.pretrain.crops_per_case = profile["pretrain_crops"]
    cfg.pretrain.batch_size = profile["pretrain_batch"]
    cfg.finetune.epochs = profile["finetune_epochs"]
    cfg.finetune.crops_per_case = profile["finetune_crops"]
    cfg.finetune.batch_size = profile["finetune_batch"]
    cfg.finetune.lr = profile["finetune_lr"]
    return cfg


def _se_at_one(config, eval_manifest, model_path) -> float:
    detector = _load_detector(model_path, config)
    matched = []
    for case, dmap in load_cases(eval_manifest):
        preds = sliding_window_infer(detector, case, dmap)
        gts = [BoundingCube(l.center_mm, l.side_mm) for l in case.lesions]
        matched.append(match_detections(preds, gts, [l.diameter_mm for l in case.lesions]))
    return se_at_fpr(froc(matched), 1.0)


@pytest.mark.slow
def test_c08_end_to_end_pretraining_trend(tmp_path):
    started = time.time()
    profile_name = os.environ.get("VASCMAE_E2E_BUDGET", "reduced")
    profile = E2E_PROFILES[profile_name]
    ft_scores, scratch_scores = [], []
    for seed in profile["seeds"]:
        cfg = _e2e_config(seed, profile)
        root = tmp_path / f"seed{seed}"
        train = run_synth(cfg, profile["train_cases"], root / "train")
        eval_cfg = cfg.model_copy(update={"seed": seed + 10_000})
        evalset = run_synth(eval_cfg, profile["eval_cases"], root / "eval")

        # Lesion annotations are available for the labeled subset only;
        # pre-training consumes the full pool (it needs no labels).
        labeled_manifest = train.out_dir / "labeled_manifest.txt"
        write_manifest(train.case_dirs[: profile["labeled_cases"]], labeled_manifest)

        pre = run_pretrain(cfg, train.manifest_path, root / "pre")
        ft = run_finetune(cfg, labeled_manifest, pre.checkpoint_path, root / "ft")
        scratch = run_finetune(cfg, labeled_manifest, None, root / "scratch")

        ft_se = _se_at_one(cfg, evalset.manifest_path, ft.checkpoint_path)
        scratch_se = _se_at_one(cfg, evalset.manifest_path, scratch.checkpoint_path)
        ft_scores.append(ft_se)
        scratch_scores.append(scratch_se)
        print(f"\n  seed {seed}: Se@FPr=1.0 pretrained={ft_se:.3f} "
              f"from-scratch={scratch_se:.3f} ({time.time() - started:.0f}s)")

    mean_ft = float(np.mean(ft_scores))
    mean_gap = float(np.mean(ft_scores) - np.mean(scratch_scores))
    elapsed = time.time() - started
    assert mean_ft >= 0.80, f"pretrained Se@FPr=1.0 {mean_ft:.3f} < 0.80"
    assert mean_gap >= 0.05, f"pretraining gap {mean_gap:.3f} < 0.05"
    print(f"\nPASS criterion 8 [{profile_name}]: mean Se@FPr=1.0 pretrained "
          f"{mean_ft:.3f} >= 0.80, gap over from-scratch {mean_gap:+.3f} >= 0.05, "
          f"3 seeds, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_c09_checksum_determinism(tmp_path):
    started = time.time()
    cfg = default_config(seed=77).model_copy(deep=True)
    cfg.phantom.volume_dims = (64, 64, 64)
    cfg.phantom.n_vessels = (6, 8)
    cfg.phantom.vessel_radius_mm = (1.3, 2.0)
    cfg.model.depth = 1
    cfg.model.dim = 12
    cfg.model.heads_spatial = 4
    cfg.model.heads_axial = 4
    cfg.pretrain.epochs = 2
    cfg.pretrain.crops_per_case = 1
    cfg.pretrain.batch_size = 2
    cfg.finetune.epochs = 1
    cfg.finetune.crops_per_case = 1
    cfg.finetune.batch_size = 2
    cfg.eval.permutation_n = 500

    data = run_synth(cfg, 3, tmp_path / "data")

    pre_a = run_pretrain(cfg, data.manifest_path, tmp_path / "pre_a")
    pre_b = run_pretrain(cfg, data.manifest_path, tmp_path / "pre_b")
    log_a, log_b = sha256_file(pre_a.log_path), sha256_file(pre_b.log_path)
    ckpt_a, ckpt_b = sha256_file(pre_a.checkpoint_path), sha256_file(pre_b.checkpoint_path)
    assert log_a == log_b, "pretrain logs differ between identical runs"
    assert ckpt_a == ckpt_b, "pretrain checkpoints differ between identical runs"

    fin = run_finetune(cfg, data.manifest_path, pre_a.checkpoint_path, tmp_path / "fin")
    inf = run_infer(cfg, data.manifest_path, fin.checkpoint_path, tmp_path / "inf")
    ev_a = run_eval(cfg, data.manifest_path, [("m", inf.predictions_path)], tmp_path / "ev_a")
    ev_b = run_eval(cfg, data.manifest_path, [("m", inf.predictions_path)], tmp_path / "ev_b")
    for name in ("metrics.json", "metrics.csv", "froc_m.csv", "froc.svg", "config.json"):
        assert sha256_file(tmp_path / "ev_a" / name) == sha256_file(tmp_path / "ev_b" / name), name

    elapsed = time.time() - started
    print(f"\nPASS criterion 9: repeated pretrain (2 epochs) and eval runs are "
          f"checksum-identical (logs {log_a[:12]}.., checkpoint {ckpt_a[:12]}..); "
          f"{elapsed:.0f}s")


def test_c10_permutation_calibration():
    started = time.time()
    hits = np.array([1.0, 0, 1, 1, 0, 1, 0, 1, 1, 1, 0, 1])
    assert permutation_test(hits, hits.copy(), n_perm=10_000, seed=10) == 1.0
    p = permutation_test(np.ones(20), np.zeros(20), n_perm=10_000, seed=10)
    assert p < 0.01
    elapsed = time.time() - started
    print(f"\nPASS criterion 10: identical hit vectors give p = 1.0; all-hit vs "
          f"all-miss over 20 lesions gives p = {p:.5f} < 0.01; {elapsed:.1f}s")
