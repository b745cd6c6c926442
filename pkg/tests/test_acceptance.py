"""End-to-end acceptance checks; each records one PASS/FAIL line for the terminal summary."""
import json
import math
import time

import numpy as np
import pytest
import torch

from keypointlab.cli import main
from keypointlab.covariance import build_covariance, covariance_loss, nll_reprojection
from keypointlab.data import make_toy_corpus, split_corpus
from keypointlab.detector import (
    DetectorTrainConfig,
    detector_loss,
    evaluate_detector_repeatability,
    log_softmax_2d,
    make_detector_fn,
    make_validation_pairs,
    random_baseline_repeatability,
    select_keypoints,
    train_detector,
)
from keypointlab.evalbench import calibration_curve, homography_auc, mutual_matches, rotation_sweep
from keypointlab.geometry import Homography, HomographySamplerConfig, apply_homography, estimate_homography_dlt
from keypointlab.keypoints import KeypointSet
from keypointlab.models import DetectorModel, RankerModel
from keypointlab.ranker import RankerTrainConfig, evaluate_ranker_budgets, hard_rank, ranker_loss, soft_rank, train_ranker
from keypointlab.triangulate import NoiseModel, look_at_camera, precision_filter_curve, run_scene, synth_scene, Track, triangulate_dlt

from oracles import brute_mutual, brute_nms, grid_auc

SEED = 0
TOY_LR = 1e-3
NUM_KEYPOINTS = 128


@pytest.fixture(scope="module")
def toy_split():
    torch.set_num_threads(1)
    return split_corpus(make_toy_corpus(20, 256, SEED), 4)


@pytest.fixture(scope="module")
def trained_detector(toy_split):
    train, val = toy_split
    torch.manual_seed(SEED)
    model = DetectorModel()
    cfg = DetectorTrainConfig(steps=200, lr=TOY_LR, num_keypoints=NUM_KEYPOINTS, out_size=160, val_every=0, seed=SEED)
    t0 = time.time()
    train_detector(train, model, cfg)
    return model, cfg, time.time() - t0


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        p, m = x.copy(), x.copy()
        p[idx] += h
        m[idx] -= h
        g[idx] = (f(p) - f(m)) / (2 * h)
    return g


def _rel_ok(analytic, numeric, rtol=1e-4):
    scale = max(np.abs(numeric).max(), 1e-12)
    return np.allclose(analytic, numeric, rtol=rtol, atol=rtol * scale)


def test_criterion_1_oracle_equivalence(acceptance):
    rng = np.random.default_rng(1)
    t0 = time.time()
    fails = {}

    def check(name, ok):
        fails[name] = fails.get(name, 0) + (not ok)

    for _ in range(100):
        s = rng.normal(size=(int(rng.integers(5, 24)), int(rng.integers(5, 24))))
        if rng.random() < 0.3:
            s = np.round(s)  # exercise tie handling
        r = int(rng.integers(1, 4))
        got = [tuple(p) for p in select_keypoints(s, r, 10_000).pixels.tolist()]
        check("nms", got == brute_nms(s, r))

        th = rng.uniform(0, 2 * np.pi)
        h = Homography(np.array([[np.cos(th), -np.sin(th), rng.uniform(-5, 5)],
                                 [np.sin(th), np.cos(th), rng.uniform(-5, 5)], [0, 0, 1.0]]))
        xa = rng.uniform(0, 60, (int(rng.integers(1, 25)), 2))
        xb = rng.uniform(0, 60, (int(rng.integers(1, 25)), 2))
        m = min(len(xa), len(xb)) // 2
        xb[:m] = apply_homography(h, xa[:m]) + rng.normal(0, 1.0, (m, 2))
        ka, kb = KeypointSet(xa, np.ones(len(xa))), KeypointSet(xb, np.ones(len(xb)))
        check("mutual", sorted(map(tuple, mutual_matches(ka, kb, h, 2.5).pairs.tolist())) == brute_mutual(xa, xb, h, 2.5))

        v = rng.normal(size=int(rng.integers(1, 40)))
        gap = np.diff(np.sort(v)).min() if len(v) > 1 else 1.0
        check("soft_rank", np.allclose(soft_rank(v, 0.5 * gap), hard_rank(v), atol=1e-9))

        hm = Homography(np.eye(3) + rng.normal(0, [[0.1, 0.1, 5], [0.1, 0.1, 5], [1e-4, 1e-4, 0]]))
        src = rng.uniform(0, 150, (int(rng.integers(4, 50)), 2))
        est = estimate_homography_dlt(src, apply_homography(hm, src))
        check("homography_dlt", np.linalg.norm(est.matrix - hm.matrix) < 1e-6)

        n_cams = int(rng.integers(2, 7))
        cams = [look_at_camera((3 * np.cos(a), 3 * np.sin(a), rng.uniform(-0.5, 0.5)), (0, 0, 0), 500.0)
                for a in np.sort(rng.uniform(0, 2 * np.pi, n_cams))]
        x = rng.uniform(-0.5, 0.5, 3)
        try:
            tr = Track(0, range(n_cams), [c.project(x) for c in cams], [np.eye(2)] * n_cams)
            check("point_dlt", np.linalg.norm(triangulate_dlt(tr, cams) - x) < 1e-8)
        except ValueError:
            check("point_dlt", False)

        errs = rng.exponential(2.0, int(rng.integers(1, 30)))
        t = rng.uniform(0.5, 5)
        check("auc", abs(homography_auc(errs, [t])[t] - grid_auc(errs, t, 200_000)) < 1e-5)

    elapsed = time.time() - t0
    ok = not any(fails.values()) and elapsed < 120
    acceptance(1, "oracle equivalence (100 instances each)", ok, f"failures={fails} time={elapsed:.1f}s")
    assert ok


def test_criterion_2_gradient_suite(acceptance):
    rng = np.random.default_rng(2)
    t0 = time.time()
    results = {}

    # detector policy-gradient loss w.r.t. raw scores
    s = rng.normal(size=(2, 12, 12))
    pa, pb = rng.choice(144, 6, replace=False), rng.choice(144, 6, replace=False)
    ka, kb = np.stack([pa % 12, pa // 12], 1), np.stack([pb % 12, pb // 12], 1)
    rew = (rng.choice([1.0, -0.005], 6), rng.choice([1.0, -0.005], 6))

    def det_f(x):
        lp = log_softmax_2d(x)
        return detector_loss(lp[0], lp[1], ka, kb, rew)

    st = torch.tensor(s, requires_grad=True)
    det_f(st).backward()
    results["detector"] = _rel_ok(st.grad.numpy(), _fd(lambda x: float(det_f(torch.tensor(x))), s))

    # Spearman + pull through the soft rank
    sa, sb = rng.normal(0, 3, 16), rng.normal(0, 3, 16)
    matches = np.stack([rng.permutation(16)[:6], rng.permutation(16)[:6]], 1)

    def rank_f(a, b):
        return ranker_loss(soft_rank(a), soft_rank(b), matches, 1.0)

    ta, tb = torch.tensor(sa, requires_grad=True), torch.tensor(sb, requires_grad=True)
    rank_f(ta, tb).backward()
    results["ranker"] = _rel_ok(ta.grad.numpy(), _fd(lambda x: float(rank_f(torch.tensor(x), torch.tensor(sb))), sa)) and \
        _rel_ok(tb.grad.numpy(), _fd(lambda x: float(rank_f(torch.tensor(sa), torch.tensor(x))), sb))

    # bidirectional covariance NLL w.r.t. raw Cholesky channels
    xa = rng.uniform(0, 100, (5, 2))
    h = Homography(np.eye(3) + rng.normal(0, [[0.05, 0.05, 2], [0.05, 0.05, 2], [1e-4, 1e-4, 0]]))
    xb = apply_homography(h, xa) + rng.normal(0, 1, (5, 2))
    raw = rng.normal(0, 0.7, (2, 5, 3))
    pairs = np.stack([np.arange(5)] * 2, 1)

    def cov_f(r):
        r = torch.as_tensor(r)
        sig = [build_covariance(r[v, :, 0], r[v, :, 1], r[v, :, 2]) for v in range(2)]
        return covariance_loss(pairs, xa, xb, sig[0], sig[1], h)

    tr = torch.tensor(raw, requires_grad=True)
    cov_f(tr).backward()
    results["covariance"] = _rel_ok(tr.grad.numpy(), _fd(lambda x: float(cov_f(x)), raw))

    elapsed = time.time() - t0
    ok = all(results.values()) and elapsed < 300
    acceptance(2, "gradients vs central differences (1e-4 rel)", ok, f"{results} time={elapsed:.1f}s")
    assert ok


def test_criterion_3_closed_form_nll(acceptance):
    v1 = float(nll_reprojection(torch.tensor([2.0, 0.0], dtype=torch.float64), torch.tensor(np.diag([4.0, 1.0]))))
    v0 = float(nll_reprojection(torch.tensor([0.0, 0.0], dtype=torch.float64), torch.eye(2, dtype=torch.float64)))
    ok = abs(v1 - (math.log(2) + 0.5)) < 1e-9 and v0 == 0.0
    acceptance(3, "closed-form NLL", ok, f"nll(e=(2,0),diag(4,1))={v1:.12f} nll(0,I)={v0}")
    assert ok


@pytest.mark.slow
def test_criterion_4_detector_smoke_training(acceptance, toy_split, trained_detector):
    _, val = toy_split
    model, cfg, elapsed = trained_detector
    pairs = make_validation_pairs(val, cfg, SEED, 8)
    rep = evaluate_detector_repeatability(model, pairs, NUM_KEYPOINTS)
    base = random_baseline_repeatability(pairs, NUM_KEYPOINTS, SEED)
    ok = rep >= 2 * base and elapsed < 15 * 60
    acceptance(4, "detector repeatability@3px >= 2x random", ok,
               f"trained={rep:.3f} random={base:.3f} ratio={rep / base:.2f} train_time={elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_5_ranker_ordering(acceptance, toy_split, trained_detector):
    train, val = toy_split
    detector, det_cfg, _ = trained_detector
    torch.manual_seed(SEED)
    ranker = RankerModel()
    t0 = time.time()
    train_ranker(train, detector, ranker, RankerTrainConfig(steps=300, lr=TOY_LR, num_keypoints=NUM_KEYPOINTS, seed=SEED))
    pairs = make_validation_pairs(val, det_cfg, SEED, 16)
    res = evaluate_ranker_budgets(detector, ranker, pairs, NUM_KEYPOINTS)
    elapsed = time.time() - t0
    r, d = res["ranker"], res["detector"]
    ok = all(r[i] >= d[i] for i in range(3)) and r[3] == d[3] and elapsed < 20 * 60
    detail = " ".join(f"N={b}: ranker={x:.3f} det={y:.3f}" for b, x, y in zip(res["budgets"], r, d))
    acceptance(5, "ranker ordering >= detector ordering, equal at N", ok, f"{detail} time={elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_6_rotation_augmentation(acceptance, toy_split):
    train, val = toy_split
    auc = {}
    t0 = time.time()
    for rot in (180.0, 0.0):
        torch.manual_seed(SEED)
        model = DetectorModel()
        cfg = DetectorTrainConfig(steps=600, lr=TOY_LR, num_keypoints=NUM_KEYPOINTS, val_every=0, seed=SEED,
                                  geometry=HomographySamplerConfig(max_rotation_deg=rot))
        train_detector(train, model, cfg)
        auc[rot] = rotation_sweep(make_detector_fn(model), val, k=200).auc[2.0]
    elapsed = time.time() - t0
    ok = auc[180.0] >= 1.5 * auc[0.0] and elapsed < 45 * 60
    acceptance(6, "rotation AUC@2px with aug >= 1.5x without", ok,
               f"aug={auc[180.0]:.3f} no_aug={auc[0.0]:.3f} ratio={auc[180.0] / max(auc[0.0], 1e-12):.2f} time={elapsed:.0f}s")
    assert ok


def test_criterion_7_triangulation_calibration(acceptance):
    t0 = time.time()
    res = run_scene(synth_scene(8, 3000, NoiseModel.heteroscedastic(), seed=10_000))
    beta = calibration_curve(res.predicted_sigma, res.err_weighted, 20).slope
    elapsed = time.time() - t0
    ok = 0.9 <= beta <= 1.1 and elapsed < 120
    acceptance(7, "calibration slope in [0.9, 1.1]", ok, f"beta={beta:.3f} points={len(res.gt)} time={elapsed:.1f}s")
    assert ok


def test_criterion_8_covariance_weighting(acceptance):
    wins, acc_f, acc_u = [], [], []
    for seed in range(20):
        res = run_scene(synth_scene(8, 200, NoiseModel.heteroscedastic(), seed=seed))
        wins.append(res.err_weighted.mean() < res.err_identity.mean())
        rows = precision_filter_curve(res.weighted, res.precisions, res.gt, [0.5, 1.0], [0.01])
        acc_f.append(rows[0]["accuracy"])
        acc_u.append(rows[1]["accuracy"])
    win_rate = float(np.mean(wins))
    ok = win_rate >= 0.8 and np.mean(acc_f) >= np.mean(acc_u)
    acceptance(8, "weighted refinement wins and filtering helps", ok,
               f"win_rate={win_rate:.2f} acc@50%={np.mean(acc_f):.3f} acc@100%={np.mean(acc_u):.3f}")
    assert ok


TINY = [
    "data.toy_num_images=6", "data.toy_size=96", "data.num_val=2",
    "detector.steps=4", "detector.widths=[8,8,8,8]", "detector.head_dim=8",
    "detector.crop_size=80", "detector.out_size=64", "detector.num_keypoints=24",
    "detector.val_every=2", "detector.num_val_pairs=2",
    "ranker.steps=3", "ranker.width=8", "ranker.num_blocks=1", "ranker.num_keypoints=24",
    "covariance.steps=3", "covariance.num_keypoints=24",
    "eval.num_pairs=2", "eval.k=24", "eval.rotation_step_deg=45", "eval.rotation_k=24",
    "eval.rotation_out_size=64", "eval.calibration_bins=2", "eval.budget_fractions=[0.5,1.0]",
    "triangulate.num_seeds=2", "triangulate.num_points=40", "triangulate.calibration_points=100",
]


def _run_all(root):
    sets = [a for s in TINY for a in ("--set", s)]
    out = ["--out", str(root)]
    assert main(["train", "detector", *out, *sets]) == 0
    det = next(root.glob("train-detector-*")) / "detector.pt"
    assert main(["train", "ranker", "--detector-ckpt", str(det), *out, *sets]) == 0
    assert main(["train", "covariance", "--detector-ckpt", str(det), *out, *sets]) == 0
    rank = next(root.glob("train-ranker-*")) / "ranker.pt"
    cov = next(root.glob("train-covariance-*")) / "covariance.pt"
    assert main(["eval", "two-view", "--detector-ckpt", str(det), *out, *sets]) == 0
    assert main(["eval", "rotation", "--detector-ckpt", str(det), *out, *sets]) == 0
    assert main(["eval", "budget", "--detector-ckpt", str(det), "--ranker-ckpt", str(rank), *out, *sets]) == 0
    assert main(["eval", "calibration", "--detector-ckpt", str(cov), *out, *sets]) == 0
    assert main(["eval", "triangulation", *out, *sets]) == 0
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.name == "metrics.json" or p.suffix == ".pt"
    }


def test_criterion_9_determinism(acceptance, tmp_path):
    a = _run_all(tmp_path / "a")
    b = _run_all(tmp_path / "b")
    same = sorted(a) == sorted(b) and all(a[k] == b[k] for k in a)
    n_metrics = sum(k.endswith("metrics.json") for k in a)
    n_ckpt = sum(k.endswith(".pt") for k in a)
    acceptance(9, "byte-identical reruns", same, f"{n_metrics} metric files, {n_ckpt} checkpoints compared")
    assert n_metrics == 8 and n_ckpt == 3
    assert same
