"""Command-line entry points: training stages, evaluations, figure rendering and the toy corpus.

Exit codes: 0 success, 1 internal failure, 2 usage or precondition error.
Every run writes to ``<out>/<run-id>/`` where the output root comes from
``--out``, then ``$KEYPOINTLAB_OUTPUT_ROOT``, then the config's ``output_dir``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import traceback
from pathlib import Path

import numpy as np

OUTPUT_ROOT_ENV = "KEYPOINTLAB_OUTPUT_ROOT"

log = logging.getLogger("keypointlab")


class UsageError(Exception):
    """Precondition or input problem; reported with exit code 2."""


# ------------------------------------------------------------------ helpers


def _versions() -> dict:
    import cv2
    import pydantic
    import scipy
    import torch
    import yaml

    from . import __version__

    return {
        "keypointlab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "opencv": cv2.__version__,
        "pydantic": pydantic.__version__,
        "pyyaml": yaml.__version__,
    }


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        raise ValueError("refusing to write an empty curve")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


class Run:
    """Output directory with resolved config, config hash, versions manifest and a JSONL log."""

    def __init__(self, name: str, cfg, args, inputs: dict | None = None):
        from .config import dump_config
        from .training import JsonlLogger, config_hash

        self.cfg = cfg
        resolved = cfg.resolved()
        self.inputs = inputs or {}
        self.hash = config_hash({"command": name, "config": resolved, "inputs": self.inputs})
        root = args.out or os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir
        self.dir = Path(root) / f"{name}-{self.hash[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.yaml").write_text(dump_config(cfg))
        (self.dir / "config_hash.txt").write_text(self.hash + "\n")
        _json_dump({"versions": _versions(), "inputs": self.inputs, "overrides": list(args.set or [])},
                   self.dir / "versions.json")
        self.logger = JsonlLogger(self.dir / "log.jsonl")
        self.logger.log(event="start", command=name, config_hash=self.hash)

    def finish(self, metrics: dict) -> None:
        _json_dump(metrics, self.dir / "metrics.json")
        self.logger.log(event="done")
        print(self.dir)


def _load_cfg(args):
    from pydantic import ValidationError

    from .config import load_config

    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        return load_config(args.config, args.set)
    except (ValidationError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _corpus(cfg):
    from .data import load_image_folder, load_manifest, make_toy_corpus, split_corpus

    d = cfg.data
    if d.corpus is None:
        images = make_toy_corpus(d.toy_num_images, d.toy_size, cfg.seed)
    else:
        p = Path(d.corpus)
        if p.is_dir():
            images = load_image_folder(p)
        elif p.is_file():
            images = load_manifest(p)
        else:
            raise UsageError(f"corpus not found: {p}")
    if len(images) <= d.num_val:
        raise UsageError(f"corpus has {len(images)} images; need more than num_val={d.num_val}")
    return split_corpus(images, d.num_val)


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required (pass --{what.replace(' ', '-')})")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_model(path: Path, allowed: tuple[str, ...]):
    from .training import build_model, load_checkpoint

    try:
        payload = load_checkpoint(path)
    except Exception as exc:  # unreadable or foreign file
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload["module"] not in allowed:
        raise UsageError(f"{path} is a {payload['module']} checkpoint; expected one of {allowed}")
    return build_model(payload)


def _detector_train_cfg(cfg, section=None):
    from .detector import DetectorTrainConfig, RewardConfig

    s = section or cfg.detector
    return DetectorTrainConfig(
        steps=s.steps,
        batch_size=s.batch_size,
        lr=s.lr,
        lr_min=s.lr_min,
        weight_decay=s.weight_decay,
        num_keypoints=s.num_keypoints,
        nms_radius=s.nms_radius,
        crop_size=s.crop_size,
        out_size=s.out_size,
        reward=RewardConfig(d_max=s.d_max, rho_pos=s.rho_pos),
        geometry=s.augment.geometry(cfg.seed),
        photometric=s.augment.photometric_config(cfg.seed),
        stochastic_sampling=s.stochastic_sampling,
        val_every=s.val_every,
        num_val_pairs=s.num_val_pairs,
        checkpoint_every=s.checkpoint_every,
        seed=cfg.seed,
    )


def _val_pairs(cfg, val_images, num_pairs: int):
    from .detector import make_validation_pairs

    return make_validation_pairs(val_images, _detector_train_cfg(cfg), cfg.seed, num_pairs, "evaluation")


def _setup_torch():
    import torch

    torch.use_deterministic_algorithms(True, warn_only=True)


# ----------------------------------------------------------------- training


def cmd_train(args) -> int:
    import torch

    from .training import file_hash, torch_seed

    cfg = _load_cfg(args)
    _setup_torch()
    stage = args.stage
    inputs = {}
    if stage in ("ranker", "covariance"):
        det_path = _require_file(args.detector_ckpt, "detector ckpt")
        inputs["detector_ckpt"] = file_hash(det_path)
        detector = _load_model(det_path, ("detector", "covariance"))
    train, val = _corpus(cfg)
    run = Run(f"train-{stage}", cfg, args, inputs)

    if stage == "detector":
        from .detector import random_baseline_repeatability, train_detector
        from .models import DetectorModel

        s = cfg.detector
        torch.manual_seed(torch_seed(cfg.seed, "detector.init"))
        model = DetectorModel(widths=s.widths, head_dim=s.head_dim, cov_shared=s.cov_shared)
        tcfg = _detector_train_cfg(cfg)
        summary = train_detector(train, model, tcfg, val_images=val, out_dir=run.dir, logger=run.logger)
        from .detector import make_validation_pairs

        vp = make_validation_pairs(val, tcfg, cfg.seed, tcfg.num_val_pairs)
        summary["random_baseline_repeatability@3"] = random_baseline_repeatability(vp, tcfg.num_keypoints, cfg.seed)
        if summary["val_history"]:
            summary["val_repeatability@3"] = summary["val_history"][-1][1]

    elif stage == "ranker":
        from .models import RankerModel
        from .ranker import RankerTrainConfig, evaluate_ranker_budgets, train_ranker

        s = cfg.ranker
        torch.manual_seed(torch_seed(cfg.seed, "ranker.init"))
        ranker = RankerModel(width=s.width, num_blocks=s.num_blocks)
        rcfg = RankerTrainConfig(
            steps=s.steps, lr=s.lr, lr_min=s.lr_min, weight_decay=s.weight_decay,
            num_keypoints=s.num_keypoints, nms_radius=cfg.detector.nms_radius, match_radius=s.match_radius,
            soft_rank_strength=s.soft_rank_strength, lambda_ranker=s.lambda_ranker,
            crop_size=cfg.detector.crop_size, out_size=cfg.detector.out_size,
            geometry=s.augment.geometry(cfg.seed), photometric=s.augment.photometric_config(cfg.seed),
            seed=cfg.seed,
        )
        summary = train_ranker(train, detector, ranker, rcfg, out_dir=run.dir, logger=run.logger)
        summary["validation_budgets"] = evaluate_ranker_budgets(
            detector, ranker, _val_pairs(cfg, val, cfg.eval.num_pairs), s.num_keypoints,
            cfg.eval.budget_fractions, cfg.detector.nms_radius,
        )

    else:
        from .covariance import CovarianceTrainConfig, evaluate_covariance, train_covariance

        s = cfg.covariance
        ccfg = CovarianceTrainConfig(
            steps=s.steps, lr=s.lr, lr_min=s.lr_min, num_keypoints=s.num_keypoints,
            nms_radius=cfg.detector.nms_radius, match_radius=s.match_radius,
            crop_size=cfg.detector.crop_size, out_size=cfg.detector.out_size,
            injected_noise=s.injected_noise, exact_correspondences=s.exact_correspondences,
            geometry=s.augment.geometry(cfg.seed), photometric=s.augment.photometric_config(cfg.seed),
            seed=cfg.seed,
        )
        summary = train_covariance(train, detector, ccfg, out_dir=run.dir, logger=run.logger)
        summary["validation"] = evaluate_covariance(
            detector, _val_pairs(cfg, val, cfg.eval.num_pairs), ccfg, cfg.seed
        )

    run.finish(summary)
    return 0


# --------------------------------------------------------------- evaluation


def _detector_fn(args, cfg):
    """``fn(pixels, k) -> KeypointSet`` from a checkpoint or the blob oracle."""
    from .training import file_hash

    if args.oracle_detector:
        from .evalbench import blob_detector

        return blob_detector, {"detector": "blob-oracle"}, None
    path = _require_file(args.detector_ckpt, "detector ckpt")
    model = _load_model(path, ("detector", "covariance"))
    from .detector import make_detector_fn

    return make_detector_fn(model, cfg.eval.nms_radius), {"detector_ckpt": file_hash(path)}, model


def _eval_two_view(args, cfg) -> tuple[dict, dict]:
    from .data import load_image
    from .evalbench import aggregate_pairs, evaluate_pair
    from .geometry import Homography

    fn, inputs, _ = _detector_fn(args, cfg)
    e = cfg.eval
    items = []  # (pixels_a, pixels_b, h_ab, mask_a, mask_b)
    if args.image_a is not None:
        try:
            pa = load_image(_require_file(args.image_a, "image a"))
            pb = load_image(_require_file(args.image_b or args.image_a, "image b"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read image: {exc}") from exc
        h = Homography.load(_require_file(args.homography, "homography")) if args.homography else Homography.identity()
        items.append((pa.pixels, pb.pixels, h, None, None))
        inputs["pair"] = [str(args.image_a), str(args.image_b or args.image_a)]
    elif e.hpatches_dir is not None:
        from .data import load_hpatches_sequence

        root = Path(e.hpatches_dir)
        if not root.is_dir():
            raise UsageError(f"hpatches_dir not found: {root}")
        for seq in sorted(p for p in root.iterdir() if p.is_dir()):
            views = load_hpatches_sequence(seq, resize_shorter=e.rotation_out_size)
            ref = views[0][0]
            for img, h in views[1:]:
                items.append((ref.pixels, img.pixels, h, None, None))
    else:
        _, val = _corpus(cfg)
        for pair in _val_pairs(cfg, val, e.num_pairs):
            items.append((pair.view_a.pixels, pair.view_b.pixels, pair.h_a_to_b, pair.valid_mask_a, pair.valid_mask_b))
    results, rows = [], []
    for i, (pa, pb, h, ma, mb) in enumerate(items):
        ka, kb = fn(pa, e.k), fn(pb, e.k)
        if ma is not None:
            ka, kb = _mask_filter(ka, ma), _mask_filter(kb, mb)
        size, size_b = (pa.shape[1], pa.shape[0]), (pb.shape[1], pb.shape[0])
        r = evaluate_pair(ka, kb, h, size, e.thresholds, 3.0, ma, mb, size_b)
        results.append(r)
        rows.append({"pair": i, "num_matches": r.num_matches, "corner_error": r.corner_error,
                     **{f"rep@{t:g}": r.repeatability[t] for t in r.repeatability}})
    report = aggregate_pairs(results, e.auc_thresholds).to_dict()
    return report, {"pairs.csv": rows}, inputs


def _mask_filter(kps, mask):
    if len(kps) == 0:
        return kps
    r = np.rint(kps.coords).astype(np.int64)
    h, w = mask.shape
    r[:, 0] = np.clip(r[:, 0], 0, w - 1)
    r[:, 1] = np.clip(r[:, 1], 0, h - 1)
    return kps.subset(np.nonzero(mask[r[:, 1], r[:, 0]])[0])


def _eval_rotation(args, cfg):
    from .evalbench import make_blob_image, rotation_sweep

    fn, inputs, _ = _detector_fn(args, cfg)
    e = cfg.eval
    if args.oracle_detector:
        images = [make_blob_image(e.rotation_out_size, seed=cfg.seed + i) for i in range(cfg.data.num_val)]
    else:
        _, images = _corpus(cfg)
    res = rotation_sweep(fn, images, e.rotation_step_deg, e.rotation_noise_sigma, e.rotation_k,
                         e.thresholds, e.rotation_out_size, cfg.seed)
    rows = [{"angle": float(a), **{f"rep@{t:g}": float(res.repeatability[t][i]) for t in res.repeatability}}
            for i, a in enumerate(res.angles)]
    return res.to_dict(), {"rotation.csv": rows}, inputs


def _eval_budget(args, cfg):
    from .ranker import evaluate_ranker_budgets
    from .training import file_hash

    det_path = _require_file(args.detector_ckpt, "detector ckpt")
    rank_path = _require_file(args.ranker_ckpt, "ranker ckpt")
    detector = _load_model(det_path, ("detector", "covariance"))
    ranker = _load_model(rank_path, ("ranker",))
    inputs = {"detector_ckpt": file_hash(det_path), "ranker_ckpt": file_hash(rank_path)}
    _, val = _corpus(cfg)
    e = cfg.eval
    res = evaluate_ranker_budgets(detector, ranker, _val_pairs(cfg, val, e.num_pairs), e.k,
                                  e.budget_fractions, e.nms_radius)
    rows = [{"budget": b, "detector": d, "ranker": r} for b, d, r in zip(res["budgets"], res["detector"], res["ranker"])]
    return res, {"budget.csv": rows}, inputs


def _eval_calibration(args, cfg):
    """2D calibration of the covariance head: sqrt trace of the error covariance vs observed error."""
    import torch

    from .covariance import CovarianceTrainConfig, _covariance_pairs, predict_covariances, propagate_error_cov
    from .evalbench import calibration_curve
    from .geometry import apply_homography, homography_jacobian
    from .models import to_tensor
    from .training import file_hash, substream

    path = _require_file(args.detector_ckpt, "detector ckpt")
    model = _load_model(path, ("covariance", "detector"))
    inputs = {"detector_ckpt": file_hash(path)}
    _, val = _corpus(cfg)
    e = cfg.eval
    ccfg = CovarianceTrainConfig(num_keypoints=e.k, nms_radius=e.nms_radius)
    rng = substream(cfg.seed, "calibration")
    pred, obs = [], []
    for pair in _val_pairs(cfg, val, e.num_pairs):
        sample = _covariance_pairs(model, pair, ccfg, rng)
        if sample is None:
            continue
        matches, xa, xb = sample
        with torch.no_grad():
            sa, sb = predict_covariances(model, to_tensor(np.stack([pair.view_a.pixels, pair.view_b.pixels])), [xa, xb])
        h_ba = pair.h_a_to_b.inverse()
        pa, pb = xa[matches[:, 0]], xb[matches[:, 1]]
        err = pa - apply_homography(h_ba, pb)
        jac = torch.as_tensor(homography_jacobian(h_ba, pb).reshape(-1, 2, 2))
        s_err = propagate_error_cov(sa[matches[:, 0]], sb[matches[:, 1]], jac).numpy()
        pred.extend(np.sqrt(np.trace(s_err, axis1=1, axis2=2)).tolist())
        obs.extend(np.linalg.norm(err, axis=1).tolist())
    pred, obs = np.array(pred), np.array(obs)
    ok = obs > 0
    res = calibration_curve(pred[ok], obs[ok], e.calibration_bins)
    rows = [{"bin_pred": float(p), "bin_obs": float(o)} for p, o in zip(res.bin_pred, res.bin_obs)]
    return {**res.to_dict(), "num_matches": int(ok.sum())}, {"calibration.csv": rows}, inputs


def _eval_triangulation(args, cfg):
    from .evalbench import calibration_curve
    from .triangulate import NoiseModel, precision_filter_curve, run_scene, synth_scene

    t = cfg.triangulate
    noise = NoiseModel.heteroscedastic() if t.noise == "heteroscedastic" else NoiseModel.isotropic(t.sigma_px)
    per_seed, filt_rows = [], []
    for s in range(t.num_seeds):
        res = run_scene(synth_scene(t.num_cams, t.num_points, noise, cfg.seed + s))
        per_seed.append({"seed": cfg.seed + s, "err_weighted": float(res.err_weighted.mean()),
                         "err_identity": float(res.err_identity.mean())})
        for row in precision_filter_curve(res.weighted, res.precisions, res.gt, t.fractions, t.taus):
            filt_rows.append({"seed": cfg.seed + s, **row})
    wins = [r["err_weighted"] < r["err_identity"] for r in per_seed]
    cal_scene = run_scene(synth_scene(t.num_cams, t.calibration_points, noise, cfg.seed + 10_000))
    cal = calibration_curve(cal_scene.predicted_sigma, cal_scene.err_weighted, t.calibration_bins)
    curve = []
    for f in t.fractions:
        for tau in t.taus:
            sel = [r for r in filt_rows if r["fraction"] == f and r["tau"] == tau]
            curve.append({"fraction": f, "tau": tau,
                          "accuracy": float(np.mean([r["accuracy"] for r in sel])),
                          "completeness": float(np.mean([r["completeness"] for r in sel]))})
    report = {
        "win_rate": float(np.mean(wins)),
        "mean_err_weighted": float(np.mean([r["err_weighted"] for r in per_seed])),
        "mean_err_identity": float(np.mean([r["err_identity"] for r in per_seed])),
        "per_seed": per_seed,
        "filter_curve": curve,
        "calibration": cal.to_dict(),
    }
    cal_rows = [{"bin_pred": float(p), "bin_obs": float(o)} for p, o in zip(cal.bin_pred, cal.bin_obs)]
    return report, {"filter.csv": curve, "calibration.csv": cal_rows}, {}


EVAL_TASKS = {
    "two-view": _eval_two_view,
    "rotation": _eval_rotation,
    "budget": _eval_budget,
    "calibration": _eval_calibration,
    "triangulation": _eval_triangulation,
}


def cmd_eval(args) -> int:
    from .training import file_hash

    cfg = _load_cfg(args)
    _setup_torch()
    ckpts = [p for p in (args.detector_ckpt, args.ranker_ckpt) if p and Path(p).is_file()]
    before = {p: file_hash(p) for p in ckpts}
    report, curves, inputs = EVAL_TASKS[args.task](args, cfg)
    run = Run(f"eval-{args.task}", cfg, args, inputs)
    for name, rows in curves.items():
        _write_csv(rows, run.dir / name)
    if any(file_hash(p) != h for p, h in before.items()):
        raise RuntimeError("a checkpoint changed during evaluation")
    run.finish(report)
    return 0


# -------------------------------------------------------------------- plots


def _read_curve(path: Path) -> list[dict]:
    if not path.is_file():
        raise UsageError(f"input not found: {path}")
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        parsed = [{k: float(v) for k, v in r.items() if v not in ("", None)} for r in rows]
    except (ValueError, csv.Error) as exc:
        raise UsageError(f"malformed curve file {path}: {exc}") from exc
    if not parsed:
        raise UsageError(f"empty curve file: {path}")
    return parsed


def render_plot(rows: list[dict], out: Path, title: str = "") -> None:
    """Draw a curve file; the x column is the first one of angle/budget/fraction/bin_pred."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = list(rows[0])
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    if "bin_pred" in cols:
        x = [r["bin_pred"] for r in rows]
        y = [r["bin_obs"] for r in rows]
        ax.loglog(x, y, "o-", label="observed")
        lo, hi = min(x + y), max(x + y)
        ax.loglog([lo, hi], [lo, hi], "k--", lw=0.8, label="ideal")
        ax.set_xlabel("predicted uncertainty")
        ax.set_ylabel("observed error")
    elif "fraction" in cols:
        taus = sorted({r["tau"] for r in rows})
        for tau in taus:
            sel = [r for r in rows if r["tau"] == tau]
            ax.plot([r["fraction"] for r in sel], [r["accuracy"] for r in sel], "o-", label=f"accuracy τ={tau:g}")
        ax.set_xlabel("retained fraction")
        ax.set_ylabel("accuracy")
    else:
        xcol = "angle" if "angle" in cols else cols[0]
        for c in cols:
            if c in (xcol, "pair", "seed"):
                continue
            ax.plot([r[xcol] for r in rows], [r.get(c, np.nan) for r in rows], "o-", ms=3, label=c)
        ax.set_xlabel(xcol)
        ax.set_ylabel("repeatability")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="png", metadata={"Software": None})
    plt.close(fig)


def cmd_plot(args) -> int:
    rows = _read_curve(Path(args.input))
    out = Path(args.output) if args.output else Path(args.input).with_suffix(".png")
    render_plot(rows, out, args.title or "")
    print(out)
    return 0


def cmd_make_toy_corpus(args) -> int:
    from .data import make_toy_corpus, save_image, write_manifest

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for img in make_toy_corpus(args.num_images, args.size, args.seed):
        path = out / f"{img.source_id}.png"
        save_image(img, path)
        entries.append((img.source_id, path.name))
    write_manifest(entries, out / "manifest.jsonl")
    print(out)
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keypointlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. detector.steps=50")
        sp.add_argument("--out", help=f"output root (else ${OUTPUT_ROOT_ENV}, else config output_dir)")

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("stage", choices=["detector", "ranker", "covariance"])
    common(t)
    t.add_argument("--detector-ckpt", help="frozen detector checkpoint (ranker and covariance stages)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run an evaluation protocol")
    e.add_argument("task", choices=sorted(EVAL_TASKS))
    common(e)
    e.add_argument("--detector-ckpt")
    e.add_argument("--ranker-ckpt")
    e.add_argument("--oracle-detector", action="store_true", help="use the hand-built blob detector")
    e.add_argument("--image-a", help="two-view: first image")
    e.add_argument("--image-b", help="two-view: second image (defaults to the first)")
    e.add_argument("--homography", help="two-view: text file with H_ab (defaults to identity)")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="render a curve CSV to PNG")
    pl.add_argument("input")
    pl.add_argument("-o", "--output")
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)

    m = sub.add_parser("make-toy-corpus", help="write the procedural toy corpus as PNGs + manifest")
    m.add_argument("output")
    m.add_argument("--num-images", type=int, default=20)
    m.add_argument("--size", type=int, default=256)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_toy_corpus)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .errors import KeypointLabError

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeypointLabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
