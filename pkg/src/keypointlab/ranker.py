"""Differentiable soft ranking, Spearman and pull losses, and the standalone ranker training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import isotonic_regression

from .data import ImageBuffer, PhotometricConfig, make_training_pair
from .errors import TrainingDivergedError
from .evalbench import budget_curve, mutual_matches, rank_order_truncate
from .geometry import HomographySamplerConfig
from .keypoints import KeypointSet, sample_map
from .models import DetectorModel, RankerModel, to_tensor
from .training import (
    JsonlLogger,
    config_hash,
    cosine_lr,
    file_hash,
    parameter_hash,
    save_checkpoint,
    set_optimizer_lr,
    substream,
)

__all__ = [
    "SoftRankConfig",
    "soft_rank",
    "spearman_loss",
    "pull_loss",
    "ranker_loss",
    "rank_order_truncate",
    "RankerTrainConfig",
    "train_ranker",
    "ranker_scores",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SoftRankConfig:
    regularization_strength: float = 1.0

    def __post_init__(self):
        if not self.regularization_strength > 0:
            raise ValueError("regularization_strength must be positive")


def _project_permutohedron(z: np.ndarray):
    """Euclidean projection of ``z`` onto the permutohedron of ``(n, ..., 1)``.

    Returns the projection and the isotonic blocks (in sorted order) needed
    for the backward pass.
    """
    n = len(z)
    w = np.arange(n, 0, -1, dtype=np.float64)
    order = np.argsort(-z, kind="stable")
    s = z[order]
    res = isotonic_regression(s - w, increasing=False)
    out = np.empty(n)
    out[order] = s - res.x
    return out, order, res.blocks


class _SoftRank(torch.autograd.Function):
    @staticmethod
    def forward(ctx, theta, eps):
        z = -theta.detach().cpu().double().numpy() / eps
        out, order, blocks = _project_permutohedron(z)
        ctx.eps = eps
        ctx.order = order
        ctx.blocks = blocks
        return torch.as_tensor(out, dtype=theta.dtype, device=theta.device)

    @staticmethod
    def backward(ctx, grad):
        g = grad.detach().cpu().double().numpy()[ctx.order]
        # Jacobian of the projection is I - (block averaging) in sorted order
        avg = np.empty_like(g)
        b = ctx.blocks
        for lo, hi in zip(b[:-1], b[1:]):
            avg[lo:hi] = g[lo:hi].mean()
        gz = np.empty_like(g)
        gz[ctx.order] = g - avg
        return torch.as_tensor(-gz / ctx.eps, dtype=grad.dtype, device=grad.device), None


def soft_rank(scores, cfg: SoftRankConfig | float = SoftRankConfig()):
    """Soft ranks of a 1-D score vector; rank 1 is the highest score.

    Accepts numpy (returns numpy) or a torch tensor (differentiable).
    """
    eps = cfg if isinstance(cfg, (int, float)) else cfg.regularization_strength
    if eps <= 0:
        raise ValueError("regularization strength must be positive")
    if isinstance(scores, torch.Tensor):
        if scores.ndim != 1 or scores.numel() < 1:
            raise ValueError("soft_rank expects a non-empty 1-D vector")
        return _SoftRank.apply(scores, float(eps))
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("soft_rank expects a non-empty 1-D vector")
    return _project_permutohedron(-s / eps)[0]


def hard_rank(scores) -> np.ndarray:
    """Descending integer ranks (1 = highest), ties broken by index."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    out = np.empty(len(s))
    out[order] = np.arange(1, len(s) + 1)
    return out


def spearman_loss(ranks_a_matched, ranks_b_matched) -> torch.Tensor:
    ra = torch.as_tensor(ranks_a_matched)
    rb = torch.as_tensor(ranks_b_matched)
    if ra.shape != rb.shape:
        raise ValueError("matched rank vectors must have equal length")
    if ra.numel() == 0:
        log.warning("empty match set: spearman loss contributes 0")
        return ra.new_zeros((), dtype=torch.float64) if not ra.is_floating_point() else ra.new_zeros(())
    return ((ra - rb) ** 2).mean()


def pull_loss(soft_ranks, matched_flags) -> torch.Tensor:
    r = torch.as_tensor(soft_ranks)
    flags = torch.as_tensor(np.asarray(matched_flags, dtype=bool))
    n = r.shape[0]
    if n < 1:
        raise ValueError("pull loss needs at least one keypoint")
    target = torch.where(flags, torch.ones_like(r), torch.full_like(r, float(n)))
    return (r - target).abs().mean()


def ranker_loss(ranks_a, ranks_b, matches, lambda_ranker: float = 1.0) -> torch.Tensor:
    """Spearman term on matched subsets plus ``lambda`` times the per-view mean pull, averaged over views.

    ``ranks_*`` are soft ranks over all keypoints of each view; ``matches`` is
    ``(M, 2)`` of ``(index_a, index_b)``.
    """
    ra, rb = torch.as_tensor(ranks_a), torch.as_tensor(ranks_b)
    pairs = np.asarray(getattr(matches, "pairs", matches), dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (
        pairs.min() < 0 or pairs[:, 0].max() >= len(ra) or pairs[:, 1].max() >= len(rb)
    ):
        raise ValueError("match index out of range")
    ia, ib = torch.as_tensor(pairs[:, 0]), torch.as_tensor(pairs[:, 1])
    spear = spearman_loss(ra[ia], rb[ib])
    flags_a = np.zeros(len(ra), dtype=bool)
    flags_b = np.zeros(len(rb), dtype=bool)
    flags_a[pairs[:, 0]] = True
    flags_b[pairs[:, 1]] = True
    pull = 0.5 * (pull_loss(ra, flags_a) + pull_loss(rb, flags_b))
    return spear + lambda_ranker * pull


def ranker_scores(ranker: RankerModel, image, coords) -> np.ndarray:
    """Ranker map sampled (bilinear) at ``coords``."""
    pixels = getattr(image, "pixels", image)
    ranker.eval()
    with torch.no_grad():
        rmap = ranker(to_tensor(pixels))[0]
        return sample_map(rmap[None].double(), coords)[:, 0].numpy()


# ---------------------------------------------------------------- training


@dataclass
class RankerTrainConfig:
    steps: int = 300
    lr: float = 2e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    num_keypoints: int = 128
    nms_radius: int = 3
    match_radius: float = 3.0
    soft_rank_strength: float = 1.0
    lambda_ranker: float = 1.0
    crop_size: int = 192
    out_size: int = 160
    geometry: HomographySamplerConfig = field(default_factory=HomographySamplerConfig)
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig.strong)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _pair_keypoints(detector: DetectorModel, pair, k: int, nms_radius: int):
    from .detector import detect

    ka = detect(detector, pair.view_a, k, nms_radius, subpixel=True, valid_mask=pair.valid_mask_a)
    kb = detect(detector, pair.view_b, k, nms_radius, subpixel=True, valid_mask=pair.valid_mask_b)
    return ka, kb


def train_ranker(
    images: list[ImageBuffer],
    detector: DetectorModel,
    ranker: RankerModel,
    cfg: RankerTrainConfig,
    out_dir=None,
    logger: JsonlLogger | None = None,
) -> dict:
    """Train the ranker on matches produced by a frozen detector in inference mode."""
    if not images:
        raise ValueError("training set is empty")
    det_hash = parameter_hash(detector)
    for p in detector.parameters():
        p.requires_grad_(False)
    rng = substream(cfg.seed, "ranker.pairs")
    logger = logger or JsonlLogger(None if out_dir is None else Path(out_dir) / "train_log.jsonl")
    opt = torch.optim.AdamW(ranker.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    eps = cfg.soft_rank_strength

    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
        set_optimizer_lr(opt, lr)
        img = images[int(rng.integers(len(images)))]
        pair = make_training_pair(img, cfg.geometry, cfg.photometric, cfg.crop_size, cfg.out_size, rng=rng)
        ka, kb = _pair_keypoints(detector, pair, cfg.num_keypoints, cfg.nms_radius)
        if len(ka) == 0 or len(kb) == 0:
            logger.log(step=step, lr=lr, skipped=True)
            continue
        ms = mutual_matches(ka, kb, pair.h_a_to_b, cfg.match_radius)
        ranker.train()
        rmaps = ranker(to_tensor(np.stack([pair.view_a.pixels, pair.view_b.pixels])))
        sa = sample_map(rmaps[0:1], ka.coords)[:, 0]
        sb = sample_map(rmaps[1:2], kb.coords)[:, 0]
        loss = ranker_loss(soft_rank(sa, eps), soft_rank(sb, eps), ms.pairs, cfg.lambda_ranker)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite ranker loss at step {step}", None)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        logger.log(step=step, lr=lr, loss=float(loss.detach()), num_matches=len(ms.pairs), num_kps=len(ka))

    if parameter_hash(detector) != det_hash:
        raise RuntimeError("detector parameters changed during ranker training")
    cfg_dict = cfg.to_dict()
    summary = {"steps": cfg.steps, "config_hash": config_hash(cfg_dict), "detector_hash": det_hash}
    if out_dir is not None:
        path = Path(out_dir) / "ranker.pt"
        save_checkpoint(
            path, "ranker", ranker, cfg.steps, cfg_dict,
            extra={"detector_hash": det_hash, "lambda_ranker": cfg.lambda_ranker, "soft_rank_strength": eps},
        )
        summary["checkpoint"] = path.name
        summary["checkpoint_hash"] = file_hash(path)
    return summary


def evaluate_ranker_budgets(
    detector: DetectorModel,
    ranker: RankerModel,
    pairs,
    k: int,
    fractions=(0.125, 0.25, 0.5, 1.0),
    nms_radius: int = 3,
    threshold: float = 3.0,
) -> dict:
    """Mean repeatability at budgets ``fraction * k`` under detector-probability and ranker ordering."""
    budgets = [max(1, int(round(f * k))) for f in fractions]
    res = {"budgets": budgets, "detector": [], "ranker": []}
    acc = {"detector": [[] for _ in budgets], "ranker": [[] for _ in budgets]}
    for pair in pairs:
        ka, kb = _pair_keypoints(detector, pair, k, nms_radius)
        ra = ranker_scores(ranker, pair.view_a, ka.coords)
        rb = ranker_scores(ranker, pair.view_b, kb.coords)
        for name, (sa, sb) in (("detector", (ka.probs, kb.probs)), ("ranker", (ra, rb))):
            curve = budget_curve(
                ka, kb, sa, sb, pair.h_a_to_b, budgets, threshold, pair.valid_mask_a, pair.valid_mask_b
            )
            for i, n in enumerate(budgets):
                if curve[n] is not None:
                    acc[name][i].append(curve[n])
    for name in ("detector", "ranker"):
        res[name] = [float(np.mean(v)) if v else None for v in acc[name]]
    return res
