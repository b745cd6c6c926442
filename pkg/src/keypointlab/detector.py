"""Keypoint selection, repeatability reward and the policy-gradient detector objective."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ImageBuffer, PhotometricConfig, TrainingPair, make_training_pair
from .errors import NumericalDomainError, TrainingDivergedError
from .evalbench import random_keypoints, repeatability
from .geometry import Homography, HomographySamplerConfig, apply_homography
from .keypoints import KeypointSet
from .models import DetectorModel, to_tensor
from .training import (
    JsonlLogger,
    config_hash,
    cosine_lr,
    save_checkpoint,
    set_optimizer_lr,
    substream,
    torch_seed,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardConfig:
    d_max: float = 1.2
    rho_pos: float = 1.0
    rho_neg_cap: float = 1e-2
    rho_neg_slope: float = 1e-6
    epsilon_norm: float = 1e-6

    def __post_init__(self):
        if self.d_max <= 0 or self.rho_pos <= 0:
            raise ValueError("d_max and rho_pos must be positive")
        if self.rho_neg_cap < 0 or self.rho_neg_slope < 0:
            raise ValueError("negative-reward cap and slope must be non-negative")

    def rho_neg(self, step: int) -> float:
        return -min(self.rho_neg_cap, step * self.rho_neg_slope)


def global_softmax(scores):
    """Softmax over all pixels of each map (last two dims). Accepts numpy or torch."""
    if isinstance(scores, torch.Tensor):
        return torch.exp(log_softmax_2d(scores))
    s = np.asarray(scores, dtype=np.float64)
    flat = s.reshape(*s.shape[:-2], -1)
    flat = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(s.shape)


def log_softmax_2d(scores: torch.Tensor) -> torch.Tensor:
    flat = scores.reshape(*scores.shape[:-2], -1)
    return torch.log_softmax(flat, dim=-1).reshape(scores.shape)


def nms_mask(scores: np.ndarray, radius: int) -> np.ndarray:
    """Strict local maxima in a ``(2r+1)^2`` window; exact ties go to the earlier (row, col)."""
    s = np.asarray(scores, dtype=np.float64)
    h, w = s.shape
    r = int(radius)
    pad = np.full((h + 2 * r, w + 2 * r), -np.inf)
    pad[r : r + h, r : r + w] = s
    keep = np.isfinite(s)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            other = pad[r + dy : r + dy + h, r + dx : r + dx + w]
            if (dy, dx) < (0, 0):
                keep &= s > other
            else:
                keep &= s >= other
    return keep


def select_keypoints(prob_map, nms_radius: int = 3, k: int = 512, valid_mask=None) -> KeypointSet:
    """NMS followed by top-``k`` on a probability map (or any strictly monotone transform of it).

    ``probs`` of the result are ``exp`` of the input when it is a log-probability
    map (detected by non-positive maximum) and the input itself otherwise.
    """
    if k < 1 or nms_radius < 1:
        raise ValueError("k and nms_radius must be >= 1")
    s = np.asarray(prob_map, dtype=np.float64)
    if valid_mask is not None:
        s = np.where(np.asarray(valid_mask, dtype=bool), s, -np.inf)
    keep = nms_mask(s, nms_radius)
    ys, xs = np.nonzero(keep)
    vals = s[ys, xs]
    # descending score, then row, then col
    order = np.lexsort((xs, ys, -vals))[:k]
    ys, xs, vals = ys[order], xs[order], vals[order]
    pixels = np.stack([xs, ys], axis=1).astype(np.int64)
    return KeypointSet(pixels.astype(np.float64), vals, pixels)


def subpixel_refine(log_prob, kps, patch_radius: int = 2, temperature: float = 1.0) -> np.ndarray:
    """Soft-argmax refinement over a ``(2r+1)^2`` patch of the log-probability map.

    ``kps`` is an ``(N, 2)`` integer array of ``(x, y)`` (or a single point).
    Keypoints closer than ``patch_radius`` to the border are returned unchanged.
    """
    lp = np.asarray(log_prob, dtype=np.float64)
    pts = np.asarray(kps, dtype=np.int64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    out = pts.astype(np.float64)
    h, w = lp.shape
    r = int(patch_radius)
    inner = (pts[:, 0] >= r) & (pts[:, 0] < w - r) & (pts[:, 1] >= r) & (pts[:, 1] < h - r)
    if r > 0 and inner.any():
        offs = np.arange(-r, r + 1)
        dy, dx = np.meshgrid(offs, offs, indexing="ij")
        dy, dx = dy.ravel(), dx.ravel()
        p = pts[inner]
        patch = lp[p[:, 1, None] + dy[None], p[:, 0, None] + dx[None]] / temperature
        patch = patch - patch.max(axis=1, keepdims=True)
        wts = np.exp(patch)
        wts /= wts.sum(axis=1, keepdims=True)
        out[inner, 0] += wts @ dx
        out[inner, 1] += wts @ dy
    return out[0] if single else out


def compute_rewards(kps_a, kps_b, h_ab: Homography, cfg: RewardConfig, step: int):
    """Per-keypoint rewards for both views: ``rho_pos`` if re-detected within ``d_max``, else ``rho_neg(t)``."""
    xa = np.asarray(getattr(kps_a, "coords", kps_a), dtype=np.float64).reshape(-1, 2)
    xb = np.asarray(getattr(kps_b, "coords", kps_b), dtype=np.float64).reshape(-1, 2)
    neg = cfg.rho_neg(step)

    def one_side(src, dst, h):
        if len(src) == 0:
            return np.zeros(0)
        if len(dst) == 0:
            return np.full(len(src), neg)
        proj = apply_homography(h, src)
        d = np.sqrt(((proj[:, None, :] - dst[None, :, :]) ** 2).sum(-1)).min(axis=1)
        return np.where(d <= cfg.d_max, cfg.rho_pos, neg)

    return one_side(xa, xb, h_ab), one_side(xb, xa, h_ab.inverse())


def normalized_rewards(rewards, eps: float = 1e-6) -> np.ndarray:
    """``rho / (|mean(rho)| + eps)``.

    The absolute value only matters when a view's mean reward is negative: it
    keeps failed keypoints penalized instead of flipping their sign (and
    avoids the pole at ``mean == -eps``).
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return r
    return r / (abs(r.mean()) + eps)


def detector_loss(log_p_a, log_p_b, kps_a, kps_b, rewards, eps: float = 1e-6) -> torch.Tensor:
    """Reward-weighted negative log-likelihood of the selected keypoints, summed over both views.

    ``log_p_*`` are ``(H, W)`` log-probability maps; ``rewards`` is the pair
    returned by :func:`compute_rewards`.
    """
    total = log_p_a.new_zeros(())
    for log_p, kps, rew in ((log_p_a, kps_a, rewards[0]), (log_p_b, kps_b, rewards[1])):
        pix = np.asarray(getattr(kps, "pixels", kps), dtype=np.int64).reshape(-1, 2)
        if len(pix) == 0:
            continue
        lp = log_p[torch.as_tensor(pix[:, 1]), torch.as_tensor(pix[:, 0])]
        if not torch.all(torch.isfinite(lp)):
            raise NumericalDomainError("selected keypoint has zero probability")
        w = torch.as_tensor(normalized_rewards(rew, eps), dtype=lp.dtype)
        total = total - (w * lp).sum()
    return total


# --------------------------------------------------------------- inference


@torch.no_grad()
def detect(
    model: DetectorModel,
    image,
    k: int = 512,
    nms_radius: int = 3,
    subpixel: bool = True,
    patch_radius: int = 2,
    temperature: float = 1.0,
    valid_mask=None,
    with_covariance: bool = False,
) -> KeypointSet:
    """Run the detector on one ``H x W x 3`` image (or ``ImageBuffer``)."""
    pixels = getattr(image, "pixels", image)
    x = to_tensor(pixels)
    model.eval()
    if with_covariance:
        out = model(x)
        scores, chol = out["scores"][0], out["cholesky"][0]
    else:
        scores, chol = model.score_map(x)[0], None
    log_p = log_softmax_2d(scores.double()).numpy()
    kps = select_keypoints(log_p, nms_radius, k, valid_mask)
    kps.probs = np.exp(kps.probs)
    if subpixel and len(kps):
        kps.coords = subpixel_refine(log_p, kps.pixels, patch_radius, temperature)
    if with_covariance and len(kps):
        from .covariance import covariance_from_raw
        from .keypoints import sample_map

        raw = sample_map(chol.double(), kps.coords)
        kps.covs = covariance_from_raw(raw).numpy()
    return kps


def make_detector_fn(model: DetectorModel, nms_radius: int = 3, subpixel: bool = True):
    def fn(pixels, k):
        return detect(model, pixels, k=k, nms_radius=nms_radius, subpixel=subpixel)

    return fn


# ---------------------------------------------------------------- training


@dataclass
class DetectorTrainConfig:
    steps: int = 200
    batch_size: int = 1
    lr: float = 2e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    num_keypoints: int = 128
    nms_radius: int = 3
    crop_size: int = 192
    out_size: int = 160
    reward: RewardConfig = field(default_factory=RewardConfig)
    geometry: HomographySamplerConfig = field(default_factory=HomographySamplerConfig)
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig.strong)
    stochastic_sampling: bool = False
    val_every: int = 50
    num_val_pairs: int = 8
    checkpoint_every: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def make_validation_pairs(images, cfg, seed: int, num_pairs: int, name: str = "validation") -> list[TrainingPair]:
    rng = substream(seed, name)
    pairs = []
    for i in range(num_pairs):
        img = images[i % len(images)]
        pairs.append(make_training_pair(img, cfg.geometry, cfg.photometric, cfg.crop_size, cfg.out_size, rng=rng))
    return pairs


def pair_repeatability(kps_a, kps_b, pair: TrainingPair, threshold: float = 3.0) -> float | None:
    return repeatability(kps_a, kps_b, pair.h_a_to_b, [threshold], pair.valid_mask_a, pair.valid_mask_b)[threshold]


def evaluate_detector_repeatability(
    model, pairs, k: int, nms_radius: int = 3, threshold: float = 3.0, subpixel: bool = True
) -> float:
    vals = []
    for pair in pairs:
        ka = detect(model, pair.view_a, k, nms_radius, subpixel=subpixel, valid_mask=pair.valid_mask_a)
        kb = detect(model, pair.view_b, k, nms_radius, subpixel=subpixel, valid_mask=pair.valid_mask_b)
        r = pair_repeatability(ka, kb, pair, threshold)
        if r is not None:
            vals.append(r)
    return float(np.mean(vals))


def random_baseline_repeatability(pairs, k: int, seed: int = 0, threshold: float = 3.0) -> float:
    rng = np.random.default_rng(seed)
    vals = []
    for pair in pairs:
        ka = random_keypoints(pair.valid_mask_a, k, rng)
        kb = random_keypoints(pair.valid_mask_b, k, rng)
        r = pair_repeatability(ka, kb, pair, threshold)
        if r is not None:
            vals.append(r)
    return float(np.mean(vals))


def _sample_stochastic(log_p: np.ndarray, k: int, nms_radius: int, mask, rng) -> KeypointSet:
    """Experimental: draw keypoints from P restricted to NMS maxima instead of taking the top-k."""
    s = np.where(mask, log_p, -np.inf) if mask is not None else log_p
    keep = nms_mask(s, nms_radius)
    ys, xs = np.nonzero(keep)
    p = np.exp(s[ys, xs] - s[ys, xs].max())
    p /= p.sum()
    idx = rng.choice(len(xs), size=min(k, len(xs)), replace=False, p=p)
    pixels = np.stack([xs[idx], ys[idx]], axis=1).astype(np.int64)
    return KeypointSet(pixels.astype(np.float64), np.exp(s[ys[idx], xs[idx]]), pixels)


def train_detector(
    images: list[ImageBuffer],
    model: DetectorModel,
    cfg: DetectorTrainConfig,
    val_images: list[ImageBuffer] | None = None,
    out_dir=None,
    logger: JsonlLogger | None = None,
) -> dict:
    """Stage-one training of encoder + score head with the policy-gradient objective.

    Returns a summary with the final step, validation history and, when
    ``out_dir`` is set, the checkpoint path and hash.
    """
    if not images:
        raise ValueError("training set is empty")
    torch.manual_seed(torch_seed(cfg.seed, "detector.train"))
    rng = substream(cfg.seed, "detector.pairs")
    sample_rng = substream(cfg.seed, "detector.sampling")
    logger = logger or JsonlLogger(None if out_dir is None else Path(out_dir) / "train_log.jsonl")
    params = list(model.detector_parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    cfg_dict = cfg.to_dict()
    val_pairs = make_validation_pairs(val_images, cfg, cfg.seed, cfg.num_val_pairs) if val_images else []
    history = []
    last_ckpt = None
    ckpt_path = None if out_dir is None else Path(out_dir) / "detector.pt"

    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
        set_optimizer_lr(opt, lr)
        model.train()
        pairs = []
        for _ in range(cfg.batch_size):
            img = images[int(rng.integers(len(images)))]
            pairs.append(
                make_training_pair(img, cfg.geometry, cfg.photometric, cfg.crop_size, cfg.out_size, rng=rng)
            )
        batch = np.stack([v.pixels for p in pairs for v in (p.view_a, p.view_b)])
        scores = model.score_map(to_tensor(batch))
        if not torch.isfinite(scores).all():
            raise TrainingDivergedError(f"non-finite scores at step {step}", last_ckpt)
        log_p = log_softmax_2d(scores)
        loss = scores.new_zeros(())
        rewards_all = []
        for i, pair in enumerate(pairs):
            lp_a, lp_b = log_p[2 * i], log_p[2 * i + 1]
            np_a, np_b = lp_a.detach().double().numpy(), lp_b.detach().double().numpy()
            if cfg.stochastic_sampling:
                ka = _sample_stochastic(np_a, cfg.num_keypoints, cfg.nms_radius, pair.valid_mask_a, sample_rng)
                kb = _sample_stochastic(np_b, cfg.num_keypoints, cfg.nms_radius, pair.valid_mask_b, sample_rng)
            else:
                ka = select_keypoints(np_a, cfg.nms_radius, cfg.num_keypoints, pair.valid_mask_a)
                kb = select_keypoints(np_b, cfg.nms_radius, cfg.num_keypoints, pair.valid_mask_b)
            rew = compute_rewards(ka, kb, pair.h_a_to_b, cfg.reward, step)
            rewards_all.extend([rew[0], rew[1]])
            loss = loss + detector_loss(lp_a, lp_b, ka, kb, rew, cfg.reward.epsilon_norm)
        loss = loss / cfg.batch_size
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite detector loss at step {step}", last_ckpt)
        opt.zero_grad(set_to_none=True)
        if loss.requires_grad:  # no keypoint selected in any view -> nothing to learn
            loss.backward()
            opt.step()

        record = {
            "step": step,
            "lr": lr,
            "loss": float(loss.detach()),
            "mean_reward": float(np.mean(np.concatenate(rewards_all))),
            "frac_positive": float(np.mean(np.concatenate(rewards_all) > 0)),
        }
        last = step == cfg.steps - 1
        if val_pairs and (last or (cfg.val_every and (step + 1) % cfg.val_every == 0)):
            record["val_repeatability@3"] = evaluate_detector_repeatability(
                model, val_pairs, cfg.num_keypoints, cfg.nms_radius
            )
            history.append((step, record["val_repeatability@3"]))
        logger.log(**record)
        if ckpt_path is not None and (last or (cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0)):
            save_checkpoint(ckpt_path, "detector", model, step + 1, cfg_dict)
            last_ckpt = str(ckpt_path)

    summary = {"steps": cfg.steps, "val_history": history, "config_hash": config_hash(cfg_dict)}
    if ckpt_path is not None:
        from .training import file_hash

        summary["checkpoint"] = ckpt_path.name
        summary["checkpoint_hash"] = file_hash(ckpt_path)
    return summary
