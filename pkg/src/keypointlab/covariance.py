"""Metric 2D keypoint covariances: Cholesky head, error propagation and bidirectional NLL.

The math operates on torch tensors so the same code serves training and
tests; numpy inputs are accepted and converted (float64).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InsufficientDataError, NumericalDomainError
from .data import PhotometricConfig
from .geometry import Homography, HomographySamplerConfig, apply_homography, homography_jacobian

log = logging.getLogger(__name__)

DIAG_FLOOR = 1e-4


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cholesky_factor(raw_l11, raw_l21, raw_l22) -> torch.Tensor:
    """Lower-triangular ``L`` with softplus-activated, floored diagonal. Shape ``(..., 2, 2)``."""
    raw_l11, raw_l21, raw_l22 = _t(raw_l11), _t(raw_l21), _t(raw_l22)
    l11 = F.softplus(raw_l11).clamp_min(DIAG_FLOOR)
    l22 = F.softplus(raw_l22).clamp_min(DIAG_FLOOR)
    zero = torch.zeros_like(l11)
    row0 = torch.stack([l11, zero], dim=-1)
    row1 = torch.stack([raw_l21, l22], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def build_covariance(raw_l11, raw_l21, raw_l22) -> torch.Tensor:
    """``Sigma = L L^T`` from the three raw Cholesky channels."""
    chol = cholesky_factor(raw_l11, raw_l21, raw_l22)
    return chol @ chol.transpose(-1, -2)


def covariance_from_raw(raw: torch.Tensor) -> torch.Tensor:
    """``(..., 3)`` raw channels -> ``(..., 2, 2)`` covariances."""
    return build_covariance(raw[..., 0], raw[..., 1], raw[..., 2])


def propagate_error_cov(sigma_a, sigma_b, jac_ba) -> torch.Tensor:
    """``Sigma_A + J Sigma_B J^T``; batched over leading dimensions."""
    sigma_a, sigma_b = _t(sigma_a), _t(sigma_b)
    jac = _t(jac_ba).to(sigma_b.dtype)
    return sigma_a + jac @ sigma_b @ jac.transpose(-1, -2)


def _chol2(sigma: torch.Tensor):
    a = sigma[..., 0, 0]
    b = 0.5 * (sigma[..., 0, 1] + sigma[..., 1, 0])
    c = sigma[..., 1, 1]
    if torch.any(a <= 0):
        raise NumericalDomainError("covariance is not positive definite")
    l11 = torch.sqrt(a)
    l21 = b / l11
    d = c - l21 * l21
    if torch.any(d <= 0):
        raise NumericalDomainError("covariance is not positive definite")
    return l11, l21, torch.sqrt(d)


def nll_reprojection(err, sigma_err) -> torch.Tensor:
    """Gaussian NLL without the constant: ``0.5 log det S + 0.5 e^T S^-1 e``.

    Batched: ``err (..., 2)``, ``sigma_err (..., 2, 2)``. Uses the closed-form
    2x2 Cholesky factor for both the determinant and the solve.
    """
    err, sigma_err = _t(err), _t(sigma_err)
    err = err.to(sigma_err.dtype)
    l11, l21, l22 = _chol2(sigma_err)
    # forward substitution L z = e
    z1 = err[..., 0] / l11
    z2 = (err[..., 1] - l21 * z1) / l22
    logdet = 2.0 * (torch.log(l11) + torch.log(l22))
    return 0.5 * logdet + 0.5 * (z1 * z1 + z2 * z2)


def covariance_loss(matches, kps_a, kps_b, sigmas_a, sigmas_b, h_ab: Homography) -> torch.Tensor:
    """Average bidirectional NLL over matched keypoints.

    ``matches`` is an ``(M, 2)`` integer array of ``(index_a, index_b)``;
    ``kps_*`` are ``(N, 2)`` coordinates (or ``KeypointSet``); ``sigmas_*``
    are ``(N, 2, 2)`` covariance tensors (gradients flow through them only).
    """
    pairs = np.asarray(getattr(matches, "pairs", matches), dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise InsufficientDataError("covariance loss is undefined for an empty match set")
    xa = np.asarray(getattr(kps_a, "coords", kps_a), dtype=np.float64)[pairs[:, 0]]
    xb = np.asarray(getattr(kps_b, "coords", kps_b), dtype=np.float64)[pairs[:, 1]]
    sigmas_a, sigmas_b = _t(sigmas_a), _t(sigmas_b)
    sa = sigmas_a[torch.as_tensor(pairs[:, 0])]
    sb = sigmas_b[torch.as_tensor(pairs[:, 1])]
    dtype = sa.dtype
    h_ba = h_ab.inverse()

    e_ba = torch.as_tensor(xa - apply_homography(h_ba, xb), dtype=dtype)
    j_ba = torch.as_tensor(homography_jacobian(h_ba, xb).reshape(-1, 2, 2), dtype=dtype)
    nll_ba = nll_reprojection(e_ba, propagate_error_cov(sa, sb, j_ba))

    e_ab = torch.as_tensor(xb - apply_homography(h_ab, xa), dtype=dtype)
    j_ab = torch.as_tensor(homography_jacobian(h_ab, xa).reshape(-1, 2, 2), dtype=dtype)
    nll_ab = nll_reprojection(e_ab, propagate_error_cov(sb, sa, j_ab))

    return (nll_ba + nll_ab).sum() / (2 * len(pairs))


def softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class CovarianceHead(nn.Module):
    """Three-channel Cholesky map from concatenated multi-scale features."""

    def __init__(self, in_channels: int, hidden: int = 32, init_std_px: float = 1.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 1),
            nn.SELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SELU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )
        last = self.net[-1]
        nn.init.zeros_(last.weight)
        with torch.no_grad():
            last.bias.copy_(torch.tensor([softplus_inverse(init_std_px), 0.0, softplus_inverse(init_std_px)]))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.net(feats)


# ---------------------------------------------------------------- training


def predict_covariances(model, image_batch: torch.Tensor, coords_list) -> list[torch.Tensor]:
    """Covariances at subpixel keypoints: raw channels are sampled bilinearly, then activated."""
    from .keypoints import sample_map

    with torch.no_grad():
        feats = model.features(image_batch) if model.cov_shared else None
    raw = model.cholesky_map(image_batch, feats)
    return [covariance_from_raw(sample_map(raw[i], c).double()) for i, c in enumerate(coords_list)]


def _trainable_only_cov(model):
    cov_ids = {id(p) for p in model.covariance_parameters()}
    for p in model.parameters():
        p.requires_grad_(id(p) in cov_ids)


def _covariance_pairs(detector, pair, cfg, rng):
    """Detected keypoints for both views, ground-truth matches and optionally noise-perturbed coordinates."""
    from .detector import detect
    from .evalbench import mutual_matches

    ka = detect(detector, pair.view_a, cfg.num_keypoints, cfg.nms_radius, valid_mask=pair.valid_mask_a)
    kb = detect(detector, pair.view_b, cfg.num_keypoints, cfg.nms_radius, valid_mask=pair.valid_mask_b)
    if len(ka) == 0 or len(kb) == 0:
        return None
    if cfg.exact_correspondences:
        # view-B points are the exact reprojections of covisible view-A detections
        proj = apply_homography(pair.h_a_to_b, ka.coords)
        h, w = pair.valid_mask_b.shape
        xi = np.round(proj).astype(np.int64)
        inside = (xi[:, 0] >= 0) & (xi[:, 0] < w) & (xi[:, 1] >= 0) & (xi[:, 1] < h)
        inside[inside] = pair.valid_mask_b[xi[inside, 1], xi[inside, 0]]
        idx = np.nonzero(inside)[0]
        if len(idx) == 0:
            return None
        xa, xb = ka.coords[idx].copy(), proj[idx]
        pairs = np.stack([np.arange(len(idx)), np.arange(len(idx))], axis=1)
    else:
        ms = mutual_matches(ka, kb, pair.h_a_to_b, cfg.match_radius)
        if len(ms.pairs) == 0:
            return None
        xa, xb, pairs = ka.coords.copy(), kb.coords.copy(), ms.pairs
    if cfg.injected_noise is not None:
        chol = np.linalg.cholesky(np.asarray(cfg.injected_noise, dtype=np.float64))
        xa = xa + rng.standard_normal(xa.shape) @ chol.T
        xb = xb + rng.standard_normal(xb.shape) @ chol.T
        h, w = pair.valid_mask_a.shape
        xa = np.clip(xa, 0, [w - 1, h - 1])
        xb = np.clip(xb, 0, [w - 1, h - 1])
    return pairs, xa, xb


@dataclass
class CovarianceTrainConfig:
    steps: int = 200
    lr: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 0.0
    num_keypoints: int = 128
    nms_radius: int = 3
    match_radius: float = 3.0
    crop_size: int = 192
    out_size: int = 160
    # known per-keypoint Gaussian noise (px^2) added to both views; None uses raw detections
    injected_noise: list | None = None
    # pair view-A detections with their exact reprojections instead of view-B detections
    exact_correspondences: bool = False
    geometry: HomographySamplerConfig = field(default_factory=HomographySamplerConfig)
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig.strong)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def train_covariance(images, model, cfg: CovarianceTrainConfig, out_dir=None, logger=None) -> dict:
    """Fit the covariance head on inference-time matches of the frozen detector."""
    from .data import make_training_pair
    from .models import to_tensor
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

    if not images:
        raise ValueError("training set is empty")
    frozen = dict(model.named_parameters())
    cov_names = {n for n, p in frozen.items() if n.startswith(("cov_head", "cov_stem"))}
    frozen_hash = parameter_hash([p for n, p in frozen.items() if n not in cov_names])
    _trainable_only_cov(model)
    rng = substream(cfg.seed, "covariance.pairs")
    noise_rng = substream(cfg.seed, "covariance.noise")
    logger = logger or JsonlLogger(None if out_dir is None else Path(out_dir) / "train_log.jsonl")
    opt = torch.optim.AdamW(list(model.covariance_parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay)

    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
        set_optimizer_lr(opt, lr)
        img = images[int(rng.integers(len(images)))]
        pair = make_training_pair(img, cfg.geometry, cfg.photometric, cfg.crop_size, cfg.out_size, rng=rng)
        sample = _covariance_pairs(model, pair, cfg, noise_rng)
        if sample is None:
            logger.log(step=step, lr=lr, skipped=True)
            continue
        matches, xa, xb = sample
        model.train()
        batch = to_tensor(np.stack([pair.view_a.pixels, pair.view_b.pixels]))
        sa, sb = predict_covariances(model, batch, [xa, xb])
        loss = covariance_loss(matches, xa, xb, sa, sb, pair.h_a_to_b)
        if not torch.isfinite(loss):
            from .errors import TrainingDivergedError

            raise TrainingDivergedError(f"non-finite covariance loss at step {step}", None)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        logger.log(step=step, lr=lr, loss=float(loss.detach()), num_matches=len(matches))

    after = parameter_hash([p for n, p in model.named_parameters() if n not in cov_names])
    if after != frozen_hash:
        raise RuntimeError("frozen detector parameters changed during covariance training")
    cfg_dict = cfg.to_dict()
    summary = {"steps": cfg.steps, "config_hash": config_hash(cfg_dict), "frozen_hash": frozen_hash}
    if out_dir is not None:
        path = Path(out_dir) / "covariance.pt"
        save_checkpoint(path, "covariance", model, cfg.steps, cfg_dict, extra={"frozen_hash": frozen_hash})
        summary["checkpoint"] = path.name
        summary["checkpoint_hash"] = file_hash(path)
    return summary


def evaluate_covariance(model, pairs, cfg: CovarianceTrainConfig, seed: int = 0) -> dict:
    """Validation NLL of the head vs a constant identity predictor, plus mean predicted trace."""
    from .models import to_tensor
    from .training import substream

    rng = substream(seed, "covariance.validation_noise")
    nll, nll_id, traces, n = 0.0, 0.0, [], 0
    model.eval()
    for pair in pairs:
        sample = _covariance_pairs(model, pair, cfg, rng)
        if sample is None:
            continue
        matches, xa, xb = sample
        batch = to_tensor(np.stack([pair.view_a.pixels, pair.view_b.pixels]))
        with torch.no_grad():
            sa, sb = predict_covariances(model, batch, [xa, xb])
            eye_a = torch.eye(2, dtype=torch.float64).expand(len(xa), 2, 2)
            eye_b = torch.eye(2, dtype=torch.float64).expand(len(xb), 2, 2)
            m = len(matches)
            nll += float(covariance_loss(matches, xa, xb, sa, sb, pair.h_a_to_b)) * m
            nll_id += float(covariance_loss(matches, xa, xb, eye_a, eye_b, pair.h_a_to_b)) * m
        traces.extend(torch.diagonal(sa[matches[:, 0]], dim1=-2, dim2=-1).sum(-1).tolist())
        traces.extend(torch.diagonal(sb[matches[:, 1]], dim1=-2, dim2=-1).sum(-1).tolist())
        n += m
    if n == 0:
        raise InsufficientDataError("no matches in the validation pairs")
    return {"nll": nll / n, "nll_identity": nll_id / n, "mean_trace": float(np.mean(traces)), "num_matches": n}
