"""Network definitions: multi-scale detector (+ covariance head) and the standalone ranker."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .covariance import CovarianceHead

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def normalize_image(x: torch.Tensor) -> torch.Tensor:
    mean = x.new_tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (x - mean) / std


def to_tensor(pixels, device="cpu") -> torch.Tensor:
    """``H x W x 3`` (or a batch of them) in [0, 1] -> ``B x 3 x H x W`` float32."""
    t = torch.as_tensor(pixels, dtype=torch.float32, device=device)
    if t.ndim == 3:
        t = t[None]
    return t.permute(0, 3, 1, 2).contiguous()


def _block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.SELU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.SELU(),
    )


class DetectorModel(nn.Module):
    """Four-level strided encoder, bilinear upsampling + concatenation, score and Cholesky heads."""

    def __init__(self, widths=(16, 32, 64, 64), head_dim: int = 32, cov_hidden: int = 32, cov_shared: bool = True):
        super().__init__()
        self.hparams = dict(widths=list(widths), head_dim=head_dim, cov_hidden=cov_hidden, cov_shared=cov_shared)
        w1, w2, w3, w4 = widths
        self.block1 = _block(3, w1, 1)
        self.block2 = _block(w1, w2, 2)
        self.block3 = _block(w2, w3, 2)
        self.block4 = _block(w3, w4, 2)
        feat_dim = sum(widths)
        self.score_head = nn.Sequential(
            nn.Conv2d(feat_dim, head_dim, 1),
            nn.SELU(),
            nn.Conv2d(head_dim, head_dim, 3, padding=1),
            nn.SELU(),
            nn.Conv2d(head_dim, 1, 3, padding=1),
        )
        self.cov_shared = cov_shared
        if cov_shared:
            self.cov_head = CovarianceHead(feat_dim, cov_hidden)
        else:
            self.cov_stem = _block(3, w1, 1)
            self.cov_head = CovarianceHead(w1, cov_hidden)

    def features(self, image: torch.Tensor) -> torch.Tensor:
        x = normalize_image(image)
        f1 = self.block1(x)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        f4 = self.block4(f3)
        size = f1.shape[-2:]
        up = [F.interpolate(f, size=size, mode="bilinear", align_corners=False) for f in (f2, f3, f4)]
        return torch.cat([f1, *up], dim=1)

    def score_map(self, image: torch.Tensor) -> torch.Tensor:
        return self.score_head(self.features(image))[:, 0]

    def cholesky_map(self, image: torch.Tensor, feats: torch.Tensor | None = None) -> torch.Tensor:
        if self.cov_shared:
            feats = self.features(image) if feats is None else feats
            return self.cov_head(feats)
        return self.cov_head(self.cov_stem(normalize_image(image)))

    def forward(self, image: torch.Tensor) -> dict:
        feats = self.features(image)
        return {"scores": self.score_head(feats)[:, 0], "cholesky": self.cholesky_map(image, feats)}

    def detector_parameters(self):
        """Encoder + score head (trained in stage one)."""
        for name, p in self.named_parameters():
            if not name.startswith(("cov_head", "cov_stem")):
                yield p

    def covariance_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith(("cov_head", "cov_stem")):
                yield p


class _Residual(nn.Module):
    def __init__(self, ch, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=dilation, dilation=dilation)
        self.norm1 = nn.GroupNorm(4, ch)
        self.norm2 = nn.GroupNorm(4, ch)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class RankerModel(nn.Module):
    """Residual blocks on the normalized image producing a one-channel ranker map.

    The middle blocks run at quarter resolution with growing dilation so the
    score can depend on image context beyond the local patch.
    """

    def __init__(self, width: int = 24, num_blocks: int = 4):
        super().__init__()
        self.hparams = dict(width=width, num_blocks=num_blocks)
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, padding=1), nn.ReLU())
        self.down = nn.Sequential(
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.blocks = nn.Sequential(*[_Residual(width, dilation=2**i) for i in range(num_blocks)])
        self.fuse = _Residual(width)
        self.head = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = self.stem(normalize_image(image))
        y = self.blocks(self.down(x))
        y = F.interpolate(y, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return self.head(self.fuse(x + y))[:, 0]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
