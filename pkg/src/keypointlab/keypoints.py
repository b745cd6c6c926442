"""Keypoint containers, dump format and bilinear map lookup."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(eq=False)
class KeypointSet:
    """Per-view keypoints.

    ``coords`` are subpixel ``(x, y)`` positions; ``pixels`` are the integer
    grid positions they were selected at (used for probability lookup).
    """

    coords: np.ndarray
    probs: np.ndarray
    pixels: np.ndarray | None = None
    ranks: np.ndarray | None = None
    covs: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if self.pixels is None:
            self.pixels = np.rint(self.coords).astype(np.int64)
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        n = len(self.coords)
        if len(self.probs) != n or len(self.pixels) != n:
            raise ValueError("coords, probs and pixels must have equal length")
        if self.ranks is not None:
            self.ranks = np.asarray(self.ranks, dtype=np.float64).reshape(-1)
            if len(self.ranks) != n:
                raise ValueError("ranks length mismatch")
        if self.covs is not None:
            self.covs = np.asarray(self.covs, dtype=np.float64).reshape(-1, 2, 2)
            if len(self.covs) != n:
                raise ValueError("covs length mismatch")

    def __len__(self) -> int:
        return len(self.coords)

    def subset(self, idx) -> "KeypointSet":
        idx = np.asarray(idx, dtype=np.int64)
        return KeypointSet(
            self.coords[idx],
            self.probs[idx],
            self.pixels[idx],
            None if self.ranks is None else self.ranks[idx],
            None if self.covs is None else self.covs[idx],
        )

    @classmethod
    def empty(cls) -> "KeypointSet":
        return cls(np.zeros((0, 2)), np.zeros(0))

    def to_records(self) -> list[dict]:
        out = []
        for i in range(len(self)):
            rec = {"x": float(self.coords[i, 0]), "y": float(self.coords[i, 1]), "prob": float(self.probs[i])}
            if self.ranks is not None:
                rec["rank_score"] = float(self.ranks[i])
            if self.covs is not None:
                c = self.covs[i]
                rec["cov"] = [float(c[0, 0]), float(c[0, 1]), float(c[1, 1])]
            out.append(rec)
        return out

    @classmethod
    def from_records(cls, records: list[dict]) -> "KeypointSet":
        if not records:
            return cls.empty()
        coords = [[r["x"], r["y"]] for r in records]
        probs = [r["prob"] for r in records]
        ranks = [r["rank_score"] for r in records] if all("rank_score" in r for r in records) else None
        covs = None
        if all("cov" in r for r in records):
            covs = [[[r["cov"][0], r["cov"][1]], [r["cov"][1], r["cov"][2]]] for r in records]
        return cls(np.array(coords), np.array(probs), ranks=ranks, covs=covs)


def write_keypoints(kps: KeypointSet, path) -> None:
    with open(path, "w") as fh:
        for rec in kps.to_records():
            fh.write(json.dumps(rec) + "\n")


def read_keypoints(path) -> KeypointSet:
    lines = Path(path).read_text().splitlines()
    return KeypointSet.from_records([json.loads(line) for line in lines if line.strip()])


def sample_map(maps: torch.Tensor, coords) -> torch.Tensor:
    """Bilinearly sample ``(C, H, W)`` maps at ``(N, 2)`` pixel coordinates -> ``(N, C)``.

    Coordinates use the pixel-center convention, so integer positions return
    the stored values exactly. Differentiable w.r.t. ``maps``.
    """
    c, h, w = maps.shape
    xy = torch.as_tensor(np.asarray(coords), dtype=maps.dtype, device=maps.device).reshape(-1, 2)
    if len(xy) == 0:
        return maps.new_zeros((0, c))
    gx = 2.0 * xy[:, 0] / max(w - 1, 1) - 1.0
    gy = 2.0 * xy[:, 1] / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1).view(1, 1, -1, 2)
    out = F.grid_sample(maps[None], grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[0, :, 0, :].T
