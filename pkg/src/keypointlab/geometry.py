"""Planar homographies: application, Jacobians, sampling, DLT and corner error.

Points are ``(x, y)`` pixel coordinates with the pixel-center convention, so an
image of width ``W`` spans ``[0, W - 1]`` horizontally.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    DegeneratePointError,
    InsufficientDataError,
    ParseError,
)

_W_EPS = 1e-12
_H33_EPS = 1e-6
_DET_EPS = 1e-12


def _normalize_matrix(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("homography has non-finite entries")
    if abs(m[2, 2]) > _H33_EPS:
        return m / m[2, 2]
    norm = np.linalg.norm(m)
    if norm == 0:
        raise DegenerateConfigurationError("zero homography")
    return m / norm


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map. ``a @ b`` applies ``b`` first, then ``a``."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        m = _normalize_matrix(self.matrix)
        if abs(np.linalg.det(m)) <= _DET_EPS:
            raise DegenerateConfigurationError("homography is not invertible")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> "Homography":
        sy = sx if sy is None else sy
        return cls(np.diag([sx, sy, 1.0]))

    @classmethod
    def resize(cls, src_size, dst_size) -> "Homography":
        """Pixel-center resize map from an image of ``src_size`` (W, H) to ``dst_size``."""
        sx = dst_size[0] / src_size[0]
        sy = dst_size[1] / src_size[1]
        return cls(np.array([[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)

    def __call__(self, pts) -> np.ndarray:
        return apply_homography(self, pts)

    def is_affine(self) -> bool:
        return bool(np.allclose(self.matrix[2, :2], 0.0, atol=0.0))

    def to_text(self) -> str:
        return "\n".join(" ".join(repr(float(v)) for v in row) for row in self.matrix) + "\n"

    @classmethod
    def from_text(cls, text: str, path=None) -> "Homography":
        rows = [line.split() for line in text.strip().splitlines() if line.strip()]
        if len(rows) != 3 or any(len(r) != 3 for r in rows):
            raise ParseError("expected 3 lines of 3 numbers", path)
        try:
            m = np.array([[float(v) for v in r] for r in rows])
        except ValueError as exc:
            raise ParseError(f"non-numeric entry ({exc})", path) from None
        try:
            return cls(m)
        except (ValueError, DegenerateConfigurationError) as exc:
            raise ParseError(str(exc), path) from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Homography":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ParseError(f"cannot read homography file ({exc})", path) from None
        return cls.from_text(text, path)


def _as_points(pts) -> tuple[np.ndarray, bool]:
    arr = np.asarray(pts, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 2:
        raise ValueError(f"points must have shape (N, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("points must be finite")
    return arr, single


def apply_homography(h: Homography, pts) -> np.ndarray:
    """Map ``(N, 2)`` points (or a single point) through ``h``."""
    arr, single = _as_points(pts)
    m = h.matrix
    w = arr @ m[2, :2] + m[2, 2]
    bad = np.flatnonzero(np.abs(w) < _W_EPS)
    if bad.size:
        raise DegeneratePointError(f"point {int(bad[0])} maps to the line at infinity", int(bad[0]))
    out = (arr @ m[:2, :2].T + m[:2, 2]) / w[:, None]
    return out[0] if single else out


def homography_jacobian(h: Homography, pt) -> np.ndarray:
    """Analytic 2x2 derivative of ``apply_homography(h, .)`` at ``pt``.

    Accepts a single point or an ``(N, 2)`` array, returning ``(2, 2)`` or
    ``(N, 2, 2)`` respectively.
    """
    arr, single = _as_points(pt)
    m = h.matrix
    w = arr @ m[2, :2] + m[2, 2]
    bad = np.flatnonzero(np.abs(w) < _W_EPS)
    if bad.size:
        raise DegeneratePointError(f"point {int(bad[0])} has a degenerate denominator", int(bad[0]))
    num = arr @ m[:2, :2].T + m[:2, 2]
    # d(u/w)/dx = (du/dx * w - u * dw/dx) / w^2
    jac = (m[None, :2, :2] * w[:, None, None] - num[:, :, None] * m[None, 2, :2][:, None, :]) / (
        w[:, None, None] ** 2
    )
    return jac[0] if single else jac


@dataclass(frozen=True)
class HomographySamplerConfig:
    max_rotation_deg: float = 180.0
    max_perspective: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.25)
    max_translation_frac: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not lo > 0 or hi < lo:
            raise ValueError(f"scale_range must satisfy 0 < min <= max, got {self.scale_range}")
        if not 0 <= self.max_rotation_deg <= 180:
            raise ValueError("max_rotation_deg must lie in [0, 180]")
        # beyond these the composed map can fold corners through infinity
        if not 0 <= self.max_perspective <= 0.5:
            raise ValueError("max_perspective must lie in [0, 0.5]")
        if not 0 <= self.max_translation_frac <= 1:
            raise ValueError("max_translation_frac must lie in [0, 1]")

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "HomographySamplerConfig":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, rng_seed)


def _about_center(m: np.ndarray, center) -> np.ndarray:
    cx, cy = center
    t = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
    ti = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    return t @ m @ ti


def rotation_about_center(angle_deg: float, image_size) -> Homography:
    c, s = np.cos(np.deg2rad(angle_deg)), np.sin(np.deg2rad(angle_deg))
    center = ((image_size[0] - 1) / 2.0, (image_size[1] - 1) / 2.0)
    return Homography(_about_center(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]), center))


def sample_homography(
    cfg: HomographySamplerConfig, image_size, rng: np.random.Generator | None = None
) -> Homography:
    """Draw ``translation @ perspective @ scale @ rotation``, each about the image center.

    Uses ``np.random.default_rng(cfg.rng_seed)`` unless an explicit generator
    is passed (training loops pass one generator for many draws).
    """
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError("image_size must be positive")
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    center = ((w - 1) / 2.0, (h - 1) / 2.0)

    angle = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])

    sc = rng.uniform(*cfg.scale_range)
    scale = np.diag([sc, sc, 1.0])

    # a corner at half-size distance sees its w perturbed by up to max_perspective
    px, py = rng.uniform(-cfg.max_perspective, cfg.max_perspective, size=2)
    persp = np.eye(3)
    persp[2, 0] = px / max(center[0], 1.0)
    persp[2, 1] = py / max(center[1], 1.0)

    tx, ty = rng.uniform(-cfg.max_translation_frac, cfg.max_translation_frac, size=2)
    trans = np.array([[1.0, 0, tx * w], [0, 1.0, ty * h], [0, 0, 1.0]])

    m = trans @ _about_center(persp @ scale @ rot, center)
    return Homography(m)


def _hartley(pts: np.ndarray) -> np.ndarray:
    mean = pts.mean(axis=0)
    dist = np.linalg.norm(pts - mean, axis=1).mean()
    if dist < 1e-12:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2.0) / dist
    return np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])


def estimate_homography_dlt(src, dst) -> Homography:
    """Least-squares algebraic homography ``src -> dst`` with Hartley conditioning."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same shape")
    if len(src) < 4:
        raise InsufficientDataError(f"need at least 4 correspondences, got {len(src)}")
    ts, td = _hartley(src), _hartley(dst)
    ps = src @ ts[:2, :2].T + ts[:2, 2]
    pd = dst @ td[:2, :2].T + td[:2, 2]

    n = len(ps)
    a = np.zeros((2 * n, 9))
    x, y = ps[:, 0], ps[:, 1]
    u, v = pd[:, 0], pd[:, 1]
    a[0::2, 0:3] = np.stack([x, y, np.ones(n)], axis=1)
    a[0::2, 6:9] = -u[:, None] * np.stack([x, y, np.ones(n)], axis=1)
    a[1::2, 3:6] = np.stack([x, y, np.ones(n)], axis=1)
    a[1::2, 6:9] = -v[:, None] * np.stack([x, y, np.ones(n)], axis=1)

    _, sv, vt = np.linalg.svd(a)
    if len(sv) < 8 or sv[7] < 1e-10 * sv[0]:
        raise DegenerateConfigurationError("design matrix is rank deficient (collinear points?)")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    try:
        return Homography(m)
    except DegenerateConfigurationError as exc:
        raise DegenerateConfigurationError(f"estimated homography is singular: {exc}") from None


def image_corners(image_size) -> np.ndarray:
    w, h = image_size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])


def corner_error(h_est: Homography, h_gt: Homography, image_size) -> float:
    corners = image_corners(image_size)
    return float(np.linalg.norm(h_est(corners) - h_gt(corners), axis=1).mean())
