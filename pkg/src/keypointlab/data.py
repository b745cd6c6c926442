"""Training-pair synthesis, photometric augmentation, image IO and HPatches ingestion."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import ParseError
from .geometry import Homography, HomographySamplerConfig, sample_homography

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp")
MIN_IMAGE_SIZE = 32
MIN_VALID_FRACTION = 0.25


@dataclass(eq=False)
class ImageBuffer:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = np.repeat(px[..., None], 3, axis=2)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {px.shape}")
        if px.shape[0] < MIN_IMAGE_SIZE or px.shape[1] < MIN_IMAGE_SIZE:
            raise ValueError(f"image must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixels must be finite and within [0, 1]")
        self.pixels = px

    @property
    def size(self) -> tuple[int, int]:
        """(W, H)"""
        return self.pixels.shape[1], self.pixels.shape[0]


@dataclass(eq=False)
class TrainingPair:
    view_a: ImageBuffer
    view_b: ImageBuffer
    h_a_to_b: Homography
    valid_mask_b: np.ndarray
    valid_mask_a: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.view_a.pixels.shape != self.view_b.pixels.shape:
            raise ValueError("views must share dimensions")
        if self.valid_mask_a is None:
            self.valid_mask_a = np.ones(self.view_a.pixels.shape[:2], dtype=bool)


@dataclass(frozen=True)
class PhotometricConfig:
    brightness_delta: float = 0.0
    contrast_range: tuple[float, float] = (1.0, 1.0)
    hue_delta: float = 0.0  # fraction of the hue circle
    gaussian_noise_sigma: float = 0.0  # on the [0, 255] intensity scale
    blur_probability: float = 0.0
    jpeg_like_quality_range: tuple[int, int] | None = None
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.contrast_range
        if self.brightness_delta < 0 or self.hue_delta < 0 or self.gaussian_noise_sigma < 0:
            raise ValueError("photometric magnitudes must be non-negative")
        if not 0 < lo <= hi:
            raise ValueError("contrast_range must satisfy 0 < min <= max")
        if not 0 <= self.blur_probability <= 1:
            raise ValueError("blur_probability must lie in [0, 1]")
        if self.jpeg_like_quality_range is not None:
            qlo, qhi = self.jpeg_like_quality_range
            if not 1 <= qlo <= qhi <= 100:
                raise ValueError("jpeg quality range must satisfy 1 <= min <= max <= 100")

    @classmethod
    def strong(cls, rng_seed: int = 0) -> "PhotometricConfig":
        return cls(0.2, (0.6, 1.4), 0.05, 6.0, 0.3, (40, 95), rng_seed)


@dataclass(frozen=True)
class PhotometricParams:
    brightness: float = 0.0
    contrast: float = 1.0
    hue_shift: float = 0.0
    noise_sigma: float = 0.0  # [0, 1] intensity units
    blur_sigma: float = 0.0
    jpeg_quality: int | None = None
    noise_seed: int = 0


def sample_photometric_params(cfg: PhotometricConfig, rng: np.random.Generator) -> PhotometricParams:
    blur = rng.uniform(0.5, 1.5) if rng.uniform() < cfg.blur_probability else 0.0
    quality = None
    if cfg.jpeg_like_quality_range is not None and cfg.jpeg_like_quality_range != (100, 100):
        quality = int(rng.integers(cfg.jpeg_like_quality_range[0], cfg.jpeg_like_quality_range[1] + 1))
    return PhotometricParams(
        brightness=float(rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)),
        contrast=float(rng.uniform(*cfg.contrast_range)),
        hue_shift=float(rng.uniform(-cfg.hue_delta, cfg.hue_delta)),
        noise_sigma=cfg.gaussian_noise_sigma / 255.0,
        blur_sigma=float(blur),
        jpeg_quality=quality,
        noise_seed=int(rng.integers(2**31)),
    )


def _shift_hue(px: np.ndarray, shift: float) -> np.ndarray:
    hsv = cv2.cvtColor(px, cv2.COLOR_RGB2HSV)  # float32: H in [0, 360)
    hsv[..., 0] = np.mod(hsv[..., 0] + 360.0 * shift, 360.0)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def apply_photometric_params(img: ImageBuffer, params: PhotometricParams) -> ImageBuffer:
    px = img.pixels.astype(np.float32, copy=True)
    if params.hue_shift:
        px = _shift_hue(px, params.hue_shift)
    if params.contrast != 1.0:
        px = (px - px.mean()) * params.contrast + px.mean()
    if params.brightness:
        px = px + params.brightness
    if params.blur_sigma > 0:
        px = cv2.GaussianBlur(px, (0, 0), params.blur_sigma)
    if params.jpeg_quality is not None:
        u8 = (np.clip(px, 0, 1) * 255.0 + 0.5).astype(np.uint8)
        ok, enc = cv2.imencode(".jpg", u8, [cv2.IMWRITE_JPEG_QUALITY, params.jpeg_quality])
        px = cv2.imdecode(enc, cv2.IMREAD_UNCHANGED).astype(np.float32) / 255.0
    if params.noise_sigma > 0:
        noise = np.random.default_rng(params.noise_seed).normal(0.0, params.noise_sigma, px.shape)
        px = px + noise.astype(np.float32)
    return ImageBuffer(np.clip(px, 0.0, 1.0), img.source_id)


def apply_photometric(
    img: ImageBuffer, cfg: PhotometricConfig, rng: np.random.Generator | None = None
) -> ImageBuffer:
    """Apply a randomly drawn photometric transform; the zero config is the identity."""
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    return apply_photometric_params(img, sample_photometric_params(cfg, rng))


def center_crop(img: ImageBuffer, crop_size: int) -> ImageBuffer:
    w, h = img.size
    if w < crop_size or h < crop_size:
        raise ValueError(f"image {img.source_id!r} ({w}x{h}) is smaller than crop size {crop_size}")
    x0 = (w - crop_size) // 2
    y0 = (h - crop_size) // 2
    return ImageBuffer(img.pixels[y0 : y0 + crop_size, x0 : x0 + crop_size], img.source_id)


def warp_image(pixels: np.ndarray, h: Homography, out_size) -> np.ndarray:
    """Bilinear warp with zero padding; ``h`` maps source pixels to output pixels."""
    return cv2.warpPerspective(
        pixels,
        np.asarray(h.matrix, dtype=np.float64),
        tuple(int(v) for v in out_size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )


def _pixel_grid(out_size) -> np.ndarray:
    w, h = out_size
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def coverage_mask(h_out_to_src: Homography, src_size, out_size, border: int = 1) -> np.ndarray:
    """Pixels of the output whose preimage lies inside the source (minus ``border`` px)."""
    grid = _pixel_grid(out_size)
    m = h_out_to_src.matrix
    w = grid @ m[2, :2] + m[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        src = (grid @ m[:2, :2].T + m[:2, 2]) / w[:, None]
    ok = (w > 1e-12) & np.all(np.isfinite(src), axis=1)
    ok &= (src[:, 0] >= border) & (src[:, 0] <= src_size[0] - 1 - border)
    ok &= (src[:, 1] >= border) & (src[:, 1] <= src_size[1] - 1 - border)
    return ok.reshape(out_size[1], out_size[0])


def make_training_pair(
    img: ImageBuffer,
    geo_cfg: HomographySamplerConfig,
    photo_cfg: PhotometricConfig,
    crop_size: int = 192,
    out_size: int = 160,
    rng: np.random.Generator | None = None,
    max_attempts: int = 50,
) -> TrainingPair:
    """Center-crop ``img``, warp it into two views and augment each independently.

    Without an explicit generator the geometry draws come from
    ``geo_cfg.rng_seed`` and the photometric draws from ``photo_cfg.rng_seed``.
    """
    crop = center_crop(img, crop_size)
    if rng is None:
        geo_rng = np.random.default_rng(geo_cfg.rng_seed)
        photo_rng = np.random.default_rng(photo_cfg.rng_seed)
    else:
        geo_rng = photo_rng = rng
    csize = (crop_size, crop_size)
    osize = (out_size, out_size)
    resize = Homography.resize(csize, osize)

    for _ in range(max_attempts):
        h_a = resize @ sample_homography(geo_cfg, csize, rng=geo_rng)
        h_b = resize @ sample_homography(geo_cfg, csize, rng=geo_rng)
        h_ab = h_b @ h_a.inverse()
        in_crop_a = coverage_mask(h_a.inverse(), csize, osize, border=0)
        in_crop_b = coverage_mask(h_b.inverse(), csize, osize, border=0)
        mask_b = in_crop_b & coverage_mask(h_ab.inverse(), osize, osize)
        mask_a = in_crop_a & coverage_mask(h_ab, osize, osize)
        # drop the one-pixel rim where bilinear sampling mixes in padding
        mask_a = cv2.erode(mask_a.astype(np.uint8), np.ones((3, 3), np.uint8)).astype(bool)
        mask_b = cv2.erode(mask_b.astype(np.uint8), np.ones((3, 3), np.uint8)).astype(bool)
        if mask_b.mean() > MIN_VALID_FRACTION and mask_a.mean() > MIN_VALID_FRACTION:
            break
    else:
        raise RuntimeError(f"could not sample a pair with >{MIN_VALID_FRACTION:.0%} overlap")

    view_a = ImageBuffer(np.clip(warp_image(crop.pixels, h_a, osize), 0, 1), img.source_id)
    view_b = ImageBuffer(np.clip(warp_image(crop.pixels, h_b, osize), 0, 1), img.source_id)
    view_a = apply_photometric(view_a, photo_cfg, rng=photo_rng)
    view_b = apply_photometric(view_b, photo_cfg, rng=photo_rng)
    return TrainingPair(view_a, view_b, h_ab, mask_b, mask_a)


# --------------------------------------------------------------------------- IO


def load_image(path) -> ImageBuffer:
    path = Path(path)
    with Image.open(path) as im:
        px = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return ImageBuffer(px, path.stem)


def save_image(img: ImageBuffer, path) -> None:
    u8 = (np.clip(img.pixels, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(u8).save(path)


def resize_image(img: ImageBuffer, out_size) -> ImageBuffer:
    px = cv2.resize(img.pixels, tuple(int(v) for v in out_size), interpolation=cv2.INTER_AREA)
    return ImageBuffer(np.clip(px, 0, 1), img.source_id)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_folder(directory) -> list[ImageBuffer]:
    return [load_image(p) for p in list_images(directory)]


def load_manifest(path) -> list[ImageBuffer]:
    """Line-delimited JSON ``{"source_id": ..., "path": ...}``; relative paths resolve against the manifest."""
    path = Path(path)
    images = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            img_path = Path(rec["path"])
            source_id = rec["source_id"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"line {lineno}: {exc}", path) from None
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        img = load_image(img_path)
        images.append(ImageBuffer(img.pixels, source_id))
    return images


def write_manifest(images: list[tuple[str, Path]], path) -> None:
    with open(path, "w") as fh:
        for source_id, p in images:
            fh.write(json.dumps({"source_id": source_id, "path": str(p)}) + "\n")


def load_hpatches_sequence(dir_path, resize_shorter: int | None = None) -> list[tuple[ImageBuffer, Homography]]:
    """Load ``1.*`` .. ``6.*`` plus ``H_1_k``; the first entry is the reference with the identity.

    When ``resize_shorter`` is given each image is resized so its shorter side
    has that length and every homography is conjugated accordingly.
    """
    dir_path = Path(dir_path)
    by_index = {}
    for p in list_images(dir_path):
        if re.fullmatch(r"\d+", p.stem):
            by_index[int(p.stem)] = p
    if 1 not in by_index:
        raise ParseError("reference image 1.* not found", dir_path)

    def _load(p):
        img = load_image(p)
        if resize_shorter is None:
            return img, Homography.identity()
        w, h = img.size
        s = resize_shorter / min(w, h)
        new = (int(round(w * s)), int(round(h * s)))
        return resize_image(img, new), Homography.resize((w, h), new)

    ref, s_ref = _load(by_index[1])
    out = [(ref, Homography.identity())]
    for k in sorted(i for i in by_index if i != 1):
        h_path = dir_path / f"H_1_{k}"
        if not h_path.exists():
            raise ParseError("missing homography file", h_path)
        h_1k = Homography.load(h_path)
        img, s_k = _load(by_index[k])
        out.append((img, s_k @ h_1k @ s_ref.inverse()))
    return out


# ------------------------------------------------------------------ toy corpus


def _draw_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Man-made-looking clutter: mostly axis-aligned rectangles, grids and bars."""
    base = rng.uniform(0.2, 0.8, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    gx, gy = rng.uniform(-0.3, 0.3, size=2)
    img = np.clip(base[None, None, :] + (gx * xx + gy * yy)[..., None], 0, 1).astype(np.float32)
    img = np.ascontiguousarray(img)

    for _ in range(int(rng.integers(14, 22))):
        color = tuple(float(c) for c in rng.uniform(0, 1, size=3))
        kind = rng.choice(["rect", "rect", "rect", "grid", "bar", "circle", "window"])
        x0, y0 = (int(v) for v in rng.integers(0, size - 16, size=2))
        w, h = (int(v) for v in rng.integers(12, size // 3, size=2))
        x1, y1 = min(size - 1, x0 + w), min(size - 1, y0 + h)
        if kind == "rect":
            cv2.rectangle(img, (x0, y0), (x1, y1), color, -1)
        elif kind == "window":
            cv2.rectangle(img, (x0, y0), (x1, y1), color, -1)
            inner = tuple(float(c) for c in rng.uniform(0, 1, size=3))
            cv2.rectangle(img, (x0 + 3, y0 + 3), (x1 - 3, y1 - 3), inner, -1)
        elif kind == "grid":
            cell = int(rng.integers(6, 14))
            other = tuple(float(c) for c in rng.uniform(0, 1, size=3))
            for gy_ in range(y0, y1, cell):
                for gx_ in range(x0, x1, cell):
                    c = color if ((gx_ - x0) // cell + (gy_ - y0) // cell) % 2 == 0 else other
                    cv2.rectangle(img, (gx_, gy_), (min(x1, gx_ + cell - 1), min(y1, gy_ + cell - 1)), c, -1)
        elif kind == "bar":
            if rng.uniform() < 0.5:
                cv2.rectangle(img, (x0, y0), (x1, y0 + int(rng.integers(2, 6))), color, -1)
            else:
                cv2.rectangle(img, (x0, y0), (x0 + int(rng.integers(2, 6)), y1), color, -1)
        else:
            r = int(rng.integers(4, 16))
            cv2.circle(img, (x0 + r, y0 + r), r, color, -1)
    texture = rng.normal(0, 0.02, size=img.shape).astype(np.float32)
    img = cv2.GaussianBlur(img + texture, (0, 0), 0.7)
    return np.clip(img, 0, 1)


def make_toy_corpus(num_images: int = 20, size: int = 256, seed: int = 0) -> list[ImageBuffer]:
    """Deterministic procedural corpus used for desk-scale training and tests."""
    images = []
    for i in range(num_images):
        rng = np.random.default_rng([seed, i])
        images.append(ImageBuffer(_draw_scene(rng, size), f"toy_{i:03d}"))
    return images


def split_corpus(images: list[ImageBuffer], num_val: int) -> tuple[list[ImageBuffer], list[ImageBuffer]]:
    """Deterministic split: the last ``num_val`` images are held out."""
    if not 0 < num_val < len(images):
        raise ValueError("num_val must leave both splits non-empty")
    return images[:-num_val], images[-num_val:]
