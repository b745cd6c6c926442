"""Declarative experiment configuration (YAML + strict schema) and its mapping onto trainer configs."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .data import PhotometricConfig
from .geometry import HomographySamplerConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    # image folder or JSONL manifest; None generates the procedural toy corpus
    corpus: Optional[str] = None
    toy_num_images: int = Field(20, ge=2)
    toy_size: int = Field(256, ge=64)
    num_val: int = Field(4, ge=1)


class AugmentSection(_Strict):
    max_rotation_deg: float = Field(180.0, ge=0, le=180)
    max_perspective: float = Field(0.1, ge=0)
    scale_range: tuple[float, float] = (0.8, 1.25)
    max_translation_frac: float = Field(0.1, ge=0)
    photometric: Literal["strong", "none"] = "strong"

    def geometry(self, seed: int) -> HomographySamplerConfig:
        return HomographySamplerConfig(
            max_rotation_deg=self.max_rotation_deg,
            max_perspective=self.max_perspective,
            scale_range=tuple(self.scale_range),
            max_translation_frac=self.max_translation_frac,
            rng_seed=seed,
        )

    def photometric_config(self, seed: int) -> PhotometricConfig:
        if self.photometric == "none":
            return PhotometricConfig(rng_seed=seed)
        return PhotometricConfig.strong(rng_seed=seed)


class DetectorSection(_Strict):
    steps: int = Field(200, ge=1)
    batch_size: int = Field(1, ge=1)
    lr: float = Field(2e-4, gt=0)
    lr_min: float = Field(1e-6, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    num_keypoints: int = Field(128, ge=1)
    nms_radius: int = Field(3, ge=1)
    crop_size: int = Field(192, ge=32)
    out_size: int = Field(160, ge=32)
    d_max: float = Field(1.2, gt=0)
    rho_pos: float = Field(1.0, gt=0)
    stochastic_sampling: bool = False
    val_every: int = Field(50, ge=0)
    num_val_pairs: int = Field(8, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    head_dim: int = Field(32, ge=1)
    cov_shared: bool = True
    augment: AugmentSection = AugmentSection()


class RankerSection(_Strict):
    steps: int = Field(300, ge=1)
    lr: float = Field(2e-4, gt=0)
    lr_min: float = Field(1e-6, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    num_keypoints: int = Field(128, ge=1)
    match_radius: float = Field(3.0, gt=0)
    soft_rank_strength: float = Field(1.0, gt=0)
    lambda_ranker: float = Field(1.0, ge=0)
    width: int = Field(24, ge=4)
    num_blocks: int = Field(4, ge=1)
    augment: AugmentSection = AugmentSection()


class CovarianceSection(_Strict):
    steps: int = Field(200, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_min: float = Field(1e-6, ge=0)
    num_keypoints: int = Field(128, ge=1)
    match_radius: float = Field(3.0, gt=0)
    injected_noise: Optional[list[list[float]]] = None
    exact_correspondences: bool = False
    augment: AugmentSection = AugmentSection()

    @field_validator("injected_noise")
    @classmethod
    def _two_by_two(cls, v):
        if v is not None and (len(v) != 2 or any(len(r) != 2 for r in v)):
            raise ValueError("injected_noise must be a 2x2 matrix")
        return v


class EvalSection(_Strict):
    num_pairs: int = Field(16, ge=1)
    k: int = Field(128, ge=1)
    nms_radius: int = Field(3, ge=1)
    thresholds: list[float] = [1.0, 2.0, 3.0]
    auc_thresholds: list[float] = [1.0, 3.0]
    rotation_step_deg: float = Field(10.0, gt=0)
    rotation_noise_sigma: float = Field(10.0, ge=0)
    rotation_k: int = Field(200, ge=1)
    rotation_out_size: int = Field(256, ge=32)
    budget_fractions: list[float] = [0.125, 0.25, 0.5, 1.0]
    calibration_bins: int = Field(20, ge=2)
    hpatches_dir: Optional[str] = None


class TriangulateSection(_Strict):
    num_cams: int = Field(8, ge=2)
    num_points: int = Field(200, ge=1)
    num_seeds: int = Field(20, ge=1)
    noise: Literal["heteroscedastic", "isotropic"] = "heteroscedastic"
    sigma_px: float = Field(1.0, ge=0)
    fractions: list[float] = [0.25, 0.5, 0.75, 1.0]
    taus: list[float] = [0.005, 0.01, 0.02]
    calibration_points: int = Field(3000, ge=20)
    calibration_bins: int = Field(20, ge=2)


class ExperimentConfig(_Strict):
    seed: int = 0
    output_dir: str = "runs"
    data: DataSection = DataSection()
    detector: DetectorSection = DetectorSection()
    ranker: RankerSection = RankerSection()
    covariance: CovarianceSection = CovarianceSection()
    eval: EvalSection = EvalSection()
    triangulate: TriangulateSection = TriangulateSection()

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        if not isinstance(cur.get(k, {}), dict):
            raise ValueError(f"{dotted}: {k} is not a section")
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read YAML (or defaults when ``path`` is None) and apply ``key.sub=value`` overrides."""
    raw: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        raw = loaded or {}
    for item in overrides or []:
        key, value = parse_override(item)
        _set_path(raw, key, value)
    return ExperimentConfig.model_validate(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.resolved(), sort_keys=True)
