"""Two-view matching metrics, homography AUC, rotation sweep, budget curves and calibration."""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import cv2
import numpy as np

from .errors import DegenerateConfigurationError, InsufficientDataError, UndefinedMetricError
from .geometry import Homography, apply_homography, corner_error, estimate_homography_dlt
from .keypoints import KeypointSet

log = logging.getLogger(__name__)

PointMap = Callable[[np.ndarray], np.ndarray]


def _maps(correspondence) -> tuple[PointMap, PointMap]:
    """Forward (A->B) and backward (B->A) point maps from a homography or a pair of callables."""
    if isinstance(correspondence, Homography):
        inv = correspondence.inverse()
        return (lambda p: apply_homography(correspondence, p)), (lambda p: apply_homography(inv, p))
    fwd, bwd = correspondence
    return fwd, bwd


def _coords(kps) -> np.ndarray:
    return np.asarray(getattr(kps, "coords", kps), dtype=np.float64).reshape(-1, 2)


def _project(fn: PointMap, pts: np.ndarray) -> np.ndarray:
    if len(pts) == 0:
        return pts.copy()
    return np.asarray(fn(pts), dtype=np.float64).reshape(-1, 2)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


@dataclass
class MatchSet:
    pairs: np.ndarray  # (M, 2) int: (index_a, index_b)
    errors_ab: np.ndarray  # |H(x_a) - x_b| in view B
    errors_ba: np.ndarray  # |H^-1(x_b) - x_a| in view A
    radius: float

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def reproj_errors(self) -> np.ndarray:
        return 0.5 * (self.errors_ab + self.errors_ba)

    def swapped(self) -> "MatchSet":
        return MatchSet(self.pairs[:, ::-1].copy(), self.errors_ba, self.errors_ab, self.radius)


def mutual_matches(kps_a, kps_b, correspondence, radius: float) -> MatchSet:
    """Mutual nearest neighbours under the ground-truth correspondence, both distances <= ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    xa, xb = _coords(kps_a), _coords(kps_b)
    empty = MatchSet(np.zeros((0, 2), np.int64), np.zeros(0), np.zeros(0), radius)
    if len(xa) == 0 or len(xb) == 0:
        return empty
    fwd, bwd = _maps(correspondence)
    d_ab = _pairwise(_project(fwd, xa), xb)  # rows: a, cols: b (measured in B)
    d_ba = _pairwise(_project(bwd, xb), xa)  # rows: b, cols: a (measured in A)
    nn_ab = d_ab.argmin(axis=1)
    nn_ba = d_ba.argmin(axis=1)
    ia = np.arange(len(xa))
    mutual = nn_ba[nn_ab] == ia
    e_ab = d_ab[ia, nn_ab]
    e_ba = d_ba[nn_ab, ia]
    keep = mutual & (e_ab <= radius) & (e_ba <= radius)
    pairs = np.stack([ia[keep], nn_ab[keep]], axis=1).astype(np.int64)
    return MatchSet(pairs, e_ab[keep], e_ba[keep], radius)


def _covisible(proj: np.ndarray, mask: np.ndarray | None, size) -> np.ndarray:
    if mask is None and size is None:
        return np.ones(len(proj), dtype=bool)
    if mask is not None:
        h, w = mask.shape
    else:
        w, h = size
    r = np.rint(proj).astype(np.int64)
    inside = (r[:, 0] >= 0) & (r[:, 0] < w) & (r[:, 1] >= 0) & (r[:, 1] < h)
    inside &= (proj[:, 0] >= -0.5) & (proj[:, 0] <= w - 0.5) & (proj[:, 1] >= -0.5) & (proj[:, 1] <= h - 0.5)
    if mask is None:
        return inside
    out = np.zeros(len(proj), dtype=bool)
    out[inside] = mask[r[inside, 1], r[inside, 0]]
    return out


def repeatability(
    kps_a,
    kps_b,
    correspondence,
    thresholds,
    mask_a: np.ndarray | None = None,
    mask_b: np.ndarray | None = None,
    size_a=None,
    size_b=None,
) -> dict[float, float | None]:
    """Mean over both views of the fraction of covisible keypoints re-detected within each threshold.

    ``mask_b`` (or ``size_b``) decides which A keypoints are covisible in B, and
    vice versa. Thresholds with no covisible keypoint in either view map to ``None``.
    """
    thresholds = [float(t) for t in thresholds]
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    xa, xb = _coords(kps_a), _coords(kps_b)
    fwd, bwd = _maps(correspondence)
    pa, pb = _project(fwd, xa), _project(bwd, xb)
    cov_a = _covisible(pa, mask_b, size_b)
    cov_b = _covisible(pb, mask_a, size_a)

    def nearest(p, others):
        if len(p) == 0:
            return np.zeros(0)
        if len(others) == 0:
            return np.full(len(p), np.inf)
        return _pairwise(p, others).min(axis=1)

    da = nearest(pa[cov_a], xb)
    db = nearest(pb[cov_b], xa)
    out: dict[float, float | None] = {}
    for t in thresholds:
        fracs = [float((d <= t).mean()) for d in (da, db) if len(d)]
        out[t] = float(np.mean(fracs)) if fracs else None
    if not len(da) and not len(db):
        warnings.warn("no covisible keypoints; repeatability undefined", RuntimeWarning, stacklevel=2)
    return out


def localization_error(match_set: MatchSet) -> float:
    if len(match_set) == 0:
        raise UndefinedMetricError("localization error is undefined without matches")
    return float(match_set.reproj_errors.mean())


def homography_auc(corner_errors, thresholds) -> dict[float, float]:
    """Normalized area under the recall-vs-error step curve up to each threshold.

    Integrating the empirical CDF exactly gives ``mean(max(0, t - e_i)) / t``.
    """
    errs = np.asarray(corner_errors, dtype=np.float64).reshape(-1)
    if errs.size == 0:
        raise UndefinedMetricError("AUC is undefined for an empty error list")
    if np.any(errs < 0) or not np.all(np.isfinite(errs) | np.isposinf(errs)):
        raise ValueError("corner errors must be non-negative")
    return {float(t): float(np.maximum(0.0, t - errs).mean() / t) for t in thresholds}


def random_keypoints(mask: np.ndarray, k: int, rng: np.random.Generator) -> KeypointSet:
    """Uniformly random subpixel keypoints inside a boolean mask (the chance baseline)."""
    ys, xs = np.nonzero(mask)
    idx = rng.choice(len(xs), size=min(k, len(xs)), replace=False)
    coords = np.stack([xs[idx], ys[idx]], axis=1).astype(np.float64)
    coords += rng.uniform(-0.5, 0.5, size=coords.shape)
    return KeypointSet(coords, np.full(len(coords), 1.0 / max(len(xs), 1)))


def rank_order_truncate(kps: KeypointSet, scores, n: int) -> KeypointSet:
    """Keep the ``n`` highest-scoring keypoints, sorted descending with a stable index tie-break."""
    if n < 1:
        raise ValueError("budget must be >= 1")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(kps):
        raise ValueError("one score per keypoint required")
    order = np.argsort(-scores, kind="stable")[:n]
    return kps.subset(order)


# ----------------------------------------------------------------- reports


@dataclass
class MetricReport:
    num_matches: float
    repeatability: dict = field(default_factory=dict)
    localization_error: float | None = None
    auc: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in list(self.repeatability.values()) + list(self.auc.values()):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError("fractions must lie in [0, 1]")
        if self.localization_error is not None and self.localization_error < 0:
            raise ValueError("localization error must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["repeatability"] = {str(k): v for k, v in self.repeatability.items()}
        d["auc"] = {str(k): v for k, v in self.auc.items()}
        return d


@dataclass
class PairResult:
    num_matches: int
    repeatability: dict
    localization_error: float | None
    corner_error: float


def evaluate_pair(
    kps_a,
    kps_b,
    h_ab: Homography,
    image_size,
    thresholds=(1.0, 2.0, 3.0),
    match_radius: float = 3.0,
    mask_a=None,
    mask_b=None,
    size_b=None,
) -> PairResult:
    """Matches, repeatability, localization error and DLT corner error for one homography pair.

    ``image_size`` is view A's ``(W, H)`` (used for the corner error);
    ``size_b`` defaults to it.
    """
    ms = mutual_matches(kps_a, kps_b, h_ab, match_radius)
    rep = repeatability(kps_a, kps_b, h_ab, thresholds, mask_a, mask_b, image_size, size_b or image_size)
    loc = localization_error(ms) if len(ms) else None
    try:
        xa, xb = _coords(kps_a), _coords(kps_b)
        h_est = estimate_homography_dlt(xa[ms.pairs[:, 0]], xb[ms.pairs[:, 1]])
        cerr = corner_error(h_est, h_ab, image_size)
    except (InsufficientDataError, DegenerateConfigurationError, ValueError):
        cerr = float("inf")
    return PairResult(len(ms), rep, loc, cerr)


def aggregate_pairs(results: list[PairResult], auc_thresholds=(1.0, 3.0)) -> MetricReport:
    if not results:
        raise UndefinedMetricError("no pairs to aggregate")
    thresholds = list(results[0].repeatability)
    rep = {}
    for t in thresholds:
        vals = [r.repeatability[t] for r in results if r.repeatability[t] is not None]
        rep[t] = float(np.mean(vals)) if vals else None
    locs = [r.localization_error for r in results if r.localization_error is not None]
    return MetricReport(
        num_matches=float(np.mean([r.num_matches for r in results])),
        repeatability=rep,
        localization_error=float(np.mean(locs)) if locs else None,
        auc=homography_auc([r.corner_error for r in results], auc_thresholds),
        extra={"num_pairs": len(results)},
    )


# ----------------------------------------------------------- rotation sweep


def rotation_views(pixels: np.ndarray, angle_deg: float, out_size: int):
    """Largest rotation-safe centered square of ``pixels`` rotated by ``angle_deg`` and resized.

    Returns ``(view, h_src_to_view)``. The square is inscribed in the circle
    inscribed in the central crop, so it stays fully covered at every angle.
    """
    h, w = pixels.shape[:2]
    side = min(h, w) / np.sqrt(2.0)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    # source -> rotated about the image center
    rot = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0, 0, 1.0]])
    # rotated source -> output square (pixel-center scaling of the centered crop)
    scale = out_size / side
    x0, y0 = cx - (side - 1) / 2.0, cy - (side - 1) / 2.0
    crop = np.array([[1.0, 0, -x0], [0, 1.0, -y0], [0, 0, 1.0]])
    res = np.array([[scale, 0, 0.5 * scale - 0.5], [0, scale, 0.5 * scale - 0.5], [0, 0, 1.0]])
    m = res @ crop @ rot
    view = cv2.warpPerspective(
        pixels, m, (out_size, out_size), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT
    )
    return np.clip(view, 0.0, 1.0), Homography(m)


Detector = Callable[[np.ndarray, int], KeypointSet]


@dataclass
class RotationSweepResult:
    angles: np.ndarray
    repeatability: dict  # threshold -> array over angles
    auc: dict  # threshold -> scalar

    def to_dict(self) -> dict:
        return {
            "angles": [float(a) for a in self.angles],
            "repeatability": {str(t): [float(v) for v in vals] for t, vals in self.repeatability.items()},
            "auc": {str(t): float(v) for t, v in self.auc.items()},
        }


def rotation_sweep(
    detector: Detector,
    images,
    step_deg: float = 10.0,
    noise_sigma: float = 10.0,
    k: int = 200,
    thresholds=(1.0, 2.0, 3.0),
    out_size: int = 256,
    seed: int = 0,
) -> RotationSweepResult:
    """Repeatability of ``detector`` against in-plane rotations of each image.

    ``detector(pixels, k)`` receives an ``H x W x 3`` array. Noise ``sigma`` is
    on the [0, 255] scale and is drawn independently for both views of every
    (image, angle) from ``seed``. AUC over the normalized angle axis is the
    mean over uniformly spaced angles.
    """
    if 360.0 % step_deg:
        raise ValueError("step_deg must divide 360")
    angles = np.arange(0.0, 360.0, step_deg)
    rng = np.random.default_rng(seed)
    per_angle = {float(t): np.zeros(len(angles)) for t in thresholds}
    pixels_list = [getattr(im, "pixels", im) for im in images]
    for ai, angle in enumerate(angles):
        acc = {float(t): [] for t in thresholds}
        for px in pixels_list:
            view0, m0 = rotation_views(px, 0.0, out_size)
            view1, m1 = rotation_views(px, angle, out_size)
            if noise_sigma > 0:
                view0 = np.clip(view0 + rng.normal(0, noise_sigma / 255.0, view0.shape), 0, 1).astype(np.float32)
                view1 = np.clip(view1 + rng.normal(0, noise_sigma / 255.0, view1.shape), 0, 1).astype(np.float32)
            k0 = detector(view0, k)
            k1 = detector(view1, k)
            corr = m1 @ m0.inverse()
            size = (out_size, out_size)
            rep = repeatability(k0, k1, corr, thresholds, size_a=size, size_b=size)
            for t in acc:
                if rep[t] is not None:
                    acc[t].append(rep[t])
        for t in acc:
            per_angle[t][ai] = float(np.mean(acc[t])) if acc[t] else 0.0
    auc = {t: float(vals.mean()) for t, vals in per_angle.items()}
    return RotationSweepResult(angles, per_angle, auc)


# ------------------------------------------------------------- budget curve


def budget_curve(
    kps_a: KeypointSet,
    kps_b: KeypointSet,
    order_scores_a,
    order_scores_b,
    correspondence,
    budgets,
    threshold: float = 3.0,
    mask_a=None,
    mask_b=None,
    size_a=None,
    size_b=None,
) -> dict[int, float | None]:
    """Repeatability@``threshold`` after truncating both views to each budget by their own scores."""
    budgets = [int(b) for b in budgets]
    if budgets != sorted(budgets):
        raise ValueError("budgets must be ascending")
    out = {}
    for n in budgets:
        ta = rank_order_truncate(kps_a, order_scores_a, n)
        tb = rank_order_truncate(kps_b, order_scores_b, n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = repeatability(ta, tb, correspondence, [threshold], mask_a, mask_b, size_a, size_b)
        out[n] = rep[float(threshold)]
    return out


# -------------------------------------------------------------- calibration


@dataclass
class CalibrationResult:
    bin_pred: np.ndarray
    bin_obs: np.ndarray
    slope: float
    intercept: float

    def to_dict(self) -> dict:
        return {
            "bin_pred": [float(v) for v in self.bin_pred],
            "bin_obs": [float(v) for v in self.bin_obs],
            "slope": float(self.slope),
            "intercept": float(self.intercept),
        }


def calibration_curve(pred_uncerts, observed_errors, num_bins: int = 20) -> CalibrationResult:
    """Equal-population bins by predicted uncertainty; log-log OLS slope of bin means."""
    pred = np.asarray(pred_uncerts, dtype=np.float64).reshape(-1)
    obs = np.asarray(observed_errors, dtype=np.float64).reshape(-1)
    if pred.shape != obs.shape:
        raise ValueError("predicted and observed lists must have equal length")
    if len(pred) < num_bins:
        raise InsufficientDataError(f"{len(pred)} samples cannot fill {num_bins} calibration bins")
    if np.any(pred <= 0) or np.any(obs <= 0):
        raise ValueError("calibration inputs must be strictly positive (log domain)")
    order = np.argsort(pred, kind="stable")
    bins = np.array_split(order, num_bins)
    bp = np.array([pred[b].mean() for b in bins])
    bo = np.array([obs[b].mean() for b in bins])
    lx, ly = np.log(bp), np.log(bo)
    var = ((lx - lx.mean()) ** 2).sum()
    if var <= 1e-24:
        raise DegenerateConfigurationError("predicted uncertainties have zero spread; slope undefined")
    slope = float(((lx - lx.mean()) * (ly - ly.mean())).sum() / var)
    return CalibrationResult(bp, bo, slope, float(ly.mean() - slope * lx.mean()))


# ------------------------------------------------------ harness oracles


def make_blob_image(size: int = 256, num_blobs: int = 12, sigma: float = 3.0, seed: int = 0) -> np.ndarray:
    """Bright isotropic Gaussian blobs on a dark background, all inside the rotation-safe disk.

    Blob centres are rotation-invariant features, so a centroid detector is an
    exact oracle for the rotation sweep.
    """
    rng = np.random.default_rng(seed)
    c = (size - 1) / 2.0
    radius = size / (2.0 * np.sqrt(2.0)) - 4 * sigma
    min_sep = 8 * sigma
    centers = []
    for _ in range(1000 * num_blobs):
        if len(centers) == num_blobs:
            break
        r = radius * np.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * np.pi)
        p = np.array([c + r * np.cos(a), c + r * np.sin(a)])
        if all(np.linalg.norm(p - q) >= min_sep for q in centers):
            centers.append(p)
    if len(centers) < num_blobs:
        raise ValueError(f"cannot place {num_blobs} separated blobs in a {size}px image")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for x, y in centers:
        img += np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2))
    img = 0.1 + 0.8 * np.clip(img, 0, 1)
    return np.repeat(img[..., None], 3, axis=2).astype(np.float32)


def blob_detector(pixels: np.ndarray, k: int, blur_sigma: float = 2.0, rel_threshold: float = 0.5) -> KeypointSet:
    """Blurred-intensity local maxima refined by a thresholded centroid (oracle for blob images)."""
    gray = np.asarray(pixels, dtype=np.float64).mean(axis=2)
    g = cv2.GaussianBlur(gray, (0, 0), blur_sigma)
    dil = cv2.dilate(g, np.ones((5, 5), np.uint8))
    base = np.median(g)
    peak = g.max() - base
    ys, xs = np.nonzero((g >= dil) & (g - base > rel_threshold * peak))
    vals = g[ys, xs]
    order = np.argsort(-vals, kind="stable")[:k]
    h, w = g.shape
    coords, probs = [], []
    r = 4
    for i in order:
        x, y = xs[i], ys[i]
        x0, x1, y0, y1 = max(x - r, 0), min(x + r + 1, w), max(y - r, 0), min(y + r + 1, h)
        patch = g[y0:y1, x0:x1]
        wts = np.clip(patch - (base + 0.5 * (g[y, x] - base)), 0, None)
        py, px = np.mgrid[y0:y1, x0:x1]
        s = wts.sum()
        coords.append([(wts * px).sum() / s, (wts * py).sum() / s])
        probs.append(g[y, x])
    coords = np.array(coords, dtype=np.float64).reshape(-1, 2)
    probs = np.array(probs, dtype=np.float64)
    return KeypointSet(coords, probs / max(probs.sum(), 1e-12))
