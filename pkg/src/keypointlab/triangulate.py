"""Synthetic multi-view scenes, DLT triangulation, covariance-weighted point refinement and precision filtering."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import CheiralityError, DegenerateGeometryError, DegenerateTrackError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if k.shape != (3, 3) or abs(k[1, 0]) + abs(k[2, 0]) + abs(k[2, 1]) > 0:
            raise ValueError("intrinsics must be 3x3 upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0 or abs(np.linalg.det(k)) < 1e-12:
            raise ValueError("intrinsics must be invertible with positive focal lengths")
        if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation must be orthonormal")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def projection(self) -> np.ndarray:
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def depth(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return (p @ self.rotation.T + self.translation)[:, 2]

    def project(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        single = p.ndim == 1
        u = p.reshape(-1, 3) @ self.rotation.T @ self.intrinsics.T + self.intrinsics @ self.translation
        out = u[:, :2] / u[:, 2:3]
        return out[0] if single else out

    def project_jacobian(self, point) -> np.ndarray:
        """``2 x 3`` derivative of the pixel projection w.r.t. the world point."""
        y = self.rotation @ np.asarray(point, dtype=np.float64) + self.translation
        u = self.intrinsics @ y
        d = np.array([[1.0 / u[2], 0.0, -u[0] / u[2] ** 2], [0.0, 1.0 / u[2], -u[1] / u[2] ** 2]])
        return d @ self.intrinsics @ self.rotation

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["intrinsics"]), np.array(d["rotation"]), np.array(d["translation"]))


def look_at_camera(center, target, focal: float, principal=(320.0, 240.0), up=(0.0, 0.0, 1.0)) -> Camera:
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    k = np.array([[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]])
    return Camera(k, rot, -rot @ c)


@dataclass
class Track:
    point_id: int
    camera_ids: np.ndarray
    points2d: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64).reshape(-1)
        self.points2d = np.asarray(self.points2d, dtype=np.float64).reshape(-1, 2)
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(-1, 2, 2)
        m = len(self.camera_ids)
        if m < 2:
            raise DegenerateTrackError("a track needs at least two observations")
        if len(set(self.camera_ids.tolist())) != m:
            raise DegenerateTrackError("track camera ids must be distinct")
        if len(self.points2d) != m or len(self.covs) != m:
            raise ValueError("observation arrays must have equal length")

    def __len__(self):
        return len(self.camera_ids)

    def to_dict(self) -> dict:
        return {
            "point_id": int(self.point_id),
            "observations": [
                {"camera_id": int(c), "xy": p.tolist(), "cov": s.tolist()}
                for c, p, s in zip(self.camera_ids, self.points2d, self.covs)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Track":
        obs = d["observations"]
        return cls(d["point_id"], [o["camera_id"] for o in obs], [o["xy"] for o in obs], [o["cov"] for o in obs])


@dataclass
class Point3D:
    position: np.ndarray
    marginal_cov: np.ndarray
    precision: float


def ellipsoid_precision(cov) -> float:
    """Reciprocal volume of the unit-Mahalanobis ellipsoid."""
    det = float(np.linalg.det(np.asarray(cov, dtype=np.float64)))
    if det <= 0:
        raise DegenerateGeometryError("covariance is not positive definite")
    return 1.0 / (4.0 / 3.0 * math.pi * math.sqrt(det))


# ------------------------------------------------------------------ scenes


@dataclass(frozen=True)
class NoiseModel:
    """Per-observation 2D Gaussian noise.

    Each point draws a log-uniform scale from ``point_scale_range``; each
    observation additionally draws a log-uniform ``obs_scale_range`` factor,
    a minor/major axis ratio from ``anisotropy_range`` and a uniform angle.
    """

    sigma_px: float = 1.0
    point_scale_range: tuple = (1.0, 1.0)
    obs_scale_range: tuple = (1.0, 1.0)
    anisotropy_range: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.sigma_px < 0:
            raise ValueError("sigma_px must be non-negative")
        for lo, hi in (self.point_scale_range, self.obs_scale_range):
            if not 0 < lo <= hi:
                raise ValueError("scale ranges must satisfy 0 < lo <= hi")
        lo, hi = self.anisotropy_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("anisotropy ratios must lie in (0, 1]")

    @classmethod
    def isotropic(cls, sigma_px: float) -> "NoiseModel":
        return cls(sigma_px=sigma_px)

    @classmethod
    def heteroscedastic(cls) -> "NoiseModel":
        return cls(sigma_px=1.0, point_scale_range=(0.25, 4.0), obs_scale_range=(0.5, 2.0), anisotropy_range=(0.1, 1.0))


def _log_uniform(rng, lo, hi, size=None):
    if lo == hi:
        return np.full(size, float(lo)) if size is not None else float(lo)
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


@dataclass
class Scene:
    cameras: list[Camera]
    points: np.ndarray
    tracks: list[Track]
    seed: int = 0

    def to_jsonl(self, path) -> None:
        lines = [json.dumps({"type": "camera", "id": i, **c.to_dict()}) for i, c in enumerate(self.cameras)]
        lines += [json.dumps({"type": "point", "id": i, "xyz": p.tolist()}) for i, p in enumerate(self.points)]
        lines += [json.dumps({"type": "track", **t.to_dict()}) for t in self.tracks]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Scene":
        cams, pts, tracks = {}, {}, []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "camera":
                cams[rec["id"]] = Camera.from_dict(rec)
            elif kind == "point":
                pts[rec["id"]] = rec["xyz"]
            elif kind == "track":
                tracks.append(Track.from_dict(rec))
        return cls([cams[i] for i in sorted(cams)], np.array([pts[i] for i in sorted(pts)]).reshape(-1, 3), tracks)


def synth_scene(
    num_cams: int,
    num_points: int,
    noise: NoiseModel = NoiseModel(),
    seed: int = 0,
    ring_radius: float = 3.0,
    focal: float = 500.0,
    visibility: float = 0.7,
) -> Scene:
    """Cameras on a horizontal ring looking at points in the unit box centred at the origin."""
    if num_cams < 2:
        raise ValueError("need at least two cameras")
    rng = np.random.default_rng(seed)
    cams = []
    for i in range(num_cams):
        a = 2 * math.pi * i / num_cams
        h = 0.5 * math.sin(3 * a)
        cams.append(look_at_camera((ring_radius * math.cos(a), ring_radius * math.sin(a), h), (0, 0, 0), focal))
    points = rng.uniform(-0.5, 0.5, (num_points, 3))
    tracks = []
    for pid, x in enumerate(points):
        seen = np.nonzero(rng.random(num_cams) < visibility)[0]
        if len(seen) < 2:
            seen = np.sort(rng.choice(num_cams, 2, replace=False))
        in_front = np.array([cams[c].depth(x)[0] > 0 for c in seen])
        if not in_front.any():
            log.info("point %d is behind every camera; excluded", pid)
            continue
        seen = seen[in_front]
        if len(seen) < 2:
            log.info("point %d visible in fewer than two cameras; excluded", pid)
            continue
        p_scale = _log_uniform(rng, *noise.point_scale_range)
        obs, covs = [], []
        for c in seen:
            s = noise.sigma_px * p_scale * _log_uniform(rng, *noise.obs_scale_range)
            ratio = rng.uniform(*noise.anisotropy_range) if noise.anisotropy_range[0] < 1 else 1.0
            th = rng.uniform(0, math.pi)
            rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
            cov = rot @ np.diag([s**2, (s * ratio) ** 2]) @ rot.T
            cov = 0.5 * (cov + cov.T)
            if s > 0:
                e = np.linalg.cholesky(cov) @ rng.standard_normal(2)
            else:
                cov = np.eye(2)  # noiseless observations still carry a valid weight
                e = np.zeros(2)
            obs.append(cams[c].project(x) + e)
            covs.append(cov)
        tracks.append(Track(pid, seen, np.array(obs), np.array(covs)))
    return Scene(cams, points, tracks, seed)


# ------------------------------------------------------------ triangulation


def triangulate_dlt(track: Track, cameras: list[Camera], min_angle_deg: float = 0.1) -> np.ndarray:
    """Homogeneous least-squares point from all observations of ``track``."""
    cams = [cameras[c] for c in track.camera_ids]
    rays = []
    for cam, xy in zip(cams, track.points2d):
        d = cam.rotation.T @ np.linalg.solve(cam.intrinsics, np.array([xy[0], xy[1], 1.0]))
        rays.append(d / np.linalg.norm(d))
    rays = np.array(rays)
    cos_min = np.clip(rays @ rays.T, -1.0, 1.0).min()
    centers = np.array([c.center for c in cams])
    baseline = np.ptp(centers, axis=0).max()
    if np.degrees(np.arccos(cos_min)) <= min_angle_deg or baseline < 1e-12:
        raise DegenerateTrackError("rays are (nearly) parallel; triangulation is ill-posed")
    rows = []
    for cam, xy in zip(cams, track.points2d):
        p = cam.projection
        r1 = xy[0] * p[2] - p[0]
        r2 = xy[1] * p[2] - p[1]
        rows.append(r1 / np.linalg.norm(r1))
        rows.append(r2 / np.linalg.norm(r2))
    _, _, vt = np.linalg.svd(np.array(rows))
    xh = vt[-1]
    if abs(xh[3]) < 1e-15:
        raise DegenerateTrackError("triangulated point is at infinity")
    x = xh[:3] / xh[3]
    if all(cam.depth(x)[0] <= 0 for cam in cams):
        raise CheiralityError("triangulated point lies behind every camera")
    return x


def _whitening(covs: np.ndarray) -> np.ndarray:
    """``W`` with ``W^T W = Sigma^-1`` for each ``2 x 2`` covariance."""
    return np.linalg.inv(np.linalg.cholesky(covs))


def reprojection_cost(point, track: Track, cameras, weights=None) -> float:
    w = _whitening(track.covs) if weights is None else weights
    res = np.array([cameras[c].project(point) - xy for c, xy in zip(track.camera_ids, track.points2d)])
    r = np.einsum("mij,mj->mi", w, res)
    return float((r * r).sum())


@dataclass
class RefineResult:
    position: np.ndarray
    iterations: int
    cost: float
    initial_cost: float
    ok: bool = True


def refine_point(point, track: Track, cameras, weighting: str = "covariance", max_iters: int = 100, tol: float = 1e-10):
    """Levenberg-Marquardt on the 3D position with cameras fixed.

    ``weighting`` is ``"covariance"`` (whiten by the observation covariances)
    or ``"identity"`` (plain reprojection error).
    """
    if weighting == "covariance":
        w = _whitening(track.covs)
    elif weighting == "identity":
        w = np.broadcast_to(np.eye(2), (len(track), 2, 2))
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    cams = [cameras[c] for c in track.camera_ids]
    x = np.asarray(point, dtype=np.float64).copy()

    def residuals(p):
        res = np.array([cam.project(p) for cam in cams]) - track.points2d
        return np.einsum("mij,mj->mi", w, res).reshape(-1)

    r = residuals(x)
    cost0 = cost = float(r @ r)
    if not np.isfinite(cost):
        return RefineResult(x, 0, cost, cost0, ok=False)
    lam = 1e-3
    it = 0
    for it in range(1, max_iters + 1):
        jac = np.concatenate([wi @ cam.project_jacobian(x) for wi, cam in zip(w, cams)])
        a = jac.T @ jac
        g = jac.T @ r
        accepted = False
        while lam < 1e12:
            try:
                step = -np.linalg.solve(a + lam * np.diag(np.diag(a)), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            if np.linalg.norm(step) < tol:
                return RefineResult(x, it - 1, cost, cost0)
            r_new = residuals(x + step)
            c_new = float(r_new @ r_new)
            if np.isfinite(c_new) and c_new < cost:
                x, r, cost = x + step, r_new, c_new
                lam = max(lam / 10, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted:
            break
        if np.linalg.norm(step) < tol:
            break
    return RefineResult(x, it, cost, cost0)


def refine_points(points, tracks, cameras, weighting: str = "covariance") -> tuple[np.ndarray, np.ndarray]:
    """Refine every point independently; returns positions and a boolean ok flag per track."""
    out = np.array(points, dtype=np.float64).reshape(-1, 3).copy()
    ok = np.ones(len(tracks), dtype=bool)
    for i, tr in enumerate(tracks):
        res = refine_point(out[i], tr, cameras, weighting)
        if not res.ok or not np.all(np.isfinite(res.position)):
            log.warning("point %d has a non-finite residual; excluded", tr.point_id)
            ok[i] = False
            continue
        out[i] = res.position
    return out, ok


def marginal_covariance_3d(point, track: Track, cameras) -> np.ndarray:
    """Inverse Gauss-Newton information of the point given its observation covariances."""
    info = np.zeros((3, 3))
    for c, cov in zip(track.camera_ids, track.covs):
        j = cameras[c].project_jacobian(point)
        info += j.T @ np.linalg.solve(cov, j)
    ev = np.linalg.eigvalsh(info)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        raise DegenerateGeometryError("information matrix is singular")
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T)


# --------------------------------------------------------------- filtering


def precision_filter_curve(positions, precisions, gt_points, fractions, taus=(0.005, 0.01, 0.02)) -> list[dict]:
    """Accuracy and completeness after keeping the top-``f`` fraction of points by precision."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    prec = np.asarray(precisions, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(pos) != len(prec):
        raise ValueError("one precision per point required")
    order = np.argsort(-prec, kind="stable")
    gt_tree = cKDTree(gt)
    d_to_gt, _ = gt_tree.query(pos)
    rows = []
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError("fractions must lie in (0, 1]")
        keep = order[: max(1, int(math.ceil(f * len(pos))))]
        d_from_gt, _ = cKDTree(pos[keep]).query(gt)
        for tau in taus:
            rows.append(
                {
                    "fraction": float(f),
                    "tau": float(tau),
                    "accuracy": float(np.mean(d_to_gt[keep] <= tau)),
                    "completeness": float(np.mean(d_from_gt <= tau)),
                }
            )
    return rows


def write_curve_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["fraction", "tau", "accuracy", "completeness"])
        writer.writeheader()
        writer.writerows(rows)


def write_points_jsonl(points: list[Point3D], path, ids=None) -> None:
    ids = range(len(points)) if ids is None else ids
    with open(path, "w") as fh:
        for i, p in zip(ids, points):
            rec = {
                "point_id": int(i),
                "xyz": np.asarray(p.position).tolist(),
                "cov": np.asarray(p.marginal_cov).tolist(),
                "precision": float(p.precision),
            }
            fh.write(json.dumps(rec) + "\n")


def read_points_jsonl(path) -> list[Point3D]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(Point3D(np.array(rec["xyz"]), np.array(rec["cov"]), rec["precision"]))
    return out


# -------------------------------------------------------------- experiment


@dataclass
class TriangulationResult:
    gt: np.ndarray
    dlt: np.ndarray
    weighted: np.ndarray
    identity: np.ndarray
    covs: np.ndarray
    precisions: np.ndarray
    err_weighted: np.ndarray = field(init=False)
    err_identity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.err_weighted = np.linalg.norm(self.weighted - self.gt, axis=1)
        self.err_identity = np.linalg.norm(self.identity - self.gt, axis=1)

    @property
    def predicted_sigma(self) -> np.ndarray:
        return np.sqrt(np.trace(self.covs, axis1=1, axis2=2))


def run_scene(scene: Scene) -> TriangulationResult:
    """DLT + both refinements + marginal covariances for every track of ``scene``."""
    gt, dlt, wt, idt, covs, precs = [], [], [], [], [], []
    for tr in scene.tracks:
        try:
            x0 = triangulate_dlt(tr, scene.cameras)
        except (DegenerateTrackError, CheiralityError) as exc:
            log.info("track %d skipped: %s", tr.point_id, exc)
            continue
        rw = refine_point(x0, tr, scene.cameras, "covariance")
        ri = refine_point(x0, tr, scene.cameras, "identity")
        if not (rw.ok and ri.ok):
            continue
        cov = marginal_covariance_3d(rw.position, tr, scene.cameras)
        gt.append(scene.points[tr.point_id])
        dlt.append(x0)
        wt.append(rw.position)
        idt.append(ri.position)
        covs.append(cov)
        precs.append(ellipsoid_precision(cov))
    return TriangulationResult(
        np.array(gt), np.array(dlt), np.array(wt), np.array(idt), np.array(covs), np.array(precs)
    )
