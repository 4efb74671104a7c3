"""
Planar-primitive acquisition: point clouds, minimal plane detection, and
domain initialization.

Detection is deliberately simple (seeded region growing over a k-NN graph);
any external detector can be substituted through the primitive JSON format.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidPrimitive
from .geometry import ConvexCell, ToleranceContext

log = logging.getLogger("compod.primitives")


@dataclass
class PointCloud:
    """Point set with optional per-point unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("point cloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals and points must have equal length")
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must be unit length within 1e-6")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def bbox_diagonal(self) -> float:
        return float(
            np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0))
        )


@dataclass
class PlanarPrimitive:
    """Supporting plane plus its inlier subset of a point cloud."""

    id: int
    plane: np.ndarray
    inliers: np.ndarray
    orientation: int | None = None

    def __post_init__(self):
        self.plane = np.asarray(self.plane, dtype=float).reshape(4)
        self.inliers = np.asarray(self.inliers, dtype=np.intp).reshape(-1)
        if len(self.inliers) == 0:
            raise InvalidPrimitive(f"primitive {self.id} has no inliers")

    def inlier_points(self, cloud: PointCloud) -> np.ndarray:
        return cloud.points[self.inliers]


@dataclass
class DetectionConfig:
    fit_tol_frac: float = 0.008
    min_inliers: int = 30
    knn: int = 16
    max_angle_deg: float = 20.0
    refit_every: int = 50

    def __post_init__(self):
        if self.fit_tol_frac <= 0.0:
            raise ValueError("fit_tol_frac must be positive")
        if self.min_inliers < 3:
            raise ValueError("min_inliers must be at least 3")


def fit_plane(points) -> np.ndarray:
    """Least-squares plane through points, canonical normal sign."""
    pts = np.asarray(points, dtype=float)
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    n = vt[-1]
    k = int(np.argmax(np.abs(n)))
    if n[k] < 0.0:
        n = -n
    n = n / np.linalg.norm(n)
    return np.append(n, -float(n @ centroid))


def estimate_normals(points, knn: int = 16):
    """Per-point normals and curvature proxies from k-NN covariances.

    Returns (normals, curvature) where curvature = lambda_min / trace of the
    local covariance; normal orientation is arbitrary (unoriented).
    """
    pts = np.asarray(points, dtype=float)
    k = min(knn + 1, len(pts))
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    if k == 1:
        idx = idx[:, None]
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]
    trace = np.clip(eigvals.sum(axis=1), 1e-300, None)
    curvature = eigvals[:, 0] / trace
    return normals, curvature


def detect_planes(cloud: PointCloud, cfg: DetectionConfig | None = None):
    """Region-growing plane detection.

    Seeds are taken in ascending local-curvature order; a region absorbs
    k-NN neighbours whose distance to the current plane stays within
    fit_tol_frac x bbox diagonal and whose normal deviates by at most
    max_angle_deg. The plane is refit every `refit_every` grown points and
    once more at the end; inliers violating the final fit are released.
    Primitives are returned sorted by descending inlier count.
    """
    cfg = cfg or DetectionConfig()
    pts = cloud.points
    n_pts = len(pts)
    fit_tol = cfg.fit_tol_frac * cloud.bbox_diagonal
    cos_max = math.cos(math.radians(cfg.max_angle_deg))

    est_normals, curvature = estimate_normals(pts, cfg.knn)
    normals = cloud.normals if cloud.normals is not None else est_normals

    k = min(cfg.knn + 1, n_pts)
    tree = cKDTree(pts)
    _, knn_idx = tree.query(pts, k=k)
    if k == 1:
        knn_idx = knn_idx[:, None]

    assigned = np.zeros(n_pts, dtype=bool)
    regions: list[np.ndarray] = []
    planes: list[np.ndarray] = []

    for seed in np.argsort(curvature, kind="stable"):
        if assigned[seed]:
            continue
        n0 = normals[seed]
        plane = np.append(n0, -float(n0 @ pts[seed]))
        member = np.zeros(n_pts, dtype=bool)
        member[seed] = True
        region = [int(seed)]
        frontier = [int(seed)]
        since_refit = 0
        while frontier:
            cur = frontier.pop()
            for nb in knn_idx[cur]:
                nb = int(nb)
                if member[nb] or assigned[nb]:
                    continue
                if abs(float(pts[nb] @ plane[:3]) + plane[3]) > fit_tol:
                    continue
                if abs(float(normals[nb] @ plane[:3])) < cos_max:
                    continue
                member[nb] = True
                region.append(nb)
                frontier.append(nb)
                since_refit += 1
                if since_refit >= cfg.refit_every:
                    plane = fit_plane(pts[region])
                    since_refit = 0
        if len(region) < cfg.min_inliers:
            continue
        # final refit; release points the refit plane no longer explains
        idx = np.asarray(sorted(region), dtype=np.intp)
        for _ in range(5):
            plane = fit_plane(pts[idx])
            dist = np.abs(pts[idx] @ plane[:3] + plane[3])
            angle_ok = np.abs(normals[idx] @ plane[:3]) >= cos_max
            keep = (dist <= fit_tol) & angle_ok
            if bool(keep.all()):
                break
            idx = idx[keep]
            if len(idx) < cfg.min_inliers:
                break
        if len(idx) < cfg.min_inliers:
            continue
        assigned[idx] = True
        regions.append(idx)
        planes.append(plane)

    order = sorted(
        range(len(regions)), key=lambda i: (-len(regions[i]), i)
    )
    primitives = []
    for new_id, old in enumerate(order):
        plane = planes[old]
        idx = regions[old]
        votes = np.sign(normals[idx] @ plane[:3]).sum()
        orientation = 1 if votes >= 0 else -1
        primitives.append(
            PlanarPrimitive(
                id=new_id, plane=plane, inliers=idx, orientation=orientation
            )
        )
    log.info("detected %d primitives from %d points", len(primitives), n_pts)
    return primitives


def dilated_bbox(points, padding_frac: float = 0.02, eps: float = 1e-9) -> ConvexCell:
    """Axis-aligned domain box, expanded by padding_frac x diagonal per side.

    A zero-extent dimension (e.g. a single input point) is inflated to an
    eps cube so the result is always a valid cell.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    pad = padding_frac * diag
    lo = lo - pad
    hi = hi + pad
    flat = hi - lo <= 0.0
    if np.any(flat):
        lo = np.where(flat, lo - 0.5 * eps, lo)
        hi = np.where(flat, hi + 0.5 * eps, hi)
    return ConvexCell.from_bounds(lo, hi)


def tolerance_for(points, padding_frac: float = 0.02, eps_rel: float = 1e-9) -> ToleranceContext:
    """ToleranceContext derived from the dilated domain of `points`."""
    box = dilated_bbox(points, padding_frac)
    lo, hi = box.bounds()
    return ToleranceContext(
        bbox_diagonal=max(float(np.linalg.norm(hi - lo)), 1e-12), eps_rel=eps_rel
    )
