"""Synthetic slope scenes with ground truth.

Generates fractal terrain on an inclined base plane, clustered vegetation
blobs, smoothly tapered landslide displacements, and per-station scan
simulation (range crop, angular z-buffer occlusion, Gaussian noise). Every
generator is a pure function of its parameters and seed. Defaults mirror a
survey-grade terrestrial scanner: 6 mm noise, 154 points per square meter,
a slope standing near 70 degrees.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointClass, PointCloud
from .rigid import RigidTransform

logger = logging.getLogger(__name__)

DEFAULT_NOISE_SIGMA_M = 0.006
DEFAULT_DENSITY_PTS_M2 = 154.0
DEFAULT_SLOPE_DEG = 70.0


@dataclass(frozen=True)
class TerrainFrame:
    """Base-plane frame: point = u * axis_u + v * axis_v + h * normal."""

    axis_u: np.ndarray
    axis_v: np.ndarray
    normal: np.ndarray
    slope_deg: float


@dataclass(frozen=True)
class LandslideSpec:
    """Elliptical displacement patch riding on the base plane.

    ``depth_m`` is the peak signed surface change along the plane normal
    (positive deposition, negative erosion). An equal tangential drift of
    peak ``|depth_m|`` along ``azimuth_deg`` carries material downslope, so
    the total displacement direction is the normal-plus-azimuth diagonal.
    """

    center: tuple
    radius_along: float
    radius_across: float
    depth_m: float
    azimuth_deg: float

    def __post_init__(self):
        if self.depth_m == 0:
            raise ValueError("depth must be nonzero")
        if self.radius_along <= 0 or self.radius_across <= 0:
            raise ValueError("radii must be positive")


@dataclass
class SceneTruth:
    """Ground truth accompanying a generated cloud."""

    ground_labels: np.ndarray
    station_poses: list = dc_field(default_factory=list)
    true_displacement: np.ndarray | None = None
    region_specs: list = dc_field(default_factory=list)
    frame: TerrainFrame | None = None


def _value_noise(u: np.ndarray, v: np.ndarray, extent: tuple, rng,
                 octaves: int = 4) -> np.ndarray:
    """Multi-octave bilinear value noise, RMS roughly 1."""
    out = np.zeros_like(u)
    base = max(extent) / 4.0
    total_amp = 0.0
    for o in range(octaves):
        cell = max(base / (2 ** o), 1e-6)
        amp = 0.5 ** o
        nx = int(np.ceil(extent[0] / cell)) + 2
        ny = int(np.ceil(extent[1] / cell)) + 2
        lattice = rng.standard_normal((nx, ny))
        fx = np.clip(u / cell, 0, nx - 1 - 1e-9)
        fy = np.clip(v / cell, 0, ny - 1 - 1e-9)
        i0 = fx.astype(np.int64)
        j0 = fy.astype(np.int64)
        tx = fx - i0
        ty = fy - j0
        smooth_x = tx * tx * (3 - 2 * tx)
        smooth_y = ty * ty * (3 - 2 * ty)
        val = ((1 - smooth_x) * (1 - smooth_y) * lattice[i0, j0]
               + smooth_x * (1 - smooth_y) * lattice[i0 + 1, j0]
               + (1 - smooth_x) * smooth_y * lattice[i0, j0 + 1]
               + smooth_x * smooth_y * lattice[i0 + 1, j0 + 1])
        out += amp * val
        total_amp += amp
    rms = float(np.sqrt(np.mean(out ** 2)))
    return out / rms if rms > 0 else out


def terrain_frame(slope_deg: float) -> TerrainFrame:
    theta = math.radians(slope_deg)
    return TerrainFrame(
        axis_u=np.array([1.0, 0.0, 0.0]),
        axis_v=np.array([0.0, math.cos(theta), math.sin(theta)]),
        normal=np.array([0.0, -math.sin(theta), math.cos(theta)]),
        slope_deg=slope_deg,
    )


def gen_terrain(
    extent_m: tuple = (60.0, 40.0),
    mean_slope_deg: float = DEFAULT_SLOPE_DEG,
    roughness: float = 0.3,
    density_pts_m2: float = DEFAULT_DENSITY_PTS_M2,
    seed: int = 0,
    epoch_id: str | None = None,
) -> tuple[PointCloud, SceneTruth]:
    """Fractal-noise height field over an inclined base plane.

    ``roughness`` is the RMS height of the relief perpendicular to the
    base plane, meters; zero puts every sample exactly on the plane. The
    sample count is ``round(area * density)``; identical seeds give
    bitwise-identical clouds.
    """
    if density_pts_m2 <= 0:
        raise ValueError("density must be positive")
    rng = np.random.default_rng(seed)
    ex, ey = float(extent_m[0]), float(extent_m[1])
    n = int(round(ex * ey * density_pts_m2))
    u = rng.uniform(0.0, ex, n)
    v = rng.uniform(0.0, ey, n)
    if roughness > 0:
        h = roughness * _value_noise(u, v, (ex, ey), rng)
    else:
        h = np.zeros(n)
    frame = terrain_frame(mean_slope_deg)
    pts = (u[:, None] * frame.axis_u + v[:, None] * frame.axis_v
           + h[:, None] * frame.normal)
    labels = np.full(n, np.uint8(PointClass.GROUND))
    cloud = PointCloud(points=pts, labels=labels, epoch_id=epoch_id)
    truth = SceneTruth(ground_labels=labels.copy(),
                       true_displacement=np.zeros(n), frame=frame)
    return cloud, truth


def add_vegetation(
    cloud: PointCloud,
    coverage_fraction: float,
    height_range_m: tuple = (0.5, 2.0),
    seed: int = 0,
    cluster_radius: float = 1.5,
    support_radius: float = 2.0,
) -> tuple[PointCloud, SceneTruth]:
    """Clustered above-surface blobs labeled vegetation.

    ``coverage_fraction`` is the vegetation share of the output cloud.
    Blob points sit at least ``height_range_m[0]`` above the highest ground
    point within ``support_radius`` (measured along the best-fit plane
    normal), so no vegetation point hugs the local surface.
    """
    if not (0.0 <= coverage_fraction < 1.0):
        raise ValueError("coverage must lie in [0, 1)")
    n_ground = len(cloud)
    labels_in = cloud.labels if cloud.labels is not None else np.full(
        n_ground, np.uint8(PointClass.GROUND))
    n_veg = int(round(coverage_fraction / (1.0 - coverage_fraction) * n_ground))
    if n_veg == 0:
        truth = SceneTruth(ground_labels=labels_in.copy(),
                           true_displacement=np.zeros(n_ground))
        return cloud, truth

    rng = np.random.default_rng(seed)
    from .cloud import fit_plane
    ground_idx = np.flatnonzero(labels_in == PointClass.GROUND)
    ground_pts = cloud.points[ground_idx]
    normal, _ = fit_plane(ground_pts)
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    axis_u = helper - (helper @ normal) * normal
    axis_u /= np.linalg.norm(axis_u)
    axis_v = np.cross(normal, axis_u)

    plan = np.column_stack([ground_pts @ axis_u, ground_pts @ axis_v])
    s_ground = ground_pts @ normal
    tree = cKDTree(plan)

    n_clusters = max(1, n_veg // 50)
    anchors = rng.choice(len(ground_idx), size=n_clusters, replace=True)
    assign = rng.integers(0, n_clusters, size=n_veg)
    jitter = rng.normal(0.0, cluster_radius / 1.5, size=(n_veg, 2))
    jitter = np.clip(jitter, -2.0 * cluster_radius, 2.0 * cluster_radius)
    heights = rng.uniform(height_range_m[0], height_range_m[1], size=n_veg)

    plan_q = plan[anchors[assign]] + jitter
    neighbor_lists = tree.query_ball_point(plan_q, r=support_radius)
    s_base = np.empty(n_veg)
    for i, lst in enumerate(neighbor_lists):
        s_base[i] = s_ground[lst].max() if lst else s_ground[anchors[assign[i]]]
    veg_pts = (plan_q[:, 0, None] * axis_u + plan_q[:, 1, None] * axis_v
               + (s_base + heights)[:, None] * normal)

    points = np.vstack([cloud.points, veg_pts])
    labels = np.concatenate([labels_in,
                             np.full(n_veg, np.uint8(PointClass.VEGETATION))])
    scalars = {k: np.concatenate([v, np.zeros(n_veg)])
               for k, v in cloud.scalars.items()}
    out = PointCloud(points=points, scalars=scalars, labels=labels,
                     epoch_id=cloud.epoch_id, origin_shift=cloud.origin_shift)
    truth = SceneTruth(ground_labels=labels.copy(),
                       true_displacement=np.zeros(len(points)))
    return out, truth


def apply_landslide(
    cloud: PointCloud,
    region_spec: LandslideSpec,
    frame: TerrainFrame | None = None,
) -> tuple[PointCloud, SceneTruth]:
    """Displace points inside an elliptical patch by a cosine-tapered field.

    The taper is 0.5 * (1 + cos(pi * rho)) on the normalized elliptical
    radius rho, so the surface change peaks at ``depth_m`` in the center
    and falls smoothly to zero on the rim. ``true_displacement`` records
    the signed change along the plane normal per point.
    """
    from .cloud import fit_plane

    pts = cloud.points
    if frame is not None:
        normal = frame.normal
        axis_u = frame.axis_u
        axis_v = frame.axis_v
    else:
        if cloud.labels is not None and (cloud.labels == PointClass.GROUND).any():
            base = pts[cloud.labels == PointClass.GROUND]
        else:
            base = pts
        normal, _ = fit_plane(base)
        helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        axis_u = helper - (helper @ normal) * normal
        axis_u /= np.linalg.norm(axis_u)
        axis_v = np.cross(normal, axis_u)

    az = math.radians(region_spec.azimuth_deg)
    t_along = math.cos(az) * axis_u + math.sin(az) * axis_v
    t_across = np.cross(normal, t_along)

    center = np.asarray(region_spec.center, dtype=np.float64)
    w = pts - center
    a = (w @ t_along) / region_spec.radius_along
    b = (w @ t_across) / region_spec.radius_across
    rho = np.hypot(a, b)
    inside = rho < 1.0
    taper = np.zeros(len(pts))
    taper[inside] = 0.5 * (1.0 + np.cos(np.pi * rho[inside]))

    normal_change = region_spec.depth_m * taper
    drift = abs(region_spec.depth_m) * taper
    displacement = normal_change[:, None] * normal + drift[:, None] * t_along
    moved = pts + displacement

    out = cloud.with_(points=moved)
    labels = cloud.labels if cloud.labels is not None else np.full(
        len(pts), np.uint8(PointClass.GROUND))
    truth = SceneTruth(ground_labels=labels.copy(),
                       true_displacement=normal_change,
                       region_specs=[region_spec])
    return out, truth


def leveled_station_pose(position, target) -> RigidTransform:
    """Station pose (local -> world) that keeps the instrument leveled.

    Survey scanners run dual-axis compensated, so the local +z axis is the
    world vertical; only the yaw points the +y axis at the horizontal
    direction of ``target``. A leveled frame keeps gravity meaningful in
    station coordinates (slope leveling, downhill directions).
    """
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd[2] = 0.0
    norm = np.linalg.norm(fwd)
    fwd = np.array([0.0, 1.0, 0.0]) if norm < 1e-12 else fwd / norm
    right = np.array([fwd[1], -fwd[0], 0.0])
    rot = np.column_stack([right, fwd, np.array([0.0, 0.0, 1.0])])
    return RigidTransform(rot, position)


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Station pose (local -> world) with local +z aimed at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.column_stack([right, down, fwd])
    u, _, vt = np.linalg.svd(rot)
    rot = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))]) @ vt
    return RigidTransform(rot, position)


def stations_facing_slope(cloud: PointCloud, count: int, standoff: float,
                          spread: float | None = None,
                          jitter_rng=None) -> list[RigidTransform]:
    """Deterministic station poses on a line facing the cloud's best plane."""
    from .cloud import diameter, fit_plane
    normal, _ = fit_plane(cloud.points)
    center = cloud.points.mean(axis=0)
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    axis_u = helper - (helper @ normal) * normal
    axis_u /= np.linalg.norm(axis_u)
    if spread is None:
        spread = 0.5 * diameter(cloud)
    offsets = np.linspace(-spread / 2.0, spread / 2.0, count) if count > 1 else [0.0]
    poses = []
    for off in offsets:
        pos = center + normal * standoff + axis_u * off
        if jitter_rng is not None:
            pos = pos + jitter_rng.normal(0.0, 0.05 * standoff, 3)
        poses.append(leveled_station_pose(pos, center))
    return poses


def simulate_stations(
    cloud: PointCloud,
    station_poses: list[RigidTransform],
    noise_sigma_m: float = DEFAULT_NOISE_SIGMA_M,
    max_range_m: float | None = None,
    occlusion: bool = False,
    seed: int = 0,
    occlusion_bin_deg: float = 0.05,
    occlusion_tol_m: float = 0.1,
) -> list[PointCloud]:
    """Per-station scans of the scene, in station-local frames.

    Each station transforms the scene into its own frame, drops points
    beyond ``max_range_m``, optionally drops points hidden behind nearer
    surface (z-buffer over angular bins), and adds isotropic Gaussian
    noise. With zero noise and no cropping the output is exactly the rigid
    transform of the input. A ``source_index`` channel maps each output
    point back to the scene point it samples.
    """
    if len(station_poses) == 0:
        raise ValueError("need at least one station pose")
    rng = np.random.default_rng(seed)
    out = []
    for pose in station_poses:
        local = pose.inverse().apply(cloud.points)
        keep = np.arange(len(local))
        if max_range_m is not None:
            rad = np.linalg.norm(local, axis=1)
            keep = keep[rad <= max_range_m]
        if occlusion and len(keep):
            pts = local[keep]
            rad = np.linalg.norm(pts, axis=1)
            az = np.degrees(np.arctan2(pts[:, 1], pts[:, 0]))
            el = np.degrees(np.arctan2(pts[:, 2], np.hypot(pts[:, 0], pts[:, 1])))
            bi = np.floor(az / occlusion_bin_deg).astype(np.int64)
            bj = np.floor(el / occlusion_bin_deg).astype(np.int64)
            key = (bi - bi.min()) * (bj.max() - bj.min() + 1) + (bj - bj.min())
            uniq, inv = np.unique(key, return_inverse=True)
            nearest = np.full(len(uniq), np.inf)
            np.minimum.at(nearest, inv, rad)
            visible = rad <= nearest[inv] + occlusion_tol_m
            keep = keep[visible]
        pts = local[keep]
        if noise_sigma_m > 0:
            pts = pts + rng.normal(0.0, noise_sigma_m, pts.shape)
        scalars = {k: v[keep] for k, v in cloud.scalars.items()}
        scalars["source_index"] = keep.astype(np.float64)
        out.append(PointCloud(
            points=pts,
            scalars=scalars,
            labels=None if cloud.labels is None else cloud.labels[keep],
            epoch_id=cloud.epoch_id,
        ))
    return out
