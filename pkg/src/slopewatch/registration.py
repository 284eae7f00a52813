"""Pairwise, multi-view, and multi-epoch rigid registration.

Three alignment paths build on one closed-form least-squares core:

* plain point-to-point ICP for fine alignment,
* descriptor matching with a geometric-consistency filter for coarse
  alignment of overlapping station scans,
* a coarse-to-fine global matcher for epoch pairs that blends feature and
  Euclidean distances in a minimum-cost bipartite matching loop, then
  polishes with ICP. The blend weight starts feature-dominated and decays
  to pure Euclidean, which tolerates large pose offsets and local surface
  change between epochs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .cloud import (PointCloud, diameter, estimate_normals, fit_plane,
                    surface_spacing, _orient_deterministic)
from .errors import (DegenerateCorrespondences, DisconnectedViews,
                     InsufficientGeometry, NoOverlap)
from .rigid import RigidTransform

logger = logging.getLogger(__name__)

DESCRIPTOR_BINS = (8, 4, 4)  # azimuth x radial x elevation occupancy grid
DESCRIPTOR_BITS = int(np.prod(DESCRIPTOR_BINS))


# ---------------------------------------------------------------------------
# Parameter and result records
# ---------------------------------------------------------------------------


@dataclass
class IcpParams:
    max_iter: int = 150
    convergence_eps: float = 1e-10
    max_pair_dist: float | None = None  # default: 0.25 * target diameter


@dataclass
class CoarseParams:
    keypoint_count: int = 500
    descriptor_radius: float | None = None      # default: 10 * surface spacing
    min_descriptor_neighbors: int = 10
    gc_tolerance: float | None = None           # default: 3 * surface spacing
    min_keypoint_spacing: float | None = None   # default: 2 * surface spacing
    normals_k: int = 16
    # genuine overlap keeps most matches pairwise-distance-consistent;
    # featureless or disjoint geometry keeps only a few percent
    min_consistency_ratio: float = 0.2


@dataclass
class HybridParams:
    alpha_start: float = 0.8
    alpha_steps: int = 5
    coarse: CoarseParams = field(default_factory=CoarseParams)
    icp: IcpParams = field(default_factory=IcpParams)


@dataclass
class MultiviewParams:
    coarse: CoarseParams = field(default_factory=CoarseParams)
    icp: IcpParams = field(default_factory=IcpParams)
    min_link_matches: int = 8   # consistent pairs needed for a graph edge


@dataclass
class FeatureSet:
    """Binary descriptors over a keypoint subset of one cloud."""

    keypoint_indices: np.ndarray        # (m,) indices into the owning cloud
    descriptors: np.ndarray             # (m, bits) uint8 in {0, 1}
    radius: float
    dropped_count: int = 0

    def __post_init__(self):
        if len(self.keypoint_indices) != len(self.descriptors):
            raise ValueError("one descriptor per keypoint required")


@dataclass
class CorrespondenceSet:
    pairs: np.ndarray       # (k, 2) of (source index, target index)
    residuals: np.ndarray   # (k,) pairing distance, meters

    def __post_init__(self):
        if len(self.pairs) != len(self.residuals):
            raise ValueError("one residual per pair required")
        src = self.pairs[:, 0] if len(self.pairs) else np.empty(0)
        if len(np.unique(src)) != len(src):
            raise ValueError("duplicated source index after matching")


@dataclass
class RegistrationResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    converged: bool
    inlier_count: int
    rmse_sequence: list = field(default_factory=list, repr=False)


@dataclass
class EvaluationResult:
    success: bool
    pose_rmse: float


# ---------------------------------------------------------------------------
# Closed-form rigid fit
# ---------------------------------------------------------------------------


def fit_rigid(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform minimizing sum ||R s + t - d||^2.

    Standard SVD solution with the reflection corrected so the rotation is
    proper. Needs at least three pairs that are not all collinear.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("source and target pair counts differ")
    if len(src) < 3:
        raise DegenerateCorrespondences(f"{len(src)} pairs; need at least 3")
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= max(s[0], 1e-300) * 1e-9:
        raise DegenerateCorrespondences("pairs are collinear or coincident")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, dc - r @ sc)


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------


def icp(
    source: PointCloud,
    target: PointCloud,
    params: IcpParams | None = None,
    init: RigidTransform | None = None,
) -> RegistrationResult:
    """Point-to-point ICP from ``source`` into ``target``'s frame.

    Each iteration pairs every source point with its nearest target point,
    rejects pairs beyond ``max_pair_dist``, and refits the closed-form
    transform. Stops when the paired RMSE improves by less than
    ``convergence_eps`` (or would increase, which keeps the RMSE sequence
    non-increasing), or at ``max_iter``.

    Raises
    ------
    NoOverlap
        If no pair survives the distance gate on the first iteration.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("both clouds must be non-empty")
    params = params or IcpParams()
    max_pair = params.max_pair_dist
    if max_pair is None:
        max_pair = 0.25 * diameter(target)
    src = source.points
    tgt = target.points
    tree = cKDTree(tgt)

    t = init or RigidTransform.identity()
    prev_rmse = np.inf
    iterations = 0
    converged = False
    inliers = 0
    history: list[float] = []

    for it in range(1, params.max_iter + 1):
        moved = t.apply(src)
        dist, idx = tree.query(moved)
        mask = dist <= max_pair
        count = int(mask.sum())
        if count == 0:
            if it == 1:
                raise NoOverlap(
                    f"no source point within {max_pair:.3f} m of the target"
                )
            break
        if count < 3:
            break
        try:
            t_new = fit_rigid(src[mask], tgt[idx[mask]])
        except DegenerateCorrespondences:
            break
        resid = t_new.apply(src[mask]) - tgt[idx[mask]]
        rmse = float(np.sqrt(np.mean(np.einsum("ij,ij->i", resid, resid))))
        iterations = it
        if rmse > prev_rmse:
            converged = True   # keep the previous, better transform
            break
        t = t_new
        inliers = count
        history.append(rmse)
        improvement = prev_rmse - rmse
        prev_rmse = rmse
        if rmse < params.convergence_eps or improvement < params.convergence_eps:
            converged = True
            break

    rmse_out = prev_rmse if np.isfinite(prev_rmse) else 0.0
    return RegistrationResult(transform=t, rmse=rmse_out,
                              iterations=max(iterations, 1), converged=converged,
                              inlier_count=inliers, rmse_sequence=history)


# ---------------------------------------------------------------------------
# Binary shape descriptors
# ---------------------------------------------------------------------------


def select_keypoints(cloud: PointCloud, count: int,
                     min_spacing: float | None = None) -> np.ndarray:
    """Curvature-ranked keypoints with a minimum spacing between picks.

    Requires the ``curvature`` channel written by ``estimate_normals``.
    Deterministic: stable sort on (-curvature, index), greedy hash-grid
    suppression.
    """
    if "curvature" not in cloud.scalars:
        raise ValueError("cloud lacks a 'curvature' channel; run estimate_normals")
    curv = cloud.scalars["curvature"]
    if min_spacing is None:
        min_spacing = 2.0 * surface_spacing(cloud)
    order = np.lexsort((np.arange(len(curv)), -curv))
    if min_spacing <= 0:
        return order[:count]
    taken: dict[tuple, int] = {}
    picked: list[int] = []
    pts = cloud.points
    inv = 1.0 / min_spacing
    for i in order:
        key = tuple(np.floor(pts[i] * inv).astype(np.int64))
        if key in taken:
            continue
        taken[key] = i
        picked.append(int(i))
        if len(picked) >= count:
            break
    return np.asarray(picked, dtype=np.int64)


def extract_descriptors(cloud: PointCloud, keypoints, radius: float,
                        min_neighbors: int = 10) -> FeatureSet:
    """Binary occupancy descriptors on a local reference frame per keypoint.

    The frame takes the stored normal as its z axis; the x axis is the
    dominant covariance direction projected into the tangent plane, sign
    fixed by the majority of neighbor projections. The neighborhood is
    binned on an azimuth x radial x elevation cylindrical grid and
    thresholded at the per-descriptor median occupancy. Descriptor distance
    is Hamming distance, so the representation is rotation invariant up to
    the frame-sign rule.

    Keypoints with fewer than ``min_neighbors`` points inside ``radius``
    are dropped and counted in ``dropped_count``.
    """
    if cloud.normals is None:
        raise ValueError("descriptors need normals; run estimate_normals first")
    if radius <= 0:
        raise ValueError("descriptor radius must be positive")
    keypoints = np.asarray(keypoints, dtype=np.int64)
    pts = cloud.points
    tree = cKDTree(pts)
    n_az, n_rad, n_el = DESCRIPTOR_BINS

    kept: list[int] = []
    rows: list[np.ndarray] = []
    dropped = 0
    neighbor_lists = tree.query_ball_point(pts[keypoints], r=radius)
    for kp, neighbors in zip(keypoints, neighbor_lists):
        idx = np.asarray(neighbors, dtype=np.int64)
        z = cloud.normals[kp]
        if len(idx) < min_neighbors or not np.all(np.isfinite(z)):
            dropped += 1
            continue
        local = pts[idx] - pts[kp]
        cov = local.T @ local / len(idx)
        _, vecs = np.linalg.eigh(cov)
        x = None
        for col in (2, 1, 0):
            cand = vecs[:, col] - (vecs[:, col] @ z) * z
            norm = np.linalg.norm(cand)
            if norm > 1e-9:
                x = cand / norm
                break
        if x is None:
            dropped += 1
            continue
        if (local @ x).sum() < 0:
            x = -x
        y = np.cross(z, x)

        lx = local @ x
        ly = local @ y
        lz = local @ z
        az = np.arctan2(ly, lx)                       # [-pi, pi]
        rad = np.hypot(lx, ly)
        i_az = np.clip(((az + np.pi) / (2 * np.pi) * n_az).astype(int), 0, n_az - 1)
        i_rad = np.clip((rad / radius * n_rad).astype(int), 0, n_rad - 1)
        i_el = np.clip(((lz + radius) / (2 * radius) * n_el).astype(int), 0, n_el - 1)
        flat = (i_az * n_rad + i_rad) * n_el + i_el
        counts = np.bincount(flat, minlength=DESCRIPTOR_BITS)
        rows.append((counts > np.median(counts)).astype(np.uint8))
        kept.append(int(kp))

    desc = np.asarray(rows, dtype=np.uint8).reshape(len(rows), DESCRIPTOR_BITS)
    return FeatureSet(keypoint_indices=np.asarray(kept, dtype=np.int64),
                      descriptors=desc, radius=radius, dropped_count=dropped)


def hamming_matrix(a: FeatureSet, b: FeatureSet) -> np.ndarray:
    """Pairwise Hamming distances, shape (len(a), len(b))."""
    if a.descriptors.shape[1] != b.descriptors.shape[1]:
        raise ValueError("descriptor lengths differ")
    return (a.descriptors[:, None, :] != b.descriptors[None, :, :]).sum(axis=2)


def match_descriptors(a: FeatureSet, b: FeatureSet,
                      uniqueness_margin: int = 1) -> CorrespondenceSet:
    """Mutual-nearest descriptor matches (ties go to the lowest index).

    A match survives only when its best distance beats the second best by
    at least ``uniqueness_margin`` bits; featureless geometry (all
    descriptors alike) therefore produces no matches instead of arbitrary
    ones.
    """
    if len(a.keypoint_indices) == 0 or len(b.keypoint_indices) == 0:
        return CorrespondenceSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    d = hamming_matrix(a, b)
    best_b = np.argmin(d, axis=1)
    best_a = np.argmin(d, axis=0)
    rows = np.arange(len(best_b))
    mutual = best_a[best_b] == rows
    if d.shape[1] > 1 and uniqueness_margin > 0:
        part = np.partition(d, 1, axis=1)
        distinct = part[:, 1] - part[:, 0] >= uniqueness_margin
        mutual &= distinct
    pairs = np.column_stack([rows[mutual], best_b[mutual]]).astype(np.int64)
    resid = d[pairs[:, 0], pairs[:, 1]].astype(np.float64)
    return CorrespondenceSet(pairs=pairs, residuals=resid)


def consistent_match_subset(src_pts: np.ndarray, tgt_pts: np.ndarray,
                            pairs: np.ndarray, tolerance: float) -> np.ndarray:
    """Greedy largest subset of matches preserving pairwise distances.

    A retained set is mutually consistent: for every two kept matches the
    source-side and target-side separations agree within ``tolerance``.
    Seeded from the match with the most consistent partners; deterministic.
    """
    m = len(pairs)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    ps = src_pts[pairs[:, 0]]
    pt = tgt_pts[pairs[:, 1]]
    ds = np.linalg.norm(ps[:, None, :] - ps[None, :, :], axis=2)
    dt = np.linalg.norm(pt[:, None, :] - pt[None, :, :], axis=2)
    compat = np.abs(ds - dt) <= tolerance
    np.fill_diagonal(compat, True)
    scores = compat.sum(axis=1)
    order = np.lexsort((np.arange(m), -scores))
    members = [int(order[0])]
    for cand in order[1:]:
        if compat[cand, members].all():
            members.append(int(cand))
    return np.asarray(sorted(members), dtype=np.int64)


def _ensure_normals(cloud: PointCloud, params: CoarseParams) -> PointCloud:
    """Estimate normals with an up-facing default viewpoint when missing."""
    if cloud.normals is not None and "curvature" in cloud.scalars:
        return cloud
    normal, _ = fit_plane(cloud.points)
    vp = cloud.points.mean(axis=0) + _orient_deterministic(normal) * (
        2.0 * max(diameter(cloud), 1.0))
    k = min(params.normals_k, len(cloud))
    logger.debug("estimating normals (k=%d) with default viewpoint", k)
    return estimate_normals(cloud, k=k, viewpoint=vp)


def _prepare_pair(source: PointCloud, target: PointCloud,
                  params: CoarseParams):
    """Shared-radius descriptor extraction for a cloud pair.

    Both sides must bin their neighborhoods at the same support radius or
    the descriptors are not comparable (merged clouds sample denser than
    single scans).
    """
    source = _ensure_normals(source, params)
    target = _ensure_normals(target, params)
    spacing = max(surface_spacing(source), surface_spacing(target))
    radius = params.descriptor_radius or 10.0 * spacing
    fs = extract_descriptors(
        source, select_keypoints(source, params.keypoint_count,
                                 params.min_keypoint_spacing),
        radius, min_neighbors=params.min_descriptor_neighbors)
    ft = extract_descriptors(
        target, select_keypoints(target, params.keypoint_count,
                                 params.min_keypoint_spacing),
        radius, min_neighbors=params.min_descriptor_neighbors)
    return source, target, fs, ft, spacing


def coarse_register(source: PointCloud, target: PointCloud,
                    params: CoarseParams | None = None) -> RigidTransform:
    """Descriptor matching + geometric consistency + closed-form fit.

    Raises ``InsufficientGeometry`` when fewer than three matches survive
    the consistency filter (featureless or non-overlapping geometry).
    """
    params = params or CoarseParams()
    source, target, fs, ft, spacing = _prepare_pair(source, target, params)
    matches = match_descriptors(fs, ft)
    if len(matches.pairs) < 3:
        raise InsufficientGeometry(
            f"only {len(matches.pairs)} mutual descriptor matches"
        )
    tol = params.gc_tolerance or 3.0 * spacing
    src_kp = source.points[fs.keypoint_indices]
    tgt_kp = target.points[ft.keypoint_indices]
    keep = consistent_match_subset(src_kp, tgt_kp, matches.pairs, tol)
    required = max(3, int(np.ceil(params.min_consistency_ratio
                                  * len(matches.pairs))))
    if len(keep) < required:
        raise InsufficientGeometry(
            f"only {len(keep)} of {len(matches.pairs)} matches are "
            f"geometrically consistent (need {required})"
        )
    pairs = matches.pairs[keep]
    try:
        return fit_rigid(src_kp[pairs[:, 0]], tgt_kp[pairs[:, 1]])
    except DegenerateCorrespondences as exc:
        raise InsufficientGeometry(str(exc)) from exc


def _link_strength(a: PointCloud, b: PointCloud, params: CoarseParams) -> int:
    """Similarity of two views: count of consistency-surviving matches."""
    try:
        a, b, fa, fb, spacing = _prepare_pair(a, b, params)
        matches = match_descriptors(fa, fb)
        if len(matches.pairs) == 0:
            return 0
        tol = params.gc_tolerance or 3.0 * spacing
        keep = consistent_match_subset(a.points[fa.keypoint_indices],
                                       b.points[fb.keypoint_indices],
                                       matches.pairs, tol)
        return int(len(keep))
    except (InsufficientGeometry, ValueError):
        return 0


def register_multiview(clouds: list[PointCloud],
                       params: MultiviewParams | None = None) -> list[RigidTransform]:
    """Hierarchical multi-view registration into the first cloud's frame.

    Scores every pair of current groups by descriptor-set overlap (matches
    surviving geometric consistency), registers and merges the strongest
    pair (coarse + ICP), and repeats until one cloud remains. Returns one
    transform per input cloud; the first cloud maps to identity.

    Raises ``DisconnectedViews`` naming the components when no remaining
    pair clears the minimum link strength.
    """
    if len(clouds) == 0:
        raise ValueError("need at least one cloud")
    params = params or MultiviewParams()
    if len(clouds) == 1:
        return [RigidTransform.identity()]

    from .cloud import concat_clouds

    groups = [
        {"members": [i], "transforms": {i: RigidTransform.identity()}, "cloud": c}
        for i, c in enumerate(clouds)
    ]
    while len(groups) > 1:
        best = None
        for ia in range(len(groups)):
            for ib in range(ia + 1, len(groups)):
                s = _link_strength(groups[ia]["cloud"], groups[ib]["cloud"],
                                   params.coarse)
                if best is None or s > best[0]:
                    best = (s, ia, ib)
        strength, ia, ib = best
        if strength < params.min_link_matches:
            raise DisconnectedViews([sorted(g["members"]) for g in groups])
        ga, gb = groups[ia], groups[ib]
        logger.info("merging views %s <- %s (link strength %d)",
                    ga["members"], gb["members"], strength)
        t_coarse = coarse_register(gb["cloud"], ga["cloud"], params.coarse)
        result = icp(gb["cloud"], ga["cloud"], params.icp, init=t_coarse)
        t = result.transform
        merged = concat_clouds([ga["cloud"], t.apply_cloud(gb["cloud"])])
        transforms = dict(ga["transforms"])
        for m, tm in gb["transforms"].items():
            transforms[m] = t.compose(tm)
        new_group = {"members": ga["members"] + gb["members"],
                     "transforms": transforms, "cloud": merged}
        groups = [g for k, g in enumerate(groups) if k not in (ia, ib)]
        groups.append(new_group)

    final = groups[0]["transforms"]
    rebase = final[0].inverse()
    return [rebase.compose(final[i]) for i in range(len(clouds))]


# ---------------------------------------------------------------------------
# Global hybrid (multi-epoch) registration
# ---------------------------------------------------------------------------


def alpha_schedule(alpha_start: float, alpha_steps: int) -> np.ndarray:
    """Monotonically decreasing blend weights from ``alpha_start`` to 0."""
    if not (0.0 <= alpha_start <= 1.0):
        raise ValueError("alpha_start must lie in [0, 1]")
    if alpha_steps < 1:
        raise ValueError("alpha_steps must be >= 1")
    return np.linspace(alpha_start, 0.0, alpha_steps)


def _pair_diameter(a: np.ndarray, b: np.ndarray) -> float:
    lo = np.minimum(a.min(axis=0), b.min(axis=0))
    hi = np.maximum(a.max(axis=0), b.max(axis=0))
    return float(np.linalg.norm(hi - lo))


def register_global_hybrid(source: PointCloud, target: PointCloud,
                           params: HybridParams | None = None) -> RegistrationResult:
    """Global epoch-to-epoch registration with a hybrid matching cost.

    Each outer step matches source and target keypoints by minimum-cost
    bipartite assignment under ``sqrt(alpha * d_feat^2 + (1-alpha) * d_euc^2)``
    with the feature distance normalized by descriptor bit length and the
    Euclidean distance by the current cloud-pair diameter, then refits the
    transform. ``alpha`` decays linearly to zero, after which plain ICP
    refines the pose. The ICP polish is also run from the identity and the
    candidate with more gated inliers (ties: lower RMSE, then the identity
    start) wins, so the hybrid path never does worse than plain ICP.
    """
    params = params or HybridParams()
    source, target, fs, ft, _ = _prepare_pair(source, target, params.coarse)
    if len(fs.keypoint_indices) < 3 or len(ft.keypoint_indices) < 3:
        raise InsufficientGeometry("too few keypoints with descriptors")

    pa = source.points[fs.keypoint_indices]
    pb = target.points[ft.keypoint_indices]
    d_feat = hamming_matrix(fs, ft) / float(DESCRIPTOR_BITS)

    t = RigidTransform.identity()
    for alpha in alpha_schedule(params.alpha_start, params.alpha_steps):
        moved = t.apply(pa)
        scale = _pair_diameter(moved, pb)
        d_euc = cdist(moved, pb) / max(scale, 1e-12)
        cost = np.sqrt(alpha * d_feat**2 + (1.0 - alpha) * d_euc**2)
        rows, cols = linear_sum_assignment(cost)
        try:
            t = fit_rigid(pa[rows], pb[cols])
        except DegenerateCorrespondences:
            continue

    try:
        cand_hybrid = icp(source, target, params.icp, init=t)
    except NoOverlap:
        cand_hybrid = None
    try:
        cand_plain = icp(source, target, params.icp)
    except NoOverlap:
        cand_plain = None
    if cand_hybrid is None and cand_plain is None:
        raise NoOverlap("no pairing distance overlap from either start pose")
    if cand_hybrid is None:
        return cand_plain
    if cand_plain is None:
        return cand_hybrid
    better_plain = (cand_plain.inlier_count, -cand_plain.rmse) >= (
        cand_hybrid.inlier_count, -cand_hybrid.rmse)
    return cand_plain if better_plain else cand_hybrid


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_registration(result, truth: RigidTransform, diameter_m: float,
                          success_threshold: float) -> EvaluationResult:
    """Pose RMSE between a recovered and a ground-truth transform.

    Displacement is measured over a fixed evaluation set, the eight corners
    of the cube of side ``diameter_m`` centered at the origin. Success is
    inclusive at the threshold.
    """
    if diameter_m <= 0:
        raise ValueError("diameter must be positive")
    t = result.transform if hasattr(result, "transform") else result
    half = diameter_m / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-half, half)
                        for sy in (-half, half) for sz in (-half, half)])
    disp = t.apply(corners) - truth.apply(corners)
    pose_rmse = float(np.sqrt(np.mean(np.einsum("ij,ij->i", disp, disp))))
    return EvaluationResult(success=pose_rmse <= success_threshold,
                            pose_rmse=pose_rmse)
