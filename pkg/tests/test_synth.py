import numpy as np
import pytest

import slopewatch as sw
from slopewatch.cloud import PointClass, fit_plane
from slopewatch.rigid import RigidTransform
from slopewatch.synth import (LandslideSpec, add_vegetation, apply_landslide,
                              gen_terrain, leveled_station_pose,
                              simulate_stations, stations_facing_slope,
                              terrain_frame)


# ---------------------------------------------------------------------------
# terrain generation
# ---------------------------------------------------------------------------


def test_gen_terrain_density_point_count():
    cloud, _ = gen_terrain((10, 10), 70.0, 0.3, 154.0, seed=0)
    assert abs(len(cloud) - 15400) <= 0.05 * 15400


def test_gen_terrain_zero_roughness_on_plane():
    cloud, truth = gen_terrain((20, 12), 55.0, 0.0, 20.0, seed=1)
    n = truth.frame.normal
    offsets = cloud.points @ n
    assert np.abs(offsets).max() < 1e-9


def test_gen_terrain_deterministic():
    a, _ = gen_terrain((15, 10), 70.0, 0.4, 30.0, seed=42)
    b, _ = gen_terrain((15, 10), 70.0, 0.4, 30.0, seed=42)
    np.testing.assert_array_equal(a.points, b.points)
    c, _ = gen_terrain((15, 10), 70.0, 0.4, 30.0, seed=43)
    assert not np.array_equal(a.points, c.points)


def test_gen_terrain_roughness_scale():
    cloud, truth = gen_terrain((30, 20), 70.0, 0.5, 30.0, seed=2)
    offsets = cloud.points @ truth.frame.normal
    rms = np.sqrt(np.mean((offsets - offsets.mean()) ** 2))
    assert rms == pytest.approx(0.5, rel=0.25)


def test_gen_terrain_rejects_bad_density():
    with pytest.raises(ValueError):
        gen_terrain((10, 10), 70.0, 0.3, 0.0)


# ---------------------------------------------------------------------------
# vegetation
# ---------------------------------------------------------------------------


def test_vegetation_zero_coverage_unchanged():
    cloud, _ = gen_terrain((15, 10), 70.0, 0.3, 20.0, seed=3)
    out, truth = add_vegetation(cloud, 0.0, seed=4)
    np.testing.assert_array_equal(out.points, cloud.points)
    assert (truth.ground_labels == PointClass.GROUND).all()


def test_vegetation_coverage_fraction():
    cloud, _ = gen_terrain((20, 15), 70.0, 0.3, 40.0, seed=5)
    out, truth = add_vegetation(cloud, 0.15, seed=6)
    frac = (truth.ground_labels == PointClass.VEGETATION).mean()
    assert frac == pytest.approx(0.15, abs=0.03)


def test_vegetation_min_height_above_local_ground():
    cloud, _ = gen_terrain((20, 15), 70.0, 0.4, 40.0, seed=7)
    support_radius = 2.0
    h_min = 0.5
    out, truth = add_vegetation(cloud, 0.10, (h_min, 2.0), seed=8,
                                support_radius=support_radius)
    ground = out.points[truth.ground_labels == PointClass.GROUND]
    veg = out.points[truth.ground_labels == PointClass.VEGETATION]
    normal, _ = fit_plane(ground)
    helper = np.array([1.0, 0, 0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1, 0])
    u = helper - (helper @ normal) * normal
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    from scipy.spatial import cKDTree
    plan_g = np.column_stack([ground @ u, ground @ v])
    plan_v = np.column_stack([veg @ u, veg @ v])
    tree = cKDTree(plan_g)
    s_g = ground @ normal
    s_v = veg @ normal
    for i, neighbors in enumerate(tree.query_ball_point(plan_v, r=support_radius)):
        local = s_g[neighbors].max() if neighbors else -np.inf
        assert s_v[i] - local >= h_min - 1e-9


def test_vegetation_rejects_bad_coverage():
    cloud, _ = gen_terrain((10, 10), 70.0, 0.3, 10.0, seed=9)
    with pytest.raises(ValueError):
        add_vegetation(cloud, 1.0)


# ---------------------------------------------------------------------------
# landslide injection
# ---------------------------------------------------------------------------


def make_slide_scene(depth=0.5, seed=10, radii=(8.0, 4.0)):
    cloud, truth = gen_terrain((40, 30), 70.0, 0.2, 30.0, seed=seed)
    frame = truth.frame
    center = 20 * frame.axis_u + 15 * frame.axis_v
    spec = LandslideSpec(center=tuple(center), radius_along=radii[0],
                         radius_across=radii[1], depth_m=depth,
                         azimuth_deg=90.0)
    moved, slide_truth = apply_landslide(cloud, spec, frame=frame)
    return cloud, moved, slide_truth, spec, frame


def test_landslide_peak_and_outside():
    cloud, moved, truth, spec, frame = make_slide_scene()
    disp = truth.true_displacement
    assert np.abs(disp).max() <= 0.5 + 1e-12
    assert np.abs(disp).max() > 0.49  # dense sampling hits near the center
    center = np.asarray(spec.center)
    w = cloud.points - center
    a = (w @ frame.axis_v) / spec.radius_along
    b = (w @ np.cross(frame.normal, frame.axis_v)) / spec.radius_across
    outside = np.hypot(a, b) >= 1.0
    assert np.abs(disp[outside]).max() == 0.0
    np.testing.assert_array_equal(moved.points[outside], cloud.points[outside])


def test_landslide_requires_nonzero_depth():
    with pytest.raises(ValueError):
        LandslideSpec(center=(0, 0, 0), radius_along=5, radius_across=5,
                      depth_m=0.0, azimuth_deg=0)


def test_landslide_integral_matches_quadrature():
    cloud, moved, truth, spec, frame = make_slide_scene(seed=11)
    density = len(cloud) / (40.0 * 30.0)
    integral = np.abs(truth.true_displacement).sum() / density

    # quadrature of the analytic taper over the ellipse
    step = 0.02
    rho_a = np.arange(-1, 1, step)
    ga, gb = np.meshgrid(rho_a, rho_a)
    rho = np.hypot(ga, gb)
    taper = np.where(rho < 1, 0.5 * (1 + np.cos(np.pi * np.clip(rho, 0, 1))), 0.0)
    oracle = (abs(spec.depth_m) * taper.sum() * step * step
              * spec.radius_along * spec.radius_across)
    assert integral == pytest.approx(oracle, rel=0.05)


def test_landslide_disjoint_specs_add_disjointly():
    cloud, truth = gen_terrain((40, 30), 70.0, 0.2, 20.0, seed=12)
    frame = truth.frame
    s1 = LandslideSpec(center=tuple(10 * frame.axis_u + 10 * frame.axis_v),
                       radius_along=4, radius_across=3, depth_m=0.4,
                       azimuth_deg=0.0)
    s2 = LandslideSpec(center=tuple(30 * frame.axis_u + 20 * frame.axis_v),
                       radius_along=4, radius_across=3, depth_m=-0.6,
                       azimuth_deg=90.0)
    c1, t1 = apply_landslide(cloud, s1, frame=frame)
    c2, t2 = apply_landslide(c1, s2, frame=frame)
    active1 = np.abs(t1.true_displacement) > 0
    active2 = np.abs(t2.true_displacement) > 0
    assert not (active1 & active2).any()
    combined = t1.true_displacement + t2.true_displacement
    assert np.abs(combined).max() <= 0.6 + 1e-12


# ---------------------------------------------------------------------------
# station simulation
# ---------------------------------------------------------------------------


def test_simulate_identity_station_noise_free():
    cloud, _ = gen_terrain((15, 10), 70.0, 0.3, 20.0, seed=13)
    scans = simulate_stations(cloud, [RigidTransform.identity()],
                              noise_sigma_m=0.0)
    np.testing.assert_array_equal(scans[0].points, cloud.points)
    np.testing.assert_array_equal(
        scans[0].scalars["source_index"], np.arange(len(cloud)))


def test_simulate_noise_free_is_exact_rigid_transform():
    cloud, _ = gen_terrain((15, 10), 70.0, 0.3, 20.0, seed=14)
    pose = leveled_station_pose([5.0, -30.0, 10.0], cloud.points.mean(axis=0))
    scans = simulate_stations(cloud, [pose], noise_sigma_m=0.0)
    np.testing.assert_allclose(scans[0].points,
                               pose.inverse().apply(cloud.points), atol=1e-12)


def test_simulate_noise_statistics():
    cloud, _ = gen_terrain((30, 22), 70.0, 0.2, 160.0, seed=15)
    assert len(cloud) > 100_000
    sigma = 0.006
    scans = simulate_stations(cloud, [RigidTransform.identity()],
                              noise_sigma_m=sigma, seed=16)
    noise = scans[0].points - cloud.points
    for axis in range(3):
        assert np.std(noise[:, axis]) == pytest.approx(sigma, rel=0.10)


def test_simulate_max_range_crop():
    cloud, _ = gen_terrain((15, 10), 70.0, 0.3, 20.0, seed=17)
    pose = leveled_station_pose(cloud.points.mean(axis=0) + [0, -20.0, 0],
                                cloud.points.mean(axis=0))
    scans = simulate_stations(cloud, [pose], noise_sigma_m=0.0,
                              max_range_m=22.0)
    assert 0 < len(scans[0]) < len(cloud)
    assert np.linalg.norm(scans[0].points, axis=1).max() <= 22.0


def test_simulate_occlusion_drops_hidden_points():
    # a near wall fully hides a far wall behind it
    n = 40
    g = np.linspace(-2, 2, n)
    gx, gz = np.meshgrid(g, g)
    near = np.column_stack([gx.ravel(), np.full(n * n, 10.0), gz.ravel()])
    far = np.column_stack([gx.ravel() * 0.8, np.full(n * n, 30.0),
                           gz.ravel() * 0.8])
    cloud = sw.PointCloud(points=np.vstack([near, far]))
    station = leveled_station_pose([0.0, 0.0, 0.0], [0.0, 10.0, 0.0])
    scans = simulate_stations(cloud, [station], noise_sigma_m=0.0,
                              occlusion=True, occlusion_bin_deg=1.0)
    kept = scans[0].scalars["source_index"].astype(int)
    assert (kept < n * n).all()


def test_simulate_two_stations_closes_with_multiview():
    scene, _ = gen_terrain((30, 20), 70.0, 0.5, 12.0, seed=18)
    poses = stations_facing_slope(scene, 2, standoff=40.0)
    sigma = 0.006
    scans = simulate_stations(scene, poses, noise_sigma_m=sigma, seed=19)
    prepared = [sw.estimate_normals(s, k=16, viewpoint=(0, 0, 0))
                for s in scans]
    transforms = sw.register_multiview(prepared)
    truth = poses[0].inverse().compose(poses[1])
    pts = prepared[1].points
    err = transforms[1].apply(pts) - truth.apply(pts)
    rmse = np.sqrt(np.mean((err ** 2).sum(axis=1)))
    assert rmse < 2 * sigma


def test_simulate_requires_pose():
    cloud, _ = gen_terrain((10, 10), 70.0, 0.3, 10.0, seed=20)
    with pytest.raises(ValueError):
        simulate_stations(cloud, [])


def test_leveled_pose_keeps_vertical():
    pose = leveled_station_pose([3.0, -7.0, 2.0], [10.0, 5.0, 30.0])
    np.testing.assert_allclose(pose.rotation[:, 2], [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(pose.rotation), 1.0, atol=1e-12)


def test_generators_pure_functions_of_seed():
    cloud, _ = gen_terrain((12, 8), 70.0, 0.3, 20.0, seed=21)
    v1, _ = add_vegetation(cloud, 0.1, seed=22)
    v2, _ = add_vegetation(cloud, 0.1, seed=22)
    np.testing.assert_array_equal(v1.points, v2.points)
    pose = leveled_station_pose([0, -30.0, 5.0], cloud.points.mean(axis=0))
    s1 = simulate_stations(cloud, [pose], noise_sigma_m=0.004, seed=23)
    s2 = simulate_stations(cloud, [pose], noise_sigma_m=0.004, seed=23)
    np.testing.assert_array_equal(s1[0].points, s2[0].points)


def test_terrain_frame_orthonormal():
    frame = terrain_frame(70.0)
    for v in (frame.axis_u, frame.axis_v, frame.normal):
        assert np.linalg.norm(v) == pytest.approx(1.0)
    assert frame.axis_u @ frame.axis_v == pytest.approx(0.0)
    assert np.cross(frame.axis_u, frame.axis_v) @ frame.normal == pytest.approx(1.0)
