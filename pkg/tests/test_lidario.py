import math

import numpy as np
import pytest

from panosplat import lidario
from panosplat.lidario import (Box, FormatError, Frame, Plane, Sphere, SurfaceModel,
                               SyntheticSceneSpec, frame_from_bytes, frame_to_bytes,
                               load_frame, load_scene, points_to_range, preset_spec,
                               range_to_points, save_frame, save_scene, scene_from_bytes,
                               scene_to_bytes, spec_from_dict, spec_to_dict, synth_generate)
from panosplat.panocam import SensorModel, angles_to_dir, pixel_centers, ray_directions

from conftest import random_scene


def random_frame(rng, h=16, w=64):
    r = rng.uniform(0.5, 50, (h, w)).astype(np.float32)
    r[rng.random((h, w)) < 0.2] = 0
    i = (rng.uniform(0, 1, (h, w)) * (r > 0)).astype(np.float32)
    return Frame(r, i, float(rng.uniform(0, 100)), lidario.sensor_pose_at(rng.normal(size=3), 0.4))


def test_frame_roundtrip(rng, tmp_path):
    f = random_frame(rng)
    save_frame(tmp_path / "a.pslf", f)
    g = load_frame(tmp_path / "a.pslf")
    assert g.range.tobytes() == f.range.tobytes()
    assert g.intensity.tobytes() == f.intensity.tobytes()
    assert g.timestamp == f.timestamp and np.array_equal(g.pose, f.pose)
    assert frame_to_bytes(g) == frame_to_bytes(f)


def test_frame_errors(rng):
    data = frame_to_bytes(random_frame(rng))
    with pytest.raises(FormatError):
        frame_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        frame_from_bytes(data[:4] + (7).to_bytes(4, "little") + data[8:])
    with pytest.raises(FormatError):
        frame_from_bytes(data[:-3])
    with pytest.raises(FormatError):
        frame_from_bytes(data[:10])
    with pytest.raises(ValueError):
        Frame(np.zeros((0, 4)), np.zeros((0, 4)), 0.0)


def test_scene_roundtrip(rng, tmp_path):
    s = random_scene(rng, 17)
    s.time_range = (0.5, 2.5)
    save_scene(tmp_path / "s.psls", s)
    t = load_scene(tmp_path / "s.psls")
    for name, arr in s.params().items():
        assert np.array_equal(getattr(t, name), arr), name
    assert t.cycle_length == s.cycle_length and t.time_range == s.time_range
    data = scene_to_bytes(s)
    with pytest.raises(FormatError):
        scene_from_bytes(b"PSLF" + data[4:])
    with pytest.raises(FormatError):
        scene_from_bytes(data[:-1])


def test_single_point_back_projection():
    sensor = SensorModel(64, 16, math.pi / 2 - 0.5, math.pi / 2 + 0.5)
    r = np.zeros(sensor.shape)
    # pixel whose centre is closest to phi = 0, theta = pi/2
    r[8, 32] = 5.0
    pts, _ = range_to_points(Frame(r, np.zeros_like(r), 0.0), sensor)
    expected = 5.0 * ray_directions(sensor)[8, 32]
    np.testing.assert_allclose(pts, [expected], atol=1e-6)
    assert range_to_points(Frame(np.zeros((4, 8)), np.zeros((4, 8)), 0.0),
                           SensorModel(8, 4, 1.0, 2.0))[0].shape == (0, 3)


def test_points_to_range_nearest_return():
    sensor = SensorModel(64, 16, math.pi / 2 - 0.5, math.pi / 2 + 0.5)
    d = ray_directions(sensor)[5, 9]
    f = points_to_range(np.array([7 * d, 3 * d]), sensor, np.eye(4), intensity=np.array([0.2, 0.9]))
    assert f.hit_mask.sum() == 1
    assert f.range[5, 9] == pytest.approx(3.0, rel=1e-6)
    assert f.intensity[5, 9] == pytest.approx(0.9, rel=1e-6)
    f = points_to_range(np.array([4 * d]), sensor, np.eye(4))
    assert f.hit_mask.sum() == 1
    with pytest.raises(ValueError):
        points_to_range(np.zeros((0, 3)), sensor, np.eye(4))


def test_grid_aligned_roundtrip(rng):
    """range -> points -> range reproduces the map exactly on pixel-centre samples."""
    sensor = SensorModel(128, 32, math.pi / 2 - 0.4, math.pi / 2 + 0.3)
    pose = lidario.sensor_pose_at([1.0, -0.5, 2.0], 0.7)
    f = random_frame(rng, 32, 128)
    f = Frame(f.range, f.intensity, 0.0, pose)
    pts, inten = range_to_points(f, sensor)
    g = points_to_range(pts, sensor, pose, inten)
    assert np.array_equal(g.hit_mask, f.hit_mask)
    np.testing.assert_allclose(g.range, f.range, rtol=1e-6)
    assert np.array_equal(g.intensity, f.intensity)


def _spec(prims, sensor=None, poses=None, ts=None, **kw):
    sensor = sensor or SensorModel(64, 16, math.pi / 2 - 0.5, math.pi / 2 + 0.5)
    return SyntheticSceneSpec(prims, sensor, poses or [np.eye(4)], ts or [0.0], **kw)


def centre_row_col(sensor):
    """Pixel whose ray is closest to straight ahead."""
    d = ray_directions(sensor)
    return np.unravel_index(np.argmax(d[..., 2]), sensor.shape)


def test_plane_analytic():
    sensor = SensorModel(64, 16, math.pi / 2 - 0.5, math.pi / 2 + 0.5)
    [f] = synth_generate(_spec([Plane((0, 0, 5), (0, 0, -1))], sensor))
    d = ray_directions(sensor)
    hit = f.hit_mask
    np.testing.assert_allclose(f.range[hit], (5 / d[..., 2])[hit], rtol=1e-6)
    # a ray exactly along +z
    o, dz = np.zeros(3), np.array([[0.0, 0.0, 1.0]])
    dist, _, _ = lidario.trace([Plane((0, 0, 5), (0, 0, -1))], o, dz, 0.0)
    assert dist[0] == 5.0


def test_sphere_analytic():
    dist, normal, label = lidario.trace([Sphere((0, 0, 10), 2.0)], np.zeros(3),
                                        np.array([[0.0, 0, 1]]), 0.0)
    assert dist[0] == pytest.approx(8.0, abs=1e-12) and label[0] == 0
    np.testing.assert_allclose(normal[0], [0, 0, -1], atol=1e-12)


def test_moving_box_shift():
    box = Box((-1.0, 0.0, 10.0), (0.5, 0.5, 0.5), velocity=(1.0, 0.0, 0.0))
    # a ray at x = 0.3 crossing the box front face only while the box covers it
    d = np.array([[0.0, 0.0, 1.0]])
    o = np.array([0.3, 0.0, 0.0])
    d0, _, _ = lidario.trace([box], o, d, 0.0)
    d1, _, _ = lidario.trace([box], o, d, 1.0)
    assert not np.isfinite(d0[0]) and d1[0] == pytest.approx(9.5)
    # oblique ray: hit point on the side face moves by the exact geometric amount
    ang = math.radians(45)
    d = np.array([[math.sin(ang), 0.0, math.cos(ang)]])
    box = Box((6.0, 0.0, 6.0), (0.5, 2.0, 3.0), velocity=(1.0, 0.0, 0.0))
    ra, _, _ = lidario.trace([box], np.zeros(3), d, 0.0)
    rb, _, _ = lidario.trace([box], np.zeros(3), d, 1.0)
    # left face x = 5.5 + t, so r = x / sin(45deg)
    s45 = math.sin(ang)
    assert ra[0] == pytest.approx(5.5 / s45, abs=1e-12)
    assert rb[0] == pytest.approx(6.5 / s45, abs=1e-12)


def test_synth_intensity_and_drop(rng):
    sensor = SensorModel(64, 16, math.pi / 2 - 0.5, math.pi / 2 + 0.5)
    surf = SurfaceModel(intensity=0.8)
    [f] = synth_generate(_spec([Plane((0, 0, 5), (0, 0, -1), surf)], sensor, range_atten=50.0))
    d = ray_directions(sensor)
    hit = f.hit_mask
    expect = 0.8 * d[..., 2] * np.exp(-f.range.astype(float) / 50.0)
    np.testing.assert_allclose(f.intensity[hit], expect[hit], rtol=1e-5)
    assert not f.intensity[~hit].any()
    [g] = synth_generate(_spec([Plane((0, 0, 5), (0, 0, -1), SurfaceModel(drop_base=0.5))],
                               sensor, seed=3))
    rate = 1 - g.hit_mask[f.hit_mask].mean()
    assert 0.35 < rate < 0.65


def test_synth_deterministic(rng):
    spec = preset_spec("smoke", seed=5)
    a = [frame_to_bytes(f) for f in synth_generate(spec)]
    b = [frame_to_bytes(f) for f in synth_generate(preset_spec("smoke", seed=5))]
    c = [frame_to_bytes(f) for f in synth_generate(preset_spec("smoke", seed=6))]
    assert a == b and a != c


def test_synth_roundtrip_through_points():
    spec = preset_spec("box_room", n_frames=2)
    frames = synth_generate(spec)
    for f in frames:
        pts, inten = range_to_points(f, spec.sensor)
        g = points_to_range(pts, spec.sensor, f.pose, inten)
        assert np.array_equal(g.hit_mask, f.hit_mask)
        np.testing.assert_allclose(g.range, f.range, rtol=1e-6)


def test_spec_validation_and_yaml(tmp_path):
    with pytest.raises(ValueError):
        _spec([], poses=[np.eye(4), np.eye(4)], ts=[1.0, 1.0])
    spec = preset_spec("box_room_dynamic", n_frames=3)
    d = spec_to_dict(spec)
    back = spec_from_dict(d)
    assert [frame_to_bytes(f) for f in synth_generate(back)] == \
        [frame_to_bytes(f) for f in synth_generate(spec)]
    with pytest.raises(ValueError):
        preset_spec("nope")
