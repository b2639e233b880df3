import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twinzone.channel import (ArrayGeometry, PathComponent, SynthConfig, UserRecord, assemble_channel,
                              channel_matrix, load_scene, measure_pilot, noise_variance, save_scene,
                              scene_from_dict, scene_to_dict, steering_vector, synth_scene,
                              write_channels_csv)

angles = st.floats(-math.pi, math.pi - 1e-9)
elevations = st.floats(-math.pi / 2, math.pi / 2)


def test_broadside_is_uniform():
    g = ArrayGeometry(4, 3)
    a = steering_vector(g, 0.0, 0.0)
    assert np.allclose(a, 1 / math.sqrt(12), atol=1e-15)


def test_hand_evaluated_2x2_endfire():
    # a_h = (1, e^{j pi}), a_v = (1, 1); kron -> (1, 1, -1, -1) / 2
    a = steering_vector(ArrayGeometry(2, 2, 0.5), math.pi / 2, 0.0)
    assert np.allclose(a, np.array([1, 1, -1, -1]) / 2, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(angles, elevations, st.integers(1, 9), st.integers(1, 9))
def test_steering_norm_is_one(az, el, nh, nv):
    a = steering_vector(ArrayGeometry(nh, nv), az, el)
    assert abs(np.linalg.norm(a) - 1) < 1e-12


def test_geometry_validation():
    with pytest.raises(ValueError):
        ArrayGeometry(0, 4)
    with pytest.raises(ValueError):
        ArrayGeometry(4, 4, spacing=0.0)


def test_assemble_single_and_empty():
    g = ArrayGeometry(4, 4)
    p = PathComponent(2 + 0j, 0.3, -0.2)
    h = assemble_channel(g, [p])
    assert np.allclose(h, 2 * steering_vector(g, 0.3, -0.2))
    assert abs(np.linalg.norm(h) - 2) < 1e-12
    assert not np.any(assemble_channel(g, []))


def test_assemble_matches_elementwise_loop():
    rng = np.random.default_rng(3)
    g = ArrayGeometry(4, 3, 0.5)
    paths = [PathComponent(complex(rng.normal(), rng.normal()), rng.uniform(-3, 3), rng.uniform(-1.5, 1.5))
             for _ in range(3)]
    ref = np.zeros(g.n, dtype=complex)
    for p in paths:
        for m in range(g.n_h):
            for n in range(g.n_v):
                phase = 2 * math.pi * 0.5 * (m * math.sin(p.azimuth) * math.cos(p.elevation)
                                             + n * math.sin(p.elevation))
                ref[m * g.n_v + n] += p.gain * complex(math.cos(phase), math.sin(phase)) / math.sqrt(g.n)
    assert np.max(np.abs(assemble_channel(g, paths) - ref)) < 1e-12


def test_linearity_and_vectorised_matrix():
    rng = np.random.default_rng(4)
    g = ArrayGeometry(4, 2)

    def rand_paths(k):
        return [PathComponent(complex(*rng.normal(size=2)), rng.uniform(-3, 3), rng.uniform(-1.5, 1.5))
                for _ in range(k)]

    a, b = rand_paths(3), rand_paths(4)
    assert np.allclose(assemble_channel(g, a + b), assemble_channel(g, a) + assemble_channel(g, b), atol=1e-12)
    users = [UserRecord(0, (0, 0, 0), a), UserRecord(1, (1, 0, 0), []), UserRecord(2, (2, 0, 0), b)]
    H = channel_matrix(g, users)
    for u, h in zip(users, H):
        assert np.allclose(h, assemble_channel(g, u.paths), atol=1e-12)


def test_scene_invariants(small_scene):
    sc = small_scene
    assert [u.id for u in sc.rw_users] == [u.id for u in sc.dt_users]
    assert len(set(u.id for u in sc.rw_users)) == len(sc.rw_users)
    assert all(a.position == b.position for a, b in zip(sc.rw_users, sc.dt_users))
    for u in sc.rw_users + sc.dt_users:
        assert u.paths or u.in_outage
        for p in u.paths:
            assert -math.pi <= p.azimuth < math.pi
            assert -math.pi / 2 <= p.elevation <= math.pi / 2
    assert max(len(u.paths) for u in sc.rw_users) <= 25
    assert max(len(u.paths) for u in sc.dt_users) <= 1


def test_dt_keeps_strongest_path(small_scene):
    for rw, dt in zip(small_scene.rw_users, small_scene.dt_users):
        mags = [abs(p.gain) for p in rw.paths]
        assert mags == sorted(mags, reverse=True)
        assert len(dt.paths) == 1


def test_zero_degradation_reproduces_rw():
    cfg = SynthConfig(user_count=50, n_h=4, n_v=4, angle_jitter_std=0.0, gain_jitter_db=0.0,
                      max_paths_dt=25, max_paths_rw=25)
    sc = synth_scene(cfg, np.random.default_rng(0))
    assert np.array_equal(sc.rw_channels(), sc.dt_channels())


def test_jitter_statistics():
    cfg = SynthConfig(user_count=10_000, n_h=2, n_v=2, angle_jitter_std=0.05, scatterer_count=20,
                      chains_per_order=1, max_order=1)
    sc = synth_scene(cfg, np.random.default_rng(1))
    d = np.array([dt.paths[0].azimuth - rw.paths[0].azimuth for rw, dt in zip(sc.rw_users, sc.dt_users)])
    d = (d + math.pi) % (2 * math.pi) - math.pi
    assert abs(d.std() - 0.05) < 0.05 * 0.05


def test_scene_determinism():
    cfg = SynthConfig(user_count=40, n_h=4, n_v=2)
    a = synth_scene(cfg, np.random.default_rng(9))
    b = synth_scene(cfg, np.random.default_rng(9))
    assert json.dumps(scene_to_dict(a)) == json.dumps(scene_to_dict(b))


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(max_paths_dt=5, max_paths_rw=2)
    with pytest.raises(ValueError):
        SynthConfig(angle_jitter_std=-0.1)
    with pytest.raises(ValueError):
        synth_scene(SynthConfig(site_extent=0.0), np.random.default_rng(0))
    with pytest.raises(ValueError):
        synth_scene(SynthConfig(user_count=0), np.random.default_rng(0))


def test_noiseless_pilot_is_exact():
    g = ArrayGeometry(4, 2)
    h = assemble_channel(g, [PathComponent(1 + 1j, 0.2, 0.1)])
    f = steering_vector(g, 0.25, 0.05)
    assert measure_pilot(h, f, math.inf, np.random.default_rng(0)) == complex(np.vdot(f, h))
    assert noise_variance(h, math.inf) == 0.0


def test_pilot_noise_variance():
    rng = np.random.default_rng(5)
    g = ArrayGeometry(4, 4)
    h = assemble_channel(g, [PathComponent(3 + 0j, 0.4, -0.3), PathComponent(1j, -0.7, 0.2)])
    f = steering_vector(g, 0.4, -0.3)
    var = np.linalg.norm(h) ** 2 * 10 ** (-10 / 10) / g.n
    assert math.isclose(noise_variance(h, 10.0), var)
    y0 = np.vdot(f, h)
    e = np.array([measure_pilot(h, f, 10.0, rng) for _ in range(100_000)]) - y0
    assert abs(np.mean(np.abs(e) ** 2) - var) < 0.02 * var


def test_json_and_csv_roundtrip(tmp_path, small_scene):
    path = tmp_path / "scene.json"
    save_scene(small_scene, path)
    back = load_scene(path)
    assert np.array_equal(back.rw_channels(), small_scene.rw_channels())
    assert np.array_equal(back.dt_channels(), small_scene.dt_channels())
    assert back.seed == small_scene.seed and back.geometry == small_scene.geometry
    assert scene_from_dict(scene_to_dict(back)).ids.tolist() == small_scene.ids.tolist()
    csv_path = tmp_path / "ch.csv"
    write_channels_csv(csv_path, small_scene.ids[:3], small_scene.rw_channels()[:3])
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "id,element,re,im"
    assert len(lines) == 1 + 3 * small_scene.geometry.n
    uid, m, re, im = lines[5].split(",")
    assert complex(float(re), float(im)) == small_scene.rw_channels()[int(uid), int(m)]
