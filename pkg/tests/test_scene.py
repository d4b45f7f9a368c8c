import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgsplat.scene import (
    FREEZE_NORMAL, FREEZE_POSITION, SIGMA_MAX, SIGMA_MIN, EyeballParams, GaussianCloud, Group, SceneFormatError,
    apply_eye_constraints, covariance, eye_field, eye_surface_along, eyeball_surface, export_json, load_scene, quat_to_rotmat,
    raw_from_sigma, save_scene, sigma_from_raw,
)


def random_cloud(n, seed=0, eyes=False):
    rng = np.random.default_rng(seed)
    kw = dict(
        positions=rng.normal(size=(n, 3)), rotations=rng.normal(size=(n, 4)),
        scales=rng.uniform(0.01, 3, (n, 3)), opacity_logits=rng.normal(size=n), albedo=rng.uniform(0, 1, (n, 3)),
        d_c=rng.normal(size=(n, 16, 3)), d_m=rng.normal(size=(n, 65)), rough_raw=rng.normal(size=n),
        n_base=rng.normal(size=(n, 3)), dn_view=rng.normal(size=(n, 9, 3)), v_view=rng.normal(size=(n, 9)),
        albedo_view=rng.normal(size=(n, 9, 3)),
    )
    kw["rotations"] /= np.linalg.norm(kw["rotations"], axis=1, keepdims=True)
    kw["n_base"] /= np.linalg.norm(kw["n_base"], axis=1, keepdims=True)
    if eyes:
        groups = rng.integers(0, 3, n).astype(np.uint8)
        kw.update(groups=groups, eye_left=EyeballParams(12.0, 8.0, 5.5, [-30, 0, 0], [0, -1, 0]),
                  eye_right=EyeballParams(12.0, 8.0, 5.5, [30, 0, 0], [0.1, -1, 0]))
    return GaussianCloud.empty(n, **kw)


def test_covariance_examples():
    np.testing.assert_allclose(covariance([1, 0, 0, 0], [1, 2, 3]), np.diag([1.0, 4, 9]), atol=1e-15)
    q = np.array([0.3, -0.2, 0.9, 0.1])
    q /= np.linalg.norm(q)
    np.testing.assert_allclose(covariance(q, [2.0, 2.0, 2.0]), 4 * np.eye(3), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(q=st.tuples(*[st.floats(-1, 1)] * 4).filter(lambda v: np.linalg.norm(v) > 0.1),
       s=st.tuples(*[st.floats(1e-3, 1e3)] * 3))
def test_covariance_spd_with_scale_eigenvalues(q, s):
    q = np.array(q) / np.linalg.norm(q)
    S = covariance(q, s)
    np.testing.assert_allclose(S, S.T, rtol=0, atol=1e-9 * max(s) ** 2)
    ev = np.linalg.eigvalsh(S)
    assert ev.min() > 0
    # eigvalsh error scales with the largest eigenvalue
    np.testing.assert_allclose(np.sort(ev), np.sort(np.square(s)), rtol=1e-6, atol=1e-12 * max(s) ** 2)


def test_quat_to_rotmat_orthonormal():
    q = np.array([0.5, 0.5, -0.5, 0.5])
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_sigma_mapping_range_and_inverse():
    raw = np.linspace(-30, 30, 101)
    s = sigma_from_raw(raw)
    assert s.min() >= SIGMA_MIN and s.max() <= SIGMA_MAX
    mid = np.array([0.05, 0.2, 0.7])
    np.testing.assert_allclose(sigma_from_raw(raw_from_sigma(mid)), mid, rtol=1e-12)


def test_cloud_validates_shapes_and_scales():
    with pytest.raises(ValueError):
        GaussianCloud.empty(3, positions=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        GaussianCloud.empty(2, scales=np.array([[1.0, 1, 1], [1, 0, 1]]))
    with pytest.raises(ValueError):
        GaussianCloud.empty(2, groups=np.array([0, 1], np.uint8))


def test_gaussian_view_and_transfer():
    c = random_cloud(4, eyes=True)
    g = c[1]
    np.testing.assert_allclose(g.covariance, covariance(c.rotations[1], c.scales[1]))
    tp = c.transfer(1)
    assert (tp.albedo_view is None) == (c.groups[1] == Group.HEAD)
    assert SIGMA_MIN <= tp.sigma <= SIGMA_MAX


def test_scene_roundtrip_bit_exact(tmp_path):
    c = random_cloud(1000, seed=3, eyes=True)
    c.frozen[:10] = 3
    p = tmp_path / "a.rgsc"
    save_scene(c, p)
    d = load_scene(p)
    assert c.equals(d)
    assert d.eye_left.to_array().tobytes() == c.eye_left.to_array().tobytes()


def test_scene_f32_is_lossy_but_close(tmp_path):
    c = random_cloud(50, seed=4)
    p = tmp_path / "a.rgsc"
    save_scene(c, p, precision="f32")
    d = load_scene(p)
    np.testing.assert_allclose(d.positions, c.positions, rtol=1e-6)


def test_scene_nan_names_index(tmp_path):
    c = random_cloud(10)
    c.opacity_logits[7] = np.nan
    p = tmp_path / "bad.rgsc"
    save_scene(c, p)
    with pytest.raises(SceneFormatError, match="opacity_logits at Gaussian index 7"):
        load_scene(p)


def test_scene_unknown_version_and_truncation(tmp_path):
    c = random_cloud(5)
    p = tmp_path / "a.rgsc"
    save_scene(c, p)
    data = bytearray(p.read_bytes())
    struct.pack_into("<I", data, 4, 99)
    (tmp_path / "v99.rgsc").write_bytes(bytes(data))
    with pytest.raises(SceneFormatError, match="version 99"):
        load_scene(tmp_path / "v99.rgsc")
    (tmp_path / "short.rgsc").write_bytes(p.read_bytes()[:200])
    with pytest.raises(SceneFormatError, match="truncated"):
        load_scene(tmp_path / "short.rgsc")
    (tmp_path / "magic.rgsc").write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(SceneFormatError, match="magic"):
        load_scene(tmp_path / "magic.rgsc")


def test_export_json(tmp_path):
    import json

    export_json(random_cloud(3), tmp_path / "a.json")
    doc = json.loads((tmp_path / "a.json").read_text())
    assert isinstance(doc, dict)


EYE = EyeballParams(12.0, 8.0, 5.5, [1.0, 2.0, 3.0], [0.0, 0.0, 1.0])


def test_eyeball_pure_sphere_limit():
    eye = EyeballParams(12.0, 0.0, 0.0, [0, 0, 0], [0, 0, 1])
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        pos, nrm = eyeball_surface(eye, 200)
    assert any(issubclass(x.category, RuntimeWarning) for x in w)
    np.testing.assert_allclose(np.linalg.norm(pos, axis=1), 12.0, atol=1e-12)
    np.testing.assert_allclose(nrm, pos / 12.0, atol=1e-12)


def test_eyeball_cornea_apex():
    pos, nrm = eye_surface_along(EYE, EYE.gaze[None])
    assert np.linalg.norm(pos[0] - EYE.cornea_center) == pytest.approx(EYE.r_c, abs=1e-6)
    np.testing.assert_allclose(nrm[0], EYE.gaze, atol=1e-9)


def test_eyeball_normals_match_finite_difference_gradient():
    pos, nrm = eyeball_surface(EYE, 300)
    np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-12)
    h = 1e-6
    grad = np.zeros_like(pos)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[:, k] = (eye_field(EYE, pos + e)[0] - eye_field(EYE, pos - e)[0]) / (2 * h)
    grad /= np.linalg.norm(grad, axis=1, keepdims=True)
    assert np.abs(grad - nrm).max() <= 1e-4
    assert np.abs(eye_field(EYE, pos)[0]).max() <= 1e-6


def test_gaze_rotation_rotates_cornea():
    from rgsplat.sphmath import rotation_matrix

    R = rotation_matrix([1.0, 0, 0], 0.4)
    eye2 = EYE.with_gaze(R @ EYE.gaze)
    pos, _ = eyeball_surface(EYE, 200)
    rotated = (pos - EYE.center) @ R.T + EYE.center
    assert np.abs(eye_field(eye2, rotated)[0]).max() <= 1e-6


def test_eyeball_params_validation():
    with pytest.raises(ValueError):
        EyeballParams(0.0, 1.0, 0.0, [0, 0, 0], [0, 0, 1])
    with pytest.raises(ValueError):
        EyeballParams(10.0, 5.0, 10.0, [0, 0, 0], [0, 0, 1])


def test_apply_eye_constraints():
    c = random_cloud(60, seed=5, eyes=True)
    c.positions[c.groups == Group.LEFT_EYE] += c.eye_left.center
    c.positions[c.groups == Group.RIGHT_EYE] += c.eye_right.center
    out = apply_eye_constraints(c)
    head = c.groups == Group.HEAD
    for name in ("positions", "n_base", "dn_view", "d_m"):
        assert getattr(out, name)[head].tobytes() == getattr(c, name)[head].tobytes()
    for g in (Group.LEFT_EYE, Group.RIGHT_EYE):
        idx = out.groups == g
        assert np.abs(eye_field(out.eye(g), out.positions[idx])[0]).max() <= 1e-6
        assert np.all(out.dn_view[idx] == 0)
        assert np.all(out.frozen[idx] == FREEZE_POSITION | FREEZE_NORMAL)
    assert apply_eye_constraints(out).equals(out)
