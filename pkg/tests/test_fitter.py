import math

import numpy as np
import pytest
import torch

from rgsplat.fitter import (
    FIT_FIELDS, FitConfig, NonFiniteLossError, OLATFrame, batch_indices, cloud_to_params, evaluate, fit, load_dataset,
    loss_rec, params_to_cloud, psnr, reg_eye, reg_negcolor, reg_scale, save_dataset, save_history_csv, split_frames,
    ssim, ssim_value, synth_dataset, total_loss,
)
from rgsplat.lighting import make_patterns
from rgsplat.scene import FREEZE_NORMAL, FREEZE_POSITION, EyeballParams, Group, load_scene
from rgsplat.sphmath import SH_C0
from rgsplat.synthetic import camera_rig, jitter, standard_scene


def small_reference(n=8, seed=2):
    ref = standard_scene(n, seed=seed).copy()
    ref.groups[:2] = Group.LEFT_EYE
    ref.eye_left = EyeballParams(12.0, 8.0, 5.5, [0, 0, 0], [0, 0, 1])
    ref.albedo_view[:2, 0] = np.array([0.5, 0.4, 0.3]) / SH_C0
    ref.__post_init__()
    return ref


@pytest.fixture(scope="module")
def tiny():
    ref = small_reference()
    cams = camera_rig(2, seed=2, size=24, focal=40.0)
    frames = synth_dataset(ref, cameras=cams, patterns=make_patterns("olat", 3, seed=2))
    return ref, frames


# --- regularizers -----------------------------------------------------------


def test_reg_scale_examples():
    assert float(reg_scale(torch.tensor([[0.05]]))) == pytest.approx(20.0)
    assert float(reg_scale(torch.tensor([[12.0]]))) == pytest.approx(4.0)
    assert float(reg_scale(torch.tensor([[0.1, 1.0, 10.0]]))) == 0.0
    assert float(reg_scale(torch.tensor([[0.05, 1.0, 12.0]]))) == pytest.approx(24.0 / 3)


def test_reg_negcolor_example():
    n = 7
    c = torch.ones(n, 3, dtype=torch.float64)
    c[3, 1] = -0.5
    assert float(reg_negcolor(c)) == pytest.approx(0.25 / (3 * n), rel=1e-12)
    assert float(reg_negcolor(torch.ones(4, 3))) == 0.0


def test_reg_eye_cases():
    groups = torch.tensor([0, 0])
    assert float(reg_eye(torch.ones(2, 3), torch.zeros(2), torch.zeros(2, 9), groups)) == 0.0
    groups = torch.tensor([0, 1])
    vv = torch.zeros(2, 9, dtype=torch.float64)
    vv[:, 0] = 1e3
    ideal = reg_eye(torch.full((2, 3), 0.1), torch.full((2,), 50.0), vv, groups)
    assert float(ideal) == pytest.approx(0.0, abs=1e-15)
    big = reg_eye(torch.tensor([[1.0] * 3, [0.2] * 3], dtype=torch.float64), torch.full((2,), 50.0), vv, groups, lambda_s=1.0)
    assert float(big) == pytest.approx(0.01, rel=1e-9)
    half = reg_eye(torch.full((2, 3), 0.1), torch.zeros(2), vv, groups, lambda_o=1.0)
    assert float(half) == pytest.approx(0.25)
    basis = torch.zeros(2, 9, dtype=torch.float64)
    basis[:, 0] = -1.0
    flipped = reg_eye(torch.full((2, 3), 0.1), torch.full((2,), 50.0), vv, groups, lambda_v=1.0, view_basis=basis)
    assert float(flipped) == pytest.approx(1.0)


# --- image losses and metrics ---------------------------------------------------


def test_ssim_matches_skimage():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, (32, 40, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    ref = skm.structural_similarity(a, b, channel_axis=2, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=1.0)
    assert float(ssim(a, b)) == pytest.approx(ref, abs=1e-6)


def test_ssim_symmetry_and_identity():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (16, 16, 3))
    b = rng.uniform(0, 1, (16, 16, 3))
    assert float(ssim(a, b)) == pytest.approx(float(ssim(b, a)), abs=1e-14)
    assert float(ssim(a, a)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        ssim(a, a[:-1])
    with pytest.raises(ValueError):
        ssim(a[:8, :8], a[:8, :8])


def test_loss_rec_values():
    a = np.full((12, 12, 3), 0.5)
    assert float(loss_rec(a, a)) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_rec(a + 0.1, a, lambda_ssim=0.0)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        loss_rec(a, a[:, :-1])


def test_psnr_values():
    a = np.full((8, 8, 3), 0.4)
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    assert psnr(a, a) == 99.0
    mask = np.zeros((8, 8), bool)
    mask[:2] = True
    b = a.copy()
    b[4:] += 0.5
    assert psnr(b, a, mask) == 99.0
    with pytest.raises(ValueError):
        psnr(a, a[1:])


def test_ssim_value_mask():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, (24, 24, 3))
    b = a.copy()
    b[:, 12:] = rng.uniform(0, 1, (24, 12, 3))
    m = np.zeros((24, 24), bool)
    m[:, :6] = True  # window centres there never see the right half
    assert ssim_value(b, a, m) == pytest.approx(1.0, abs=1e-12)
    assert ssim_value(b, a) < 0.9


# --- config and batching --------------------------------------------------------


def test_fit_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        FitConfig(lambda_l1=-1)
    with pytest.raises(ValueError):
        FitConfig(fixed=("colour",))
    with pytest.raises(ValueError):
        FitConfig(lr=0)
    cfg = FitConfig(fixed=["d_m"], lr_scale={"dn_view": 0.1}, lr_final=5e-5, iterations=11)
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.lr_at(0) == pytest.approx(5e-4)
    assert cfg.lr_at(10) == pytest.approx(5e-5)
    assert cfg.lr_at(5) == pytest.approx(math.sqrt(5e-4 * 5e-5))


def test_batch_indices_cover_each_epoch():
    seen = np.concatenate([batch_indices(10, 4, 3, it) for it in range(5)])
    assert sorted(seen[:10]) == list(range(10))
    assert sorted(seen[10:20]) == list(range(10))
    np.testing.assert_array_equal(batch_indices(10, 4, 3, 2), batch_indices(10, 4, 3, 2))
    assert not np.array_equal(batch_indices(10, 4, 3, 0), batch_indices(10, 4, 4, 0))


def test_olat_frame_checks_shape():
    cam = camera_rig(1, size=16, focal=30.0)[0]
    with pytest.raises(ValueError):
        OLATFrame(np.zeros((15, 16, 3)), cam, make_patterns("olat", 1)[0])


# --- gradients ----------------------------------------------------------------------


def test_gradients_match_finite_differences(tiny):
    ref, frames = tiny
    init = jitter(ref, 0.2, seed=5)
    cfg = FitConfig(lambda_scale=1e-2, lambda_eye_scale=1.0, lambda_eye_opacity=1.0, lambda_eye_visibility=1.0)
    groups = torch.as_tensor(init.groups.astype(np.int64))
    params = cloud_to_params(init)
    for v in params.values():
        v.requires_grad_(True)
    loss, _ = total_loss(params, frames, cfg, groups)
    loss.backward()
    eps = 1e-6
    for name in FIT_FIELDS:
        g = params[name].grad.reshape(-1)
        assert torch.isfinite(g).all(), name
        for k in torch.argsort(g.abs(), descending=True)[:2].tolist():
            vals = []
            for s in (1, -1):
                p2 = {n: v.detach().clone() for n, v in params.items()}
                p2[name].view(-1)[k] += s * eps
                vals.append(float(total_loss(p2, frames, cfg, groups)[0]))
            fd = (vals[0] - vals[1]) / (2 * eps)
            assert fd == pytest.approx(float(g[k]), rel=1e-3, abs=1e-7), (name, k)


def test_reference_is_stationary(tiny):
    ref, frames = tiny
    cfg = FitConfig(lambda_scale=0.0, lambda_negcolor=0.0, lambda_eye_scale=0.0, lambda_eye_opacity=0.0,
                    lambda_eye_visibility=0.0)
    groups = torch.as_tensor(ref.groups.astype(np.int64))
    params = cloud_to_params(ref)
    for v in params.values():
        v.requires_grad_(True)
    loss, _ = total_loss(params, frames, cfg, groups)
    loss.backward()
    assert float(loss) == pytest.approx(0.0, abs=1e-12)
    for name in FIT_FIELDS:
        assert params[name].grad.abs().max() <= 1e-8, name


def test_nonfinite_loss_names_block(tiny):
    ref, frames = tiny
    params = cloud_to_params(ref)
    params["rough_raw"][3] = float("nan")
    with pytest.raises(NonFiniteLossError) as err:
        total_loss(params, frames[:1], FitConfig(), torch.as_tensor(ref.groups.astype(np.int64)))
    assert err.value.block == "rough_raw"
    assert "rough_raw" in str(err.value)


# --- optimization loop ------------------------------------------------------------------


def test_fit_deterministic_and_decreasing(tiny):
    ref, frames = tiny
    init = jitter(ref, 0.2, seed=5)
    cfg = FitConfig(iterations=25, batch_size=2, lr=2e-3, seed=4)
    a = fit(frames, init, cfg)
    b = fit(frames, init, cfg)
    assert a.cloud.equals(b.cloud)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    assert evaluate(a.cloud, frames)["psnr"] > evaluate(init, frames)["psnr"]


def test_fit_resume_matches_uninterrupted(tiny, tmp_path):
    ref, frames = tiny
    init = jitter(ref, 0.2, seed=6)
    cfg = FitConfig(iterations=8, batch_size=2, lr=2e-3, seed=1, checkpoint_every=4, checkpoint_dir=str(tmp_path))
    full = fit(frames, init, cfg)
    assert (tmp_path / "ckpt_000004.rgsc").exists()
    resumed = fit(frames, init, cfg, resume=str(tmp_path / "ckpt_000004.rgsc"))
    for name in ("positions", "d_c", "d_m", "v_view", "scales"):
        np.testing.assert_allclose(getattr(resumed.cloud, name), getattr(full.cloud, name), atol=1e-6, rtol=0)
    assert len(resumed.history) == 8
    assert load_scene(full.checkpoint).equals(full.cloud)


def test_fit_freezes_masked_and_fixed_blocks(tiny):
    ref, frames = tiny
    init = jitter(ref, 0.2, seed=7).copy()
    init.frozen[:3] = FREEZE_POSITION | FREEZE_NORMAL
    init.frozen[3] = FREEZE_POSITION
    out = fit(frames, init, FitConfig(iterations=100, batch_size=1, lr=5e-3, fixed=("d_m",))).cloud
    assert out.positions[:4].tobytes() == init.positions[:4].tobytes()
    assert out.n_base[:3].tobytes() == init.n_base[:3].tobytes()
    assert out.dn_view[:3].tobytes() == init.dn_view[:3].tobytes()
    assert out.d_m.tobytes() == init.d_m.tobytes()
    assert not np.array_equal(out.positions[4:], init.positions[4:])
    assert not np.array_equal(out.n_base[3], init.n_base[3])


def test_params_roundtrip_through_cloud(tiny):
    ref, _ = tiny
    back = params_to_cloud(cloud_to_params(ref), ref)
    np.testing.assert_allclose(back.scales, ref.scales, rtol=1e-15)
    assert back.d_c.tobytes() == ref.d_c.tobytes()


def test_history_csv(tmp_path):
    save_history_csv([{"iteration": 0, "loss": 1.5, "l1": 0.1, "ssim": 0.9, "lr": 1e-3}], tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,l1,ssim,lr"
    assert lines[1].startswith("0,1.5,")


# --- datasets ---------------------------------------------------------------------------


def test_dataset_roundtrip_and_hash(tiny, tmp_path):
    _, frames = tiny
    h1 = save_dataset(frames, tmp_path / "a", seed=3)
    h2 = save_dataset(frames, tmp_path / "b", seed=3)
    assert h1 == h2
    back = load_dataset(tmp_path / "a")
    assert len(back) == len(frames)
    for f, g in zip(frames, back):
        np.testing.assert_array_equal(g.image, f.image.astype(np.float32))
        assert g.camera.to_dict() == f.camera.to_dict()
        np.testing.assert_array_equal(g.pattern.directions, f.pattern.directions)
        assert (g.camera_index, g.pattern_index) == (f.camera_index, f.pattern_index)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_split_frames(tiny):
    _, frames = tiny
    train, held = split_frames(frames, hold_out_lights=1, seed=0)
    assert len(train) + len(held) == len(frames)
    assert len({f.pattern_index for f in held}) == 1
    assert not {f.pattern_index for f in held} & {f.pattern_index for f in train}
    train, held = split_frames(frames, hold_out_views=1)
    assert len(held) == 3
    with pytest.raises(ValueError):
        split_frames(frames, hold_out_lights=3)


def test_evaluate_reference_is_perfect(tiny):
    ref, frames = tiny
    m = evaluate(ref, frames)
    assert m["psnr"] == 99.0 and m["ssim"] == pytest.approx(1.0) and m["count"] == len(frames)
