"""Inverse rendering: losses, regularizers, the Adam fitting loop and OLAT datasets."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .appearance import ShadeContext, shade_params
from .lighting import PointLightPattern, make_patterns, read_pfm, write_pfm
from .scene import FREEZE_NORMAL, FREEZE_POSITION, GaussianCloud, Group, load_scene, save_scene
from .splatter import Camera, splat_frame
from .sphmath import SH_C0

# Optimized blocks; scales are optimized in log space.
FIT_FIELDS = (
    "positions", "rotations", "log_scales", "opacity_logits", "albedo", "d_c", "d_m",
    "rough_raw", "n_base", "dn_view", "v_view", "albedo_view",
)


DEFAULT_LR_SCALE = {"d_m": 0.05, "dn_view": 0.1}


class NonFiniteLossError(RuntimeError):
    """Raised when the loss or a gradient becomes NaN/inf; ``block`` names the culprit."""

    def __init__(self, message: str, block: Optional[str] = None, last_good: Optional[GaussianCloud] = None,
                 checkpoint: Optional[str] = None):
        super().__init__(message)
        self.block = block
        self.last_good = last_good
        self.checkpoint = checkpoint


@dataclass
class FitConfig:
    lambda_l1: float = 10.0
    lambda_ssim: float = 0.2
    lambda_scale: float = 1e-2
    lambda_negcolor: float = 1e-2
    lambda_eye_scale: float = 1e-2
    lambda_eye_opacity: float = 1e-4
    lambda_eye_visibility: float = 1e-4
    lambda_anchor: float = 0.0
    lr: float = 5e-4
    lr_final: Optional[float] = None  # exponential decay from lr to lr_final over the run
    # per-block multipliers; the high-order transfer tables are underdetermined by a few
    # dozen lights, so they move slower than the rest (as for higher SH bands in splatting)
    lr_scale: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LR_SCALE))
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    batch_size: int = 16
    iterations: int = 1000
    seed: int = 0
    fixed: Tuple[str, ...] = ()  # blocks kept at their initial value
    background: float = 0.0
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    log_every: int = 0

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_ssim", "lambda_scale", "lambda_negcolor", "lambda_eye_scale",
                     "lambda_eye_opacity", "lambda_eye_visibility", "lambda_anchor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.lr > 0 or (self.lr_final is not None and not self.lr_final > 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        self.fixed = tuple(self.fixed)
        unknown = [f for f in list(self.fixed) + list(self.lr_scale) if f not in FIT_FIELDS]
        if unknown:
            raise ValueError(f"unknown parameter blocks: {unknown}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed"] = list(self.fixed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        d["fixed"] = tuple(d.get("fixed", ()))
        return cls(**d)

    def lr_at(self, iteration: int) -> float:
        if self.lr_final is None or self.iterations <= 1:
            return self.lr
        frac = min(iteration / (self.iterations - 1), 1.0)
        return self.lr * (self.lr_final / self.lr) ** frac


@dataclass
class OLATFrame:
    image: np.ndarray  # (H, W, 3) linear
    camera: Camera
    pattern: PointLightPattern
    camera_index: int = 0
    pattern_index: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(f"image shape {self.image.shape} does not match camera {self.camera.height}x{self.camera.width}")


# ---------------------------------------------------------------------------
# Parameter blocks
# ---------------------------------------------------------------------------


def cloud_to_params(cloud: GaussianCloud) -> Dict[str, torch.Tensor]:
    t = cloud.tensors()
    out = {name: t[name].clone() for name in FIT_FIELDS if name != "log_scales"}
    out["log_scales"] = torch.log(t["scales"])
    return out


def scene_tensors(params: Dict[str, torch.Tensor], groups: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Field dict as expected by shading/projection (natural scales)."""
    d = {k: v for k, v in params.items() if k != "log_scales"}
    d["scales"] = torch.exp(params["log_scales"])
    d["groups"] = groups
    return d


def params_to_cloud(params: Dict[str, torch.Tensor], template: GaussianCloud) -> GaussianCloud:
    arrays = {k: v.detach().clone() for k, v in params.items() if k != "log_scales"}
    arrays["scales"] = torch.exp(params["log_scales"].detach())
    return template.with_arrays(**arrays)


def render_params(params, groups, cam: Camera, light, background=0.0):
    """Differentiable render; returns (image, alpha, per-Gaussian diffuse colors)."""
    fields = scene_tensors(params, groups)
    parts = shade_params(fields, ShadeContext.for_light(light), cam.center, parts=True)
    img, alpha, _, _ = splat_frame(fields, parts["color"], cam, background)
    return img, alpha, parts["diffuse"]


# ---------------------------------------------------------------------------
# Image losses
# ---------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _gauss_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def ssim_map(a, b) -> torch.Tensor:
    """Per-pixel SSIM of (H, W, C) images on the valid region (11x11 Gaussian window, sigma 1.5)."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"image size mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError("images must be at least 11x11 for SSIM")
    g = _gauss_1d()
    C = a.shape[2]
    kx = g.view(1, 1, 1, -1).repeat(C, 1, 1, 1)
    ky = g.view(1, 1, -1, 1).repeat(C, 1, 1, 1)

    def blur(x):
        x = torch.nn.functional.conv2d(x, kx, groups=C)
        return torch.nn.functional.conv2d(x, ky, groups=C)

    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den)[0].permute(1, 2, 0)


def ssim(a, b) -> torch.Tensor:
    return ssim_map(a, b).mean()


def loss_rec(pred, gt, lambda_l1: float = 10.0, lambda_ssim: float = 0.2) -> torch.Tensor:
    """``lambda_l1 * mean|pred - gt| + lambda_ssim * (1 - SSIM) / 2``."""
    pred = torch.as_tensor(pred, dtype=torch.float64)
    gt = torch.as_tensor(gt, dtype=torch.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image size mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    out = lambda_l1 * (pred - gt).abs().mean()
    if lambda_ssim:
        out = out + lambda_ssim * (1.0 - ssim(pred, gt)) / 2.0
    return out


# ---------------------------------------------------------------------------
# Regularizers
# ---------------------------------------------------------------------------


def reg_scale(scales) -> torch.Tensor:
    """Mean over all axes of ``1/s`` below 0.1, ``(s - 10)^2`` above 10, 0 between."""
    s = torch.as_tensor(scales, dtype=torch.float64)
    small = 1.0 / torch.clamp(s, min=1e-7)
    big = (s - 10.0) ** 2
    zero = torch.zeros_like(s)
    return torch.where(s < 0.1, small, torch.where(s > 10.0, big, zero)).mean()


def reg_negcolor(colors) -> torch.Tensor:
    """Mean over all Gaussians and channels of ``min(c, 0)^2``."""
    c = torch.as_tensor(colors, dtype=torch.float64)
    return (torch.clamp(c, max=0.0) ** 2).mean()


def reg_eye(scales, opacity_logits, v_view, groups, lambda_s: float = 1e-2, lambda_o: float = 1e-4,
            lambda_v: float = 1e-4, view_basis=None) -> torch.Tensor:
    """Keep eye Gaussians small and opaque.

    ``o`` is the sigmoid opacity.  ``v`` is the visibility evaluated with
    ``view_basis`` (N, 9) when given, else from the view-independent term.
    Returns 0 when there are no eye Gaussians.
    """
    groups = torch.as_tensor(groups)
    eye = groups != Group.HEAD
    scales = torch.as_tensor(scales, dtype=torch.float64)
    if not bool(eye.any()):
        return scales.sum() * 0.0
    s = scales[eye]
    o = torch.sigmoid(torch.as_tensor(opacity_logits, dtype=torch.float64)[eye])
    vv = torch.as_tensor(v_view, dtype=torch.float64)[eye]
    if view_basis is None:
        v = torch.sigmoid(vv[:, 0] * SH_C0)
    else:
        v = torch.sigmoid((torch.as_tensor(view_basis)[eye] * vv).sum(-1))
    return (lambda_s * (torch.clamp(s - 0.1, min=0.0) ** 2).mean()
            + lambda_o * ((1 - o) ** 2).mean() + lambda_v * ((1 - v) ** 2).mean())


# ---------------------------------------------------------------------------
# Total loss
# ---------------------------------------------------------------------------


def _first_nonfinite(tensors: Dict[str, torch.Tensor]) -> Optional[str]:
    for k, v in tensors.items():
        if v is not None and not bool(torch.isfinite(v).all()):
            return k
    return None


def total_loss(params: Dict[str, torch.Tensor], frames: Sequence[OLATFrame], cfg: FitConfig, groups: torch.Tensor,
               anchor: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Reconstruction loss averaged over ``frames`` plus regularizers.

    Raises ``NonFiniteLossError`` naming the first parameter block with
    non-finite values when the loss is not finite.
    """
    rec = 0.0
    neg = 0.0
    l1_sum = 0.0
    ssim_sum = 0.0
    for f in frames:
        img, _, diffuse = render_params(params, groups, f.camera, f.pattern, cfg.background)
        gt = torch.as_tensor(f.image)
        l1 = (img - gt).abs().mean()
        s = ssim(img, gt) if cfg.lambda_ssim else torch.ones((), dtype=torch.float64)
        rec = rec + cfg.lambda_l1 * l1 + cfg.lambda_ssim * (1 - s) / 2
        if cfg.lambda_negcolor:
            neg = neg + reg_negcolor(diffuse)
        l1_sum += float(l1.detach())
        ssim_sum += float(s.detach())
    nf = max(len(frames), 1)
    loss = rec / nf + cfg.lambda_negcolor * neg / nf
    scales = torch.exp(params["log_scales"])
    if cfg.lambda_scale:
        loss = loss + cfg.lambda_scale * reg_scale(scales)
    loss = loss + reg_eye(scales, params["opacity_logits"], params["v_view"], groups,
                          cfg.lambda_eye_scale, cfg.lambda_eye_opacity, cfg.lambda_eye_visibility)
    if cfg.lambda_anchor and anchor is not None:
        loss = loss + cfg.lambda_anchor * ((params["positions"] - anchor) ** 2).sum(-1).mean()
    if not bool(torch.isfinite(loss)):
        block = _first_nonfinite(params) or "loss"
        raise NonFiniteLossError(f"non-finite loss (parameter block: {block})", block=block)
    return loss, {"loss": float(loss.detach()), "l1": l1_sum / nf, "ssim": ssim_sum / nf}


# ---------------------------------------------------------------------------
# Optimizer loop
# ---------------------------------------------------------------------------


def batch_indices(n_frames: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Frames for ``iteration``: consecutive slices of per-epoch permutations seeded by (seed, epoch)."""
    ks = np.arange(iteration * batch_size, (iteration + 1) * batch_size)
    out = np.empty(batch_size, dtype=np.int64)
    perms = {}
    for i, k in enumerate(ks):
        epoch = int(k // n_frames)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n_frames)
        out[i] = perms[epoch][k % n_frames]
    return out


@dataclass
class FitResult:
    cloud: GaussianCloud
    history: List[dict]
    checkpoint: Optional[str] = None


def _freeze_masks(cloud: GaussianCloud) -> Dict[str, torch.Tensor]:
    pos = torch.as_tensor(((cloud.frozen & FREEZE_POSITION) == 0).astype(np.float64))
    nrm = torch.as_tensor(((cloud.frozen & FREEZE_NORMAL) == 0).astype(np.float64))
    return {"positions": pos[:, None], "n_base": nrm[:, None], "dn_view": nrm[:, None, None]}


def _project_constraints(params):
    with torch.no_grad():
        params["rotations"] /= params["rotations"].norm(dim=-1, keepdim=True)
        params["n_base"] /= params["n_base"].norm(dim=-1, keepdim=True)
        params["albedo"].clamp_(min=0.0)


def save_checkpoint(path, params, template: GaussianCloud, optimizer, iteration: int, history, cfg: FitConfig) -> str:
    path = str(path)
    save_scene(params_to_cloud(params, template), path)
    torch.save({
        "iteration": iteration,
        "params": {k: v.detach().clone() for k, v in params.items()},
        "optimizer": optimizer.state_dict(),
        "history": history,
        "config": cfg.to_dict(),
    }, path + ".state.pt")
    return path


def fit(frames: Sequence[OLATFrame], init: GaussianCloud, cfg: FitConfig, resume: Optional[str] = None,
        callback: Optional[Callable[[int, dict], None]] = None) -> FitResult:
    """Adam on all non-fixed blocks; deterministic given ``cfg.seed`` and the frame order.

    ``resume`` is a checkpoint scene path written by this function (its
    ``.state.pt`` sidecar restores parameters, optimizer moments and history).
    """
    if not frames:
        raise ValueError("dataset is empty")
    template = init.copy()
    params = cloud_to_params(init)
    groups = torch.as_tensor(init.groups.astype(np.int64))
    anchor = params["positions"].detach().clone()
    masks = _freeze_masks(init)
    history: List[dict] = []
    start = 0
    state = None
    if resume is not None:
        state = torch.load(str(resume) + ".state.pt", weights_only=False)
        params = {k: v.clone() for k, v in state["params"].items()}
        history = list(state["history"])
        start = int(state["iteration"])
    trainable = [k for k in FIT_FIELDS if k not in cfg.fixed]
    for k in FIT_FIELDS:
        params[k].requires_grad_(k in trainable)
    for k, m in masks.items():
        if k in trainable:
            params[k].register_hook(lambda g, m=m: g * m)
    groups_opt = [{"params": [params[k]], "lr": cfg.lr * cfg.lr_scale.get(k, 1.0), "name": k} for k in trainable]
    opt = torch.optim.Adam(groups_opt, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    if state is not None:
        opt.load_state_dict(state["optimizer"])
    last_ckpt = str(resume) if resume is not None else None
    last_good = {k: v.detach().clone() for k, v in params.items()}
    for it in range(start, cfg.iterations):
        lr = cfg.lr_at(it)
        for g in opt.param_groups:
            g["lr"] = lr * cfg.lr_scale.get(g["name"], 1.0)
        batch = [frames[i] for i in batch_indices(len(frames), cfg.batch_size, cfg.seed, it)]
        opt.zero_grad(set_to_none=True)
        try:
            loss, info = total_loss(params, batch, cfg, groups, anchor)
        except NonFiniteLossError as e:
            raise NonFiniteLossError(f"iteration {it}: {e}", e.block, params_to_cloud(last_good, template), last_ckpt) from None
        loss.backward()
        bad = _first_nonfinite({k: params[k].grad for k in trainable})
        if bad is not None:
            raise NonFiniteLossError(f"iteration {it}: non-finite gradient in block {bad}", bad,
                                     params_to_cloud(last_good, template), last_ckpt)
        last_good = {k: v.detach().clone() for k, v in params.items()}
        opt.step()
        _project_constraints(params)
        info.update(iteration=it, lr=lr)
        history.append(info)
        if callback is not None:
            callback(it, info)
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            print(f"iter {it:6d}  loss {info['loss']:.6f}  l1 {info['l1']:.6f}  ssim {info['ssim']:.5f}", flush=True)
        if cfg.checkpoint_every and cfg.checkpoint_dir and ((it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.iterations):
            os.makedirs(cfg.checkpoint_dir, exist_ok=True)
            last_ckpt = save_checkpoint(Path(cfg.checkpoint_dir) / f"ckpt_{it + 1:06d}.rgsc", params, template, opt,
                                        it + 1, history, cfg)
    return FitResult(params_to_cloud(params, template), history, last_ckpt)


def save_history_csv(history: Sequence[dict], path) -> None:
    keys = ["iteration", "loss", "l1", "ssim", "lr"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow(row)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

PSNR_CAP = 99.0


def psnr(pred, gt, mask=None) -> float:
    """PSNR on a [0, 1] range; ``mask`` (H, W) selects pixels.  Identical images give 99."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image size mismatch: {pred.shape} vs {gt.shape}")
    d2 = (pred - gt) ** 2
    if mask is not None:
        d2 = d2[np.asarray(mask, dtype=bool)]
    mse = float(d2.mean()) if d2.size else 0.0
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_value(pred, gt, mask=None) -> float:
    """Mean SSIM (same window as the loss); with ``mask`` only window centres inside it count."""
    with torch.no_grad():
        m = ssim_map(pred, gt).numpy()
    if mask is None:
        return float(m.mean())
    r = (SSIM_WINDOW - 1) // 2
    mk = np.asarray(mask, dtype=bool)[r:-r, r:-r]
    if not mk.any():
        return 1.0
    return float(m[mk].mean())


def metrics(pred, gt, mask=None) -> Dict[str, float]:
    return {"psnr": psnr(pred, gt, mask), "ssim": ssim_value(pred, gt, mask)}


def mean_metrics(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], masks=None) -> Dict[str, float]:
    """Average of per-image metrics; PSNR is averaged in dB."""
    vals = [metrics(p, g, None if masks is None else masks[i]) for i, (p, g) in enumerate(pairs)]
    if not vals:
        raise ValueError("no images to evaluate")
    return {"psnr": float(np.mean([v["psnr"] for v in vals])), "ssim": float(np.mean([v["ssim"] for v in vals])),
            "count": len(vals)}


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def synth_dataset(reference: GaussianCloud, n_cams: int = 8, n_lights: int = 64, kind: str = "olat", seed: int = 0,
                  cameras: Optional[Sequence[Camera]] = None, patterns: Optional[Sequence[PointLightPattern]] = None,
                  background: float = 0.0, intensity: float = 1.0) -> List[OLATFrame]:
    """Render ``reference`` for every (camera, pattern) pair, cameras outermost."""
    from .synthetic import camera_rig

    if cameras is None:
        cameras = camera_rig(n_cams, seed=seed)
    if patterns is None:
        patterns = make_patterns(kind, n_lights, seed=seed, intensity=intensity)
    frames = []
    params = cloud_to_params(reference)
    groups = torch.as_tensor(reference.groups.astype(np.int64))
    with torch.no_grad():
        for ci, cam in enumerate(cameras):
            for pi, pat in enumerate(patterns):
                img, _, _ = render_params(params, groups, cam, pat, background)
                frames.append(OLATFrame(img.numpy(), cam, pat, ci, pi))
    return frames


MANIFEST = "manifest.json"


def save_dataset(frames: Sequence[OLATFrame], directory, seed: Optional[int] = None, extra: Optional[dict] = None) -> str:
    """Write PFM images plus a JSON manifest; returns the manifest's sha256."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cams: Dict[int, dict] = {}
    pats: Dict[int, dict] = {}
    entries = []
    for i, f in enumerate(frames):
        name = f"frame_{i:05d}.pfm"
        write_pfm(directory / name, f.image)
        cams.setdefault(f.camera_index, f.camera.to_dict())
        pats.setdefault(f.pattern_index, f.pattern.to_json())
        entries.append({"image": name, "camera": f.camera_index, "pattern": f.pattern_index})
    manifest = {
        "version": 1,
        "seed": seed,
        "cameras": {str(k): v for k, v in sorted(cams.items())},
        "patterns": {str(k): v for k, v in sorted(pats.items())},
        "frames": entries,
    }
    if extra:
        manifest.update(extra)
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (directory / MANIFEST).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_dataset(directory) -> List[OLATFrame]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"{path}: dataset manifest not found")
    m = json.loads(path.read_text())
    cams = {int(k): Camera.from_dict(v) for k, v in m["cameras"].items()}
    pats = {int(k): PointLightPattern.from_json(v) for k, v in m["patterns"].items()}
    frames = []
    for e in m["frames"]:
        frames.append(OLATFrame(read_pfm(directory / e["image"]), cams[e["camera"]], pats[e["pattern"]], e["camera"], e["pattern"]))
    return frames


def split_frames(frames: Sequence[OLATFrame], hold_out_lights: int = 0, hold_out_views: int = 0, seed: int = 0):
    """Split into (train, held_out) by withholding whole light patterns and/or whole cameras."""
    pat_ids = sorted({f.pattern_index for f in frames})
    cam_ids = sorted({f.camera_index for f in frames})
    if hold_out_lights >= len(pat_ids) and hold_out_lights > 0:
        raise ValueError("cannot hold out every light pattern")
    if hold_out_views >= len(cam_ids) and hold_out_views > 0:
        raise ValueError("cannot hold out every view")
    rng = np.random.default_rng([seed, 7])
    lights = set(rng.choice(pat_ids, hold_out_lights, replace=False).tolist()) if hold_out_lights else set()
    views = set(rng.choice(cam_ids, hold_out_views, replace=False).tolist()) if hold_out_views else set()
    train = [f for f in frames if f.pattern_index not in lights and f.camera_index not in views]
    held = [f for f in frames if f.pattern_index in lights or f.camera_index in views]
    return train, held


def evaluate(cloud: GaussianCloud, frames: Sequence[OLATFrame], background: float = 0.0) -> Dict[str, float]:
    """Mean PSNR / SSIM of renders of ``cloud`` against the frames' images."""
    params = cloud_to_params(cloud)
    groups = torch.as_tensor(cloud.groups.astype(np.int64))
    pairs = []
    with torch.no_grad():
        for f in frames:
            img, _, _ = render_params(params, groups, f.camera, f.pattern, background)
            pairs.append((img.numpy(), f.image))
    return mean_metrics(pairs)


__all__ = [
    "DEFAULT_LR_SCALE", "FIT_FIELDS", "FitConfig", "FitResult", "NonFiniteLossError", "OLATFrame", "batch_indices", "cloud_to_params",
    "evaluate", "fit", "load_dataset", "load_scene", "loss_rec", "mean_metrics", "metrics", "params_to_cloud", "psnr",
    "reg_eye", "reg_negcolor", "reg_scale", "render_params", "save_checkpoint", "save_dataset", "save_history_csv",
    "split_frames", "ssim", "ssim_map", "ssim_value", "synth_dataset", "total_loss",
]
