"""EWA projection of 3D Gaussians and tile-based front-to-back compositing.

Camera convention is OpenCV: x right, y down, z forward, pixel centres at
integer + 0.5.  Projection and everything upstream run in torch (float64) so
the fitter can differentiate through them; compositing runs in numba with a
hand-written adjoint wrapped as a ``torch.autograd.Function``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from . import _kernels
from .scene import GaussianCloud

COV_EPS = 0.3  # px^2 added to the projected covariance diagonal
NEAR = 0.01  # scene units
TILE = _kernels.TILE


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera: x_c = R x_w + t."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fx: float = 100.0, fy: Optional[float] = None,
                width: int = 64, height: int = 64, cx: Optional[float] = None, cy: Optional[float] = None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            # looking along up: pick any perpendicular
            x = np.cross(z, [1.0, 0.0, 0.0] if abs(z[0]) < 0.9 else [0.0, 1.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(fx, fx if fy is None else fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   width, height, R, -R @ eye)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]),
                   np.array(d["rotation"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def quat_to_rotmat_t(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) quaternions (w, x, y, z), normalized here, to (N, 3, 3)."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


@dataclass
class Projected:
    """Per-Gaussian projection results (torch)."""

    means2d: torch.Tensor  # (N, 2) px
    cov2d: torch.Tensor  # (N, 2, 2) with the eps regularizer
    depths: torch.Tensor  # (N,) camera-space z
    visible: np.ndarray  # (N,) bool
    radii: np.ndarray  # (N, 2) half extents of the 3-sigma box

    @property
    def conics(self) -> torch.Tensor:
        """Inverse covariance as (a, b, c) with inv = [[a, b], [b, c]]."""
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        det = a * c - b * b
        return torch.stack([c / det, -b / det, a / det], dim=-1)


def cov2d_raw(positions, rotations, scales, cam: Camera) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``J W Sigma W^T J^T`` without regularization, plus camera-space points and pixel means."""
    positions = torch.as_tensor(positions, dtype=torch.float64)
    rotations = torch.as_tensor(rotations, dtype=torch.float64)
    scales = torch.as_tensor(scales, dtype=torch.float64)
    W = torch.tensor(np.array(cam.rotation), dtype=positions.dtype)
    t = torch.tensor(np.array(cam.translation), dtype=positions.dtype)
    pc = positions @ W.T + t
    x, y, z = pc.unbind(-1)
    Rg = quat_to_rotmat_t(rotations)
    M = Rg * scales[:, None, :]
    cov3 = M @ M.transpose(1, 2)
    zeros = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([cam.fx / z, zeros, -cam.fx * x / (z * z)], -1),
        torch.stack([zeros, cam.fy / z, -cam.fy * y / (z * z)], -1),
    ], dim=1)
    T = J @ W
    cov2 = T @ cov3 @ T.transpose(1, 2)
    means = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], dim=-1)
    return cov2, pc, means


def project(positions, rotations, scales, cam: Camera, eps: float = COV_EPS, near: float = NEAR) -> Projected:
    """EWA projection of all Gaussians; culls behind ``near`` and fully off-screen footprints."""
    cov2, pc, means = cov2d_raw(positions, rotations, scales, cam)
    cov2 = cov2 + eps * torch.eye(2, dtype=cov2.dtype)
    depth = pc[:, 2]
    with torch.no_grad():
        z = depth.detach().numpy()
        c = cov2.detach().numpy()
        m = means.detach().numpy()
        in_front = z > near
        rx = 3.0 * np.sqrt(np.where(in_front, np.abs(c[:, 0, 0]), 0.0))
        ry = 3.0 * np.sqrt(np.where(in_front, np.abs(c[:, 1, 1]), 0.0))
        on_screen = (m[:, 0] + rx > 0) & (m[:, 0] - rx < cam.width) & (m[:, 1] + ry > 0) & (m[:, 1] - ry < cam.height)
        visible = in_front & on_screen & np.isfinite(m).all(axis=1)
    return Projected(means, cov2, depth, visible, np.stack([rx, ry], axis=-1))


@dataclass
class Splat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha_base: float


def project_gaussian(position, rotation, scale, cam: Camera, color=(1.0, 1.0, 1.0), alpha_base: float = 1.0) -> Optional[Splat]:
    """Project a single Gaussian; ``None`` when culled."""
    p = project(np.asarray(position, float)[None], np.asarray(rotation, float)[None], np.asarray(scale, float)[None], cam)
    if not p.visible[0]:
        return None
    return Splat(p.means2d[0].detach().numpy(), p.cov2d[0].detach().numpy(), float(p.depths[0]),
                 np.asarray(color, dtype=np.float64), float(alpha_base))


def sort_splats(depths) -> np.ndarray:
    """Stable ascending order by depth; NaN depths are rejected."""
    depths = np.asarray(depths, dtype=np.float64)
    bad = np.flatnonzero(np.isnan(depths))
    if bad.size:
        raise ValueError(f"NaN depth at splat index {int(bad[0])}")
    return np.argsort(depths, kind="stable")


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------


def _conics_np(cov2d):
    cov2d = np.asarray(cov2d, dtype=np.float64)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return np.ascontiguousarray(np.stack([c / det, -b / det, a / det], axis=-1))


def _radii_np(cov2d):
    cov2d = np.asarray(cov2d, dtype=np.float64)
    return np.ascontiguousarray(3.0 * np.sqrt(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=-1)))


def _check_inputs(means, colors, opacities, width, height, background):
    if width <= 0 or height <= 0:
        raise ValueError("image must have positive size")
    means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 2)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    if colors.ndim != 2:
        colors = colors.reshape(means.shape[0], -1)
    if colors.shape[0] != means.shape[0]:
        raise ValueError(f"{means.shape[0]} means but {colors.shape[0]} colors")
    opac = np.ascontiguousarray(opacities, dtype=np.float64).reshape(-1)
    bg = np.ascontiguousarray(np.broadcast_to(np.asarray(background, dtype=np.float64), (colors.shape[1],)))
    return means, colors, opac, bg


def rasterize(means2d, cov2d, colors, opacities, width: int, height: int, background=0.0):
    """Tile rasterizer for splats already in front-to-back order.

    Returns ``(color (H, W, C), alpha (H, W))``.
    """
    means, colors, opac, bg = _check_inputs(means2d, colors, opacities, width, height, background)
    offsets, ids = _kernels.bin_splats(means, _radii_np(cov2d), width, height)
    img, trans, _ = _kernels.raster_tiles(means, _conics_np(cov2d), colors, opac, offsets, ids, width, height, bg)
    return img, 1.0 - trans


def rasterize_naive(means2d, cov2d, colors, opacities, width: int, height: int, background=0.0):
    """Reference: every pixel walks the whole ordered list."""
    means, colors, opac, bg = _check_inputs(means2d, colors, opacities, width, height, background)
    img, trans = _kernels.raster_naive(means, _conics_np(cov2d), colors, opac, width, height, bg)
    return img, 1.0 - trans


class RasterizeFunction(torch.autograd.Function):
    """Differentiable tile compositing w.r.t. means, conics, colors and opacities."""

    @staticmethod
    def forward(ctx, means, conics, colors, opacities, radii, width, height, background):
        m = np.ascontiguousarray(means.detach().numpy())
        k = np.ascontiguousarray(conics.detach().numpy())
        c = np.ascontiguousarray(colors.detach().numpy())
        o = np.ascontiguousarray(opacities.detach().numpy())
        bg = np.ascontiguousarray(np.broadcast_to(np.asarray(background, dtype=np.float64), (c.shape[1],)))
        offsets, ids = _kernels.bin_splats(m, np.ascontiguousarray(radii), width, height)
        img, trans, n_walk = _kernels.raster_tiles(m, k, c, o, offsets, ids, width, height, bg)
        ctx.saved = (m, k, c, o, offsets, ids, width, height, bg, trans, n_walk)
        return torch.from_numpy(img), torch.from_numpy(1.0 - trans)

    @staticmethod
    def backward(ctx, g_img, g_alpha):
        m, k, c, o, offsets, ids, width, height, bg, trans, n_walk = ctx.saved
        g_img = np.ascontiguousarray(g_img.numpy(), dtype=np.float64) if g_img is not None else np.zeros(trans.shape + (c.shape[1],))
        g_alpha = np.ascontiguousarray(g_alpha.numpy(), dtype=np.float64) if g_alpha is not None else np.zeros(trans.shape)
        dm, dk, dc, do = _kernels.raster_tiles_backward(m, k, c, o, offsets, ids, width, height, bg, trans, n_walk, g_img, g_alpha)
        return torch.from_numpy(dm), torch.from_numpy(dk), torch.from_numpy(dc), torch.from_numpy(do), None, None, None, None


def rasterize_torch(means, conics, colors, opacities, radii, width: int, height: int, background=0.0):
    """Autograd-aware compositing; inputs must already be in front-to-back order."""
    if width <= 0 or height <= 0:
        raise ValueError("image must have positive size")
    return RasterizeFunction.apply(means, conics, colors, opacities, np.asarray(radii, dtype=np.float64), width, height, background)


def rasterize_dense_torch(means, conics, colors, opacities, width: int, height: int, background=0.0):
    """Plain-torch compositor over all splats (slow; used to check the custom adjoint)."""
    ys, xs = torch.meshgrid(torch.arange(height, dtype=means.dtype) + 0.5, torch.arange(width, dtype=means.dtype) + 0.5, indexing="ij")
    dx = xs[None] - means[:, 0, None, None]
    dy = ys[None] - means[:, 1, None, None]
    q = conics[:, 0, None, None] * dx * dx + 2 * conics[:, 1, None, None] * dx * dy + conics[:, 2, None, None] * dy * dy
    a = torch.where(q > _kernels.CUTOFF_SQ, torch.zeros_like(q), opacities[:, None, None] * torch.exp(-0.5 * q))
    a = torch.clamp(a, max=_kernels.ALPHA_MAX)
    C = colors.shape[1]
    img = torch.zeros(height, width, C, dtype=means.dtype)
    T = torch.ones(height, width, dtype=means.dtype)
    for k in range(means.shape[0]):
        live = (T >= _kernels.T_MIN).to(means.dtype)
        ak = a[k] * live
        img = img + (ak * T)[..., None] * colors[k]
        T = T * (1 - ak)
    bg = torch.as_tensor(np.broadcast_to(np.asarray(background, dtype=np.float64), (C,)).copy(), dtype=means.dtype)
    return img + T[..., None] * bg, 1 - T


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass
class RenderResult:
    image: np.ndarray
    alpha: np.ndarray
    timings: Dict[str, float]
    order: np.ndarray  # Gaussian indices in compositing order


def splat_frame(params: Dict[str, torch.Tensor], colors: torch.Tensor, cam: Camera, background=0.0):
    """Project, sort and composite per-Gaussian colors.  Differentiable.

    ``params`` needs ``positions``, ``rotations``, ``scales`` and
    ``opacity_logits``.  Returns ``(image, alpha, order, timings)``.
    """
    timings = {}
    t0 = time.perf_counter()
    proj = project(params["positions"], params["rotations"], params["scales"], cam)
    t1 = time.perf_counter()
    vis = np.flatnonzero(proj.visible)
    order = vis[sort_splats(proj.depths.detach().numpy()[vis])]
    t2 = time.perf_counter()
    idx = torch.from_numpy(order)
    opac = torch.sigmoid(params["opacity_logits"])
    img, alpha = rasterize_torch(
        proj.means2d[idx], proj.conics[idx], colors[idx], opac[idx], proj.radii[order], cam.width, cam.height, background,
    )
    t3 = time.perf_counter()
    timings.update(project=t1 - t0, sort=t2 - t1, rasterize=t3 - t2)
    return img, alpha, order, timings


def render(cloud: GaussianCloud, light, cam: Camera, background=0.0) -> RenderResult:
    """Shade every Gaussian for ``light`` as seen from ``cam`` and composite.

    ``light`` is a ``PointLightPattern`` or a ``PrefilteredEnv``.
    """
    from .appearance import ShadeContext, shade_params

    with torch.no_grad():
        params = cloud.tensors()
        t0 = time.perf_counter()
        ctx = ShadeContext.for_light(light)
        colors = shade_params(params, ctx, cam.center)
        t1 = time.perf_counter()
        img, alpha, order, timings = splat_frame(params, colors, cam, background)
    timings = {"shade": t1 - t0, **timings}
    return RenderResult(img.numpy(), alpha.numpy(), timings, order)


# ---------------------------------------------------------------------------
# Image output
# ---------------------------------------------------------------------------


def save_image(path, img, exposure: float = 0.0) -> None:
    """Write ``img`` as PFM (linear) or as a gamma-2.2 PNG preview, by extension."""
    from .lighting import write_pfm

    path = str(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        x = np.asarray(img, dtype=np.float64) * (2.0 ** exposure)
        x = np.clip(x, 0.0, 1.0) ** (1 / 2.2)
        Image.fromarray(np.round(x * 255).astype(np.uint8)).save(path)
    else:
        write_pfm(path, img)
