"""Synthetic scenes, camera rigs, test environments and parameter jitter."""

from __future__ import annotations

import math
from typing import List, Optional

import numpy as np

from .lighting import EnvMap
from .scene import N_RGB_SH, GaussianCloud, raw_from_sigma
from .sphmath import (
    SH_C0, fibonacci_directions, normalize, product_gauss_rule, sh_basis, sh_project,
)
from .splatter import Camera

SPHERE_RADIUS = 100.0  # mm
CAMERA_DISTANCE = 400.0
IMAGE_SIZE = 64
FOCAL = 112.0


def _frame_quats(normals):
    """Quaternions (w, x, y, z) rotating +z onto each normal."""
    z = np.array([0.0, 0.0, 1.0])
    n = normalize(normals)
    axis = np.cross(z, n)
    s = np.linalg.norm(axis, axis=-1)
    c = n @ z
    half = 0.5 * np.arctan2(s, c)
    axis = np.where(s[:, None] > 1e-12, axis / np.maximum(s, 1e-300)[:, None], np.array([1.0, 0.0, 0.0]))
    return np.concatenate([np.cos(half)[:, None], np.sin(half)[:, None] * axis], axis=1)


def clamped_cosine_zonal(order: int = 8) -> np.ndarray:
    """Zonal SH coefficients of ``max(0, cos theta)`` about +z (indices m = 0 only)."""
    coeffs = sh_project(lambda d: np.maximum(d[..., 2], 0.0), order, product_gauss_rule(64, 8))
    return np.array([coeffs.coeffs[l * l + l] for l in range(order + 1)])


def clamped_cosine_sh(normals, order: int = 8) -> np.ndarray:
    """SH of ``max(0, n . w)`` for each normal, via zonal rotation; shape (N, (order+1)^2)."""
    z = clamped_cosine_zonal(order)
    Y = sh_basis(normalize(normals), order)
    scale = np.concatenate([np.full(2 * l + 1, math.sqrt(4 * math.pi / (2 * l + 1)) * z[l]) for l in range(order + 1)])
    return Y * scale


def _transfer_fields(sh: np.ndarray, tint: np.ndarray):
    """Split an order-8 transfer into (d_c, d_m) with per-channel tint on the RGB bands."""
    d_c = sh[:, :N_RGB_SH, None] * tint[:, None, :]
    d_m = sh[:, N_RGB_SH:].copy()
    return d_c, d_m


def standard_scene(n: int = 200, seed: int = 0) -> GaussianCloud:
    """Flattened Gaussians on a sphere with cosine transfer and a glossy lobe."""
    rng = np.random.default_rng(seed)
    normals = fibonacci_directions(n)
    positions = SPHERE_RADIUS * normals
    scales = np.tile([10.0, 10.0, 2.0], (n, 1)) * rng.uniform(0.9, 1.1, size=(n, 3))
    # twist each disc about its normal so rotations are generic
    base = _frame_quats(normals)
    twist = rng.uniform(0, 2 * np.pi, n)
    tq = np.stack([np.cos(twist / 2), np.zeros(n), np.zeros(n), np.sin(twist / 2)], axis=1)
    rotations = _quat_mul(base, tq)
    ao = rng.uniform(0.7, 1.0, size=n)
    sh = clamped_cosine_sh(normals) * ao[:, None]
    tint = rng.uniform(0.85, 1.0, size=(n, 3))
    d_c, d_m = _transfer_fields(sh, tint)
    v_view = np.zeros((n, 9))
    v_view[:, 0] = -1.5 / SH_C0
    v_view[:, 1:4] = rng.normal(scale=0.3, size=(n, 3))
    dn_view = rng.normal(scale=0.03, size=(n, 9, 3))
    return GaussianCloud.empty(
        n, positions=positions, rotations=rotations, scales=scales,
        opacity_logits=rng.uniform(1.5, 3.0, size=n), albedo=rng.uniform(0.25, 0.8, size=(n, 3)),
        d_c=d_c, d_m=d_m, rough_raw=raw_from_sigma(rng.uniform(0.2, 0.4, size=n)), n_base=normals,
        dn_view=dn_view, v_view=v_view,
    )


def _quat_mul(a, b):
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


# ---------------------------------------------------------------------------
# Occluder scene: a ground plane shadowed by a floating (invisible) sphere
# ---------------------------------------------------------------------------

OCCLUDER_CENTER = np.array([0.0, 0.0, 45.0])
OCCLUDER_RADIUS = 30.0


def occluder_visibility(points, dirs, center=OCCLUDER_CENTER, radius: float = OCCLUDER_RADIUS):
    """1 where the ray ``p + t d`` (t > 0) misses the occluding sphere; dirs (..., 3) against points (N, 3)."""
    oc = center - points[:, None, :]
    tca = np.sum(oc * dirs, axis=-1)
    d2 = np.sum(oc * oc, axis=-1) - tca * tca
    return ((tca <= 0) | (d2 >= radius * radius)).astype(np.float64)


def occluder_scene(grid: int = 14, extent: float = 70.0, seed: int = 0, shadowed: bool = True) -> GaussianCloud:
    """Plane ``z = 0`` of flat Gaussians whose transfer includes the sphere's shadow (order 8)."""
    rng = np.random.default_rng(seed)
    u = np.linspace(-extent, extent, grid)
    xx, yy = np.meshgrid(u, u, indexing="ij")
    n = grid * grid
    positions = np.stack([xx.ravel(), yy.ravel(), np.zeros(n)], axis=1)
    spacing = u[1] - u[0]
    scales = np.tile([0.6 * spacing, 0.6 * spacing, 1.0], (n, 1))
    rule = product_gauss_rule(96, 192)
    cos_t = np.maximum(rule.dirs[:, 2], 0.0)
    vis = occluder_visibility(positions, rule.dirs[None, :, :]) if shadowed else np.ones((n, rule.dirs.shape[0]))
    Y = sh_basis(rule.dirs, 8) * (rule.weights * cos_t)[:, None]
    sh = vis @ Y
    d_c, d_m = _transfer_fields(sh, np.ones((n, 3)))
    v_view = np.zeros((n, 9))
    v_view[:, 0] = -3.0 / SH_C0
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    return GaussianCloud.empty(
        n, positions=positions, rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), scales=scales,
        opacity_logits=np.full(n, 4.0), albedo=rng.uniform(0.5, 0.8, size=(n, 3)), d_c=d_c, d_m=d_m,
        rough_raw=raw_from_sigma(np.full(n, 0.3)), n_base=normals, v_view=v_view,
    )


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


def camera_rig(n: int, distance: float = CAMERA_DISTANCE, target=(0.0, 0.0, 0.0), size: int = IMAGE_SIZE,
               focal: float = FOCAL, hemisphere: bool = False, seed: int = 0) -> List[Camera]:
    """``n`` cameras on a (randomly rotated) Fibonacci sphere, all looking at ``target``."""
    rng = np.random.default_rng(seed)
    dirs = fibonacci_directions(2 * n if hemisphere else n)
    if hemisphere:
        dirs = dirs[dirs[:, 2] > 0][:n]
        ang = rng.uniform(0, 2 * np.pi)
        c, s = math.cos(ang), math.sin(ang)
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    else:
        R = _random_rotation(rng)
    dirs = dirs @ R.T
    target = np.asarray(target, dtype=np.float64)
    return [Camera.look_at(target + distance * d, target, fx=focal, width=size, height=size) for d in dirs]


def _random_rotation(rng) -> np.ndarray:
    q = normalize(rng.normal(size=4))
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# Parameter jitter
# ---------------------------------------------------------------------------


def jitter(cloud: GaussianCloud, rel: float = 0.1, seed: int = 0) -> GaussianCloud:
    """Perturb every free parameter by roughly ``rel``.

    Magnitudes (scales, albedo, transfer) are scaled by ``1 + rel * N(0,1)``;
    positions move by ``rel`` times the Gaussian's mean scale; angles
    (rotations, base normals) turn by ``rel`` radians about random axes;
    logits and the other unbounded tables get ``rel * N(0,1)`` added.
    """
    rng = np.random.default_rng(seed)
    n = len(cloud)
    out = cloud.copy()
    free = (cloud.frozen & 1) == 0
    step = rel * cloud.scales.mean(axis=1, keepdims=True) * rng.normal(size=(n, 3)) / math.sqrt(3)
    out.positions = cloud.positions + np.where(free[:, None], step, 0.0)
    out.scales = cloud.scales * np.exp(rel * rng.normal(size=(n, 3)))
    out.rotations = normalize(_quat_mul(cloud.rotations, _small_rotation_quats(rng, n, rel)))
    out.opacity_logits = cloud.opacity_logits + rel * rng.normal(size=n)
    out.albedo = np.clip(cloud.albedo * (1 + rel * rng.normal(size=(n, 3))), 0.0, None)
    out.d_c = cloud.d_c * (1 + rel * rng.normal(size=cloud.d_c.shape))
    out.d_m = cloud.d_m * (1 + rel * rng.normal(size=cloud.d_m.shape))
    out.rough_raw = cloud.rough_raw + rel * rng.normal(size=n)
    turned = np.einsum("nij,nj->ni", _quat_mats(_small_rotation_quats(rng, n, rel)), cloud.n_base)
    out.n_base = np.where((cloud.frozen[:, None] & 2) == 0, normalize(turned), cloud.n_base)
    out.v_view = cloud.v_view + rel * rng.normal(size=cloud.v_view.shape)
    out.albedo_view = cloud.albedo_view * (1 + rel * rng.normal(size=cloud.albedo_view.shape))
    out.__post_init__()
    return out


def _small_rotation_quats(rng, n, angle):
    axis = normalize(rng.normal(size=(n, 3)))
    half = 0.5 * angle
    return np.concatenate([np.full((n, 1), math.cos(half)), math.sin(half) * axis], axis=1)


def _quat_mats(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))


# ---------------------------------------------------------------------------
# Test environments
# ---------------------------------------------------------------------------


def sky_radiance(d) -> np.ndarray:
    """Sky gradient over a dim ground, soft horizon and a small bright sun."""
    d = np.asarray(d, dtype=np.float64)
    z = d[..., 2]
    t = (0.5 * (1 + np.tanh(z / 0.05)))[..., None]
    sky = np.stack([0.3 + 0.2 * z, 0.45 + 0.25 * z, 0.9 + 0.3 * z], axis=-1).clip(0)
    base = t * sky + (1 - t) * np.array([0.25, 0.18, 0.12])
    sun = normalize(np.array([0.4, 0.2, 0.6]))
    ang = np.arccos(np.clip(d @ sun, -1, 1))
    return base + (40 * np.exp(-0.5 * (ang / 0.05) ** 2))[..., None] * np.array([1.0, 0.9, 0.7])


def studio_radiance(d) -> np.ndarray:
    """Three soft-edged area lights over a dark room with a striped floor."""
    d = np.asarray(d, dtype=np.float64)
    out = np.full(d.shape, 0.05)
    for c, w, col in (((1, 0, 0.5), 0.25, (8, 7, 6)), ((-0.5, 0.8, 0.3), 0.15, (2, 3, 6)), ((0, -1, 0.9), 0.35, (3, 3, 3))):
        ang = np.arccos(np.clip(d @ normalize(np.array(c, float)), -1, 1))
        out = out + np.array(col) * (0.5 * (1 - np.tanh((ang - w) / 0.03)))[..., None]
    phi = np.arctan2(d[..., 1], d[..., 0])
    stripes = 0.5 + 0.5 * np.sin(12 * phi) * (d[..., 2] < 0)
    return out + 0.2 * stripes[..., None]


def make_test_env(name: str, height: int = 512) -> EnvMap:
    fn = {"sky": sky_radiance, "studio": studio_radiance}[name]
    return EnvMap.from_function(fn, height)
