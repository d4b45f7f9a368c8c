"""Per-Gaussian shading: SH diffuse transfer plus an SG specular lobe.

All shading functions are batched over Gaussians and written in torch so the
fitter can differentiate them.  View direction ``w_o`` points from the
Gaussian centre toward the camera, which makes ``reflect(w_o, n)`` the mirror
direction of the incoming light.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch

from .lighting import LUMA, PointLightPattern, PrefilteredEnv, pattern_sh
from .scene import Group, GaussianCloud, TransferParams, sigma_from_raw
from .sphmath import lobe_rule, sg_constant, sg_integral, sh_basis

_LOG_C = -math.log(math.sqrt(2.0) * math.pi ** (2.0 / 3.0))


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Light context
# ---------------------------------------------------------------------------


@dataclass
class ShadeContext:
    """Light for one frame: order-8 RGB SH for the diffuse term plus exactly one specular source."""

    diffuse_sh: np.ndarray  # (81, 3)
    pattern: Optional[PointLightPattern] = None
    env: Optional[PrefilteredEnv] = field(default=None, repr=False)

    def __post_init__(self):
        self.diffuse_sh = np.array(self.diffuse_sh, dtype=np.float64).reshape(81, 3)
        if (self.pattern is None) == (self.env is None):
            raise ValueError("ShadeContext needs exactly one of a point-light pattern or a prefiltered env")

    @classmethod
    def for_light(cls, light) -> "ShadeContext":
        if isinstance(light, ShadeContext):
            return light
        if isinstance(light, PointLightPattern):
            return cls(pattern_sh(light, 8).coeffs, pattern=light)
        if isinstance(light, PrefilteredEnv):
            if light.sh.order != 8:
                raise ValueError("prefiltered env must carry an order-8 SH projection")
            return cls(light.sh.coeffs, env=light)
        raise TypeError(f"unsupported light type {type(light).__name__}")

    def scaled(self, s: float) -> "ShadeContext":
        if self.pattern is not None:
            return ShadeContext(self.diffuse_sh * s, pattern=self.pattern.scaled(s))
        env = PrefilteredEnv(self.env.sigmas, tuple(l * s for l in self.env.levels),
                             type(self.env.sh)(self.env.sh.order, self.env.sh.coeffs * s), self.env.source_digest)
        return ShadeContext(self.diffuse_sh * s, env=env)


def view_dirs(positions, cam_center) -> torch.Tensor:
    """Unit vectors from each Gaussian centre toward the camera centre."""
    d = _t(cam_center).to(torch.float64) - _t(positions)
    return d / d.norm(dim=-1, keepdim=True)


# ---------------------------------------------------------------------------
# Terms
# ---------------------------------------------------------------------------


def shade_diffuse(albedo, d_c, d_m, light_sh) -> torch.Tensor:
    """``albedo * (sum_{i<16} L_i d_c,i + sum_{16<=i<81} luma(L_i) d_m,i)``; shapes (N,3), (N,16,3), (N,65), (81,3)."""
    return _t(albedo) * diffuse_shading(d_c, d_m, light_sh)


def diffuse_shading(d_c, d_m, light_sh) -> torch.Tensor:
    """The transferred irradiance before the albedo multiply."""
    L = _t(light_sh)
    rgb = torch.einsum("nic,ic->nc", _t(d_c), L[:16])
    mono = _t(d_m) @ (L[16:] @ torch.as_tensor(LUMA))
    return rgb + mono[:, None]


def eval_normal(n_base, dn_view, Yv) -> torch.Tensor:
    """``normalize(n_base + dn(w_o))`` with ``dn`` an order-2 view-SH expansion; degenerate sums fall back to n_base."""
    n_base = _t(n_base)
    n = n_base + torch.einsum("nj,njc->nc", _t(Yv), _t(dn_view))
    norm = n.norm(dim=-1, keepdim=True)
    ok = norm > 1e-6
    fallback = n_base / n_base.norm(dim=-1, keepdim=True)
    return torch.where(ok, n / torch.where(ok, norm, torch.ones_like(norm)), fallback)


def eval_visibility(v_view, Yv) -> torch.Tensor:
    return torch.sigmoid((_t(Yv) * _t(v_view)).sum(-1))


def reflect_t(w_o, n) -> torch.Tensor:
    return 2.0 * (w_o * n).sum(-1, keepdim=True) * n - w_o


def sg_eval_t(p, q, sigma) -> torch.Tensor:
    """Angle-based SG with the angle taken as ``atan2(|p x q|, p . q)`` (finite gradient at p = q)."""
    p, q, sigma = _t(p), _t(q), _t(sigma)
    ang = torch.atan2(torch.linalg.cross(p, q).norm(dim=-1), (p * q).sum(-1))
    return torch.exp(_LOG_C - torch.log(sigma) - 0.5 * (ang / sigma) ** 2)


def shade_specular_point(q, sigma, v, pattern: PointLightPattern) -> torch.Tensor:
    """``v * sum_l I_l G_s(w_l; q, sigma)`` for (N,3) lobe axes, (N,) sigmas and visibilities."""
    q = _t(q)
    dirs = torch.tensor(pattern.directions, dtype=torch.float64)
    inten = torch.tensor(pattern.intensities, dtype=torch.float64)
    g = sg_eval_t(dirs[None, :, :], q[:, None, :], _t(sigma)[:, None])  # (N, L)
    return _t(v)[:, None] * (g @ inten)


def _sample_bilinear_t(img: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Torch twin of ``lighting.sample_bilinear`` (differentiable in ``dirs``)."""
    h, w = img.shape[:2]
    phi = torch.remainder(torch.atan2(dirs[..., 1], dirs[..., 0]), 2 * math.pi)
    theta = torch.atan2(torch.linalg.norm(dirs[..., :2], dim=-1), dirs[..., 2])
    x = phi / (2 * math.pi) * w - 0.5
    y = torch.clamp(theta / math.pi * h - 0.5, 0.0, h - 1.0)
    x0 = torch.floor(x).detach()
    y0 = torch.clamp(torch.floor(y).detach(), max=max(h - 2, 0))
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0i = x0.long()
    y0i = y0.long()
    x0m = torch.remainder(x0i, w)
    x1m = torch.remainder(x0i + 1, w)
    y1i = torch.clamp(y0i + 1, max=h - 1)
    top = img[y0i, x0m] * (1 - fx) + img[y0i, x1m] * fx
    bot = img[y1i, x0m] * (1 - fx) + img[y1i, x1m] * fx
    return top * (1 - fy) + bot * fy


def env_lookup_t(pf: PrefilteredEnv, q, sigma) -> torch.Tensor:
    """Torch version of ``lighting.env_specular_lookup`` (geometric blend in log sigma)."""
    q, sigma = _t(q), _t(sigma)
    sig_levels = torch.as_tensor(pf.sigmas)
    n_lev = len(pf.sigmas)
    log_l = torch.log(sig_levels)
    s_blur = torch.clamp(sigma, float(pf.sigmas[0]), float(pf.sigmas[-1]))
    lo = torch.clamp(torch.searchsorted(log_l, torch.log(s_blur).detach(), right=True) - 1, 0, n_lev - 2)
    t = (torch.log(s_blur) - log_l[lo]) / (log_l[lo + 1] - log_l[lo])
    energy = torch.as_tensor(sg_integral(pf.sigmas))
    samples = torch.stack([_sample_bilinear_t(torch.tensor(lvl), q) / energy[i] for i, lvl in enumerate(pf.levels)])
    rows = torch.arange(q.shape[0])
    a = samples[lo, rows]
    b = samples[lo + 1, rows]
    t = t[:, None]
    pos_ok = (a > 0) & (b > 0)
    la = torch.log(torch.where(pos_ok, a, torch.ones_like(a)))
    lb = torch.log(torch.where(pos_ok, b, torch.ones_like(b)))
    val = torch.where(pos_ok, torch.exp((1 - t) * la + t * lb), (1 - t) * a + t * b)
    return val * _sg_integral_t(sigma)[:, None]


def _sg_integral_t(sigma: torch.Tensor) -> torch.Tensor:
    """Differentiable ``sg_integral`` via fixed Gauss-Legendre nodes on [0, min(pi, 12 sigma)]."""
    x, w = np.polynomial.legendre.leggauss(96)
    x, w = torch.as_tensor(x), torch.as_tensor(w)
    upper = torch.clamp(12.0 * sigma, max=math.pi)[:, None]
    th = 0.5 * upper * (x + 1.0)
    f = torch.exp(_LOG_C - torch.log(sigma)[:, None] - 0.5 * (th / sigma[:, None]) ** 2) * torch.sin(th)
    return 2 * math.pi * 0.5 * upper[:, 0] * (f * w).sum(-1)


def shade_specular_env(q, sigma, v, pf: PrefilteredEnv) -> torch.Tensor:
    return _t(v)[:, None] * env_lookup_t(pf, q, sigma)


# ---------------------------------------------------------------------------
# Whole-cloud shading
# ---------------------------------------------------------------------------


def shade_params(params: Dict[str, torch.Tensor], ctx: ShadeContext, cam_center, parts: bool = False):
    """Shade every Gaussian.  ``params`` holds torch tensors named as the scene fields.

    Returns (N, 3) colors, or a dict with ``color``, ``diffuse``, ``specular``,
    ``albedo``, ``shading`` and ``normal`` when ``parts`` is set.
    """
    ctx = ShadeContext.for_light(ctx)
    w_o = view_dirs(params["positions"], cam_center)
    Yv = sh_basis(w_o, 2)
    groups = params.get("groups")
    albedo = params["albedo"]
    if groups is not None and bool((groups != Group.HEAD).any()):
        eye = (groups != Group.HEAD)[:, None]
        albedo = torch.where(eye, torch.einsum("nj,njc->nc", Yv, params["albedo_view"]), albedo)
    shading = diffuse_shading(params["d_c"], params["d_m"], torch.as_tensor(ctx.diffuse_sh))
    diffuse = albedo * shading
    n = eval_normal(params["n_base"], params["dn_view"], Yv)
    v = eval_visibility(params["v_view"], Yv)
    sigma = sigma_from_raw(params["rough_raw"])
    q = reflect_t(w_o, n)
    if ctx.pattern is not None:
        specular = shade_specular_point(q, sigma, v, ctx.pattern)
    else:
        specular = shade_specular_env(q, sigma, v, ctx.env)
    color = diffuse + specular
    if not parts:
        return color
    return {"color": color, "diffuse": diffuse, "specular": specular, "albedo": albedo, "shading": shading, "normal": n}


def shade(cloud: GaussianCloud, light, cam_center) -> np.ndarray:
    """Per-Gaussian RGB for ``cloud`` seen from ``cam_center``."""
    with torch.no_grad():
        return shade_params(cloud.tensors(), ShadeContext.for_light(light), cam_center).numpy()


def shade_transfer(tp: TransferParams, light, w_o, eye: bool = False) -> Dict[str, np.ndarray]:
    """Shade a single Gaussian's transfer parameters for view direction ``w_o`` (toward the camera)."""
    ctx = ShadeContext.for_light(light)
    w = torch.as_tensor(np.asarray(w_o, dtype=np.float64).reshape(1, 3))
    Yv = sh_basis(w, 2)
    albedo = _t(tp.albedo).reshape(1, 3)
    if eye:
        albedo = torch.einsum("nj,njc->nc", Yv, _t(tp.albedo_view).reshape(1, 9, 3))
    diffuse = albedo * diffuse_shading(_t(tp.d_c)[None], _t(tp.d_m)[None], torch.as_tensor(ctx.diffuse_sh))
    n = eval_normal(_t(tp.n_base)[None], _t(tp.dn_view)[None], Yv)
    v = eval_visibility(_t(tp.v_view)[None], Yv)
    sigma = sigma_from_raw(torch.as_tensor([float(tp.rough_raw)]))
    q = reflect_t(w, n)
    spec = shade_specular_point(q, sigma, v, ctx.pattern) if ctx.pattern is not None else shade_specular_env(q, sigma, v, ctx.env)
    return {"diffuse": diffuse[0].numpy(), "specular": spec[0].numpy(), "color": (diffuse + spec)[0].numpy(),
            "normal": n[0].numpy(), "visibility": float(v[0])}


# ---------------------------------------------------------------------------
# Intrinsics decomposition
# ---------------------------------------------------------------------------

DECOMPOSE_KEYS = ("full", "diffuse", "specular", "albedo", "diffuse_shading", "normal")


def decompose(cloud: GaussianCloud, light, cam) -> Dict[str, np.ndarray]:
    """Render the component images with one shared projection and order.

    The background is black for every component so ``full = diffuse +
    specular``; the normal image maps unit normals to ``(n + 1) / 2``.  An
    ``alpha`` image is included.
    """
    from .splatter import splat_frame

    with torch.no_grad():
        params = cloud.tensors()
        p = shade_params(params, ShadeContext.for_light(light), cam.center, parts=True)
        stacked = torch.cat([p["color"], p["diffuse"], p["specular"], p["albedo"], p["shading"], 0.5 * (p["normal"] + 1.0)], dim=1)
        img, alpha, _, _ = splat_frame(params, stacked, cam, 0.0)
    img = img.numpy()
    out = {k: np.ascontiguousarray(img[..., 3 * i:3 * i + 3]) for i, k in enumerate(DECOMPOSE_KEYS)}
    out["alpha"] = alpha.numpy()
    return out


# ---------------------------------------------------------------------------
# Validation of the factored specular form against a microfacet integral
# ---------------------------------------------------------------------------


def schlick_fresnel(cos_h, f0: float = 0.04):
    return f0 + (1.0 - f0) * (1.0 - np.clip(cos_h, 0.0, 1.0)) ** 5


def smith_g1(cos_t, alpha: float):
    """Smith masking for a GGX-like distribution; 0 below the horizon."""
    c = np.clip(cos_t, 0.0, 1.0)
    return np.where(c > 0, 2.0 * c / (c + np.sqrt(alpha * alpha + (1.0 - alpha * alpha) * c * c)), 0.0)


def microfacet_m_cos(w_o, w_i, n, sigma: float, f0: float = 0.04):
    """``M(w_o, w_i) * max(0, w_i . n)`` with Schlick Fresnel and Smith masking (roughness = sigma)."""
    w_i = np.asarray(w_i, dtype=np.float64)
    cos_i = w_i @ n
    cos_o = float(np.dot(w_o, n))
    h = w_i + w_o
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-300)
    F = schlick_fresnel(np.sum(h * w_o, axis=-1), f0)
    S = smith_g1(cos_i, sigma) * smith_g1(cos_o, sigma)
    # the cos(w_i) in M's denominator cancels the clamped cosine
    return np.where(cos_i > 0, F * S / (math.pi * max(cos_o, 1e-12)), 0.0)


@dataclass
class SGApproxReport:
    sigmas: np.ndarray
    view_angles: np.ndarray  # radians from the normal
    full: np.ndarray  # (n_sigma, n_angle, 3) full integral
    factored: np.ndarray  # (n_sigma, n_angle, 3) v * integral(L G)
    rel_error: np.ndarray  # (n_sigma, n_angle) max over channels

    @property
    def max_error(self) -> float:
        return float(self.rel_error.max())

    @property
    def mean_error(self) -> float:
        return float(self.rel_error.mean())

    def to_dict(self) -> dict:
        return {
            "sigmas": self.sigmas.tolist(), "view_angles": self.view_angles.tolist(),
            "rel_error": self.rel_error.tolist(), "max_error": self.max_error, "mean_error": self.mean_error,
        }


def validate_sg_approx(sigmas: Sequence[float] = (0.02, 0.05, 0.1, 0.2, 0.4, 0.8),
                       view_angles: Sequence[float] = tuple(np.radians([0, 10, 20, 30, 45, 60])),
                       radiance: Optional[Callable] = None, f0: float = 0.04,
                       n_theta: int = 96, n_phi: int = 192) -> SGApproxReport:
    """Compare ``integral L M cos G_s`` with ``v * integral L G_s`` where ``v = M cos`` at the lobe axis.

    The normal is +z and the view direction lies in the xz-plane.  ``radiance``
    maps (..., 3) directions to (..., 3) RGB; the default is a smooth sky.
    Both integrals use the same lobe-concentrated quadrature.
    """
    if radiance is None:
        radiance = _default_radiance
    n = np.array([0.0, 0.0, 1.0])
    sigmas = np.asarray(sigmas, dtype=np.float64)
    angles = np.asarray(view_angles, dtype=np.float64)
    full = np.zeros((len(sigmas), len(angles), 3))
    fact = np.zeros_like(full)
    for a, ang in enumerate(angles):
        w_o = np.array([math.sin(ang), 0.0, math.cos(ang)])
        q = 2.0 * np.dot(w_o, n) * n - w_o
        for s, sigma in enumerate(sigmas):
            rule = lobe_rule(q, float(sigma), n_theta=n_theta, n_phi=n_phi)
            ang_q = np.arccos(np.clip(rule.dirs @ q, -1.0, 1.0))
            g = sg_constant(sigma) * np.exp(-0.5 * (ang_q / sigma) ** 2)
            L = radiance(rule.dirs)
            mc = microfacet_m_cos(w_o, rule.dirs, n, float(sigma), f0)
            full[s, a] = (rule.weights * g * mc) @ L
            v = float(microfacet_m_cos(w_o, q[None], n, float(sigma), f0)[0])
            fact[s, a] = v * ((rule.weights * g) @ L)
    rel = (np.abs(full - fact) / np.maximum(np.abs(full), 1e-300)).max(axis=-1)
    return SGApproxReport(sigmas, angles, full, fact, rel)


def _default_radiance(d):
    d = np.asarray(d, dtype=np.float64)
    z = d[..., 2]
    base = np.stack([0.6 + 0.3 * z, 0.7 + 0.2 * z, 0.9 + 0.1 * z], axis=-1)
    return np.clip(base, 0.05, None)
