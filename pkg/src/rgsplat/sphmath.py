"""Real spherical harmonics, angle-based spherical Gaussians and sphere quadrature.

SH index convention (used everywhere in the package): coefficient ``i`` holds
``Y_l^m`` with ``i = l*l + l + m``, ``l`` ascending and ``m = -l..l``.  The
basis is real and orthonormal, without the Condon-Shortley phase, so that

    Y_1^-1 = c*y,  Y_1^0 = c*z,  Y_1^1 = c*x,   c = sqrt(3 / 4pi).

Functions taking direction arrays accept any leading batch shape ``(..., 3)``.
``sh_basis`` also accepts torch tensors and is differentiable in that case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

MAX_SH_ORDER = 8
SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))


def num_coeffs(order: int) -> int:
    return (order + 1) ** 2


def sh_index(l: int, m: int) -> int:
    return l * l + l + m


def normalize(v, eps: float = 0.0):
    """Normalize the last axis of ``v`` (numpy)."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps) if eps else v / n


def _norm_const(l: int, m: int) -> float:
    return math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


def sh_basis(dirs, order: int):
    """Evaluate all real SH basis functions up to ``order`` at unit ``dirs``.

    Returns an array of shape ``dirs.shape[:-1] + ((order+1)**2,)``.  Works for
    numpy arrays and torch tensors (same type out as in).
    """
    if not 0 <= order <= MAX_SH_ORDER:
        raise ValueError(f"SH order must be in [0, {MAX_SH_ORDER}], got {order}")
    is_torch = isinstance(dirs, torch.Tensor)
    if not is_torch:
        dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    one = z * 0 + 1

    # cos(m phi) sin^m(theta) and sin(m phi) sin^m(theta) as polynomials in x, y
    cs = [one]
    sn = [z * 0]
    for m in range(1, order + 1):
        c_prev, s_prev = cs[-1], sn[-1]
        cs.append(x * c_prev - y * s_prev)
        sn.append(x * s_prev + y * c_prev)

    out = [None] * num_coeffs(order)
    for m in range(order + 1):
        # Legendre part with the sin^m factor stripped off
        p_mm = float(np.prod(np.arange(1, 2 * m, 2))) if m > 0 else 1.0
        p_prev2 = None
        p_prev = one * p_mm
        for l in range(m, order + 1):
            if l == m:
                p = p_prev
            elif l == m + 1:
                p = z * (2 * m + 1) * p_mm
                p_prev2, p_prev = p_prev, p
            else:
                p = ((2 * l - 1) * z * p_prev - (l + m - 1) * p_prev2) / (l - m)
                p_prev2, p_prev = p_prev, p
            k = _norm_const(l, m)
            if m == 0:
                out[sh_index(l, 0)] = k * p
            else:
                out[sh_index(l, m)] = math.sqrt(2.0) * k * p * cs[m]
                out[sh_index(l, -m)] = math.sqrt(2.0) * k * p * sn[m]
    if is_torch:
        return torch.stack(out, -1)
    return np.stack(out, -1)


@dataclass(frozen=True)
class SHVector:
    """SH coefficients of one spherical function, one column per channel."""

    order: int
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64)
        if not 0 <= self.order <= MAX_SH_ORDER:
            raise ValueError(f"SH order must be in [0, {MAX_SH_ORDER}], got {self.order}")
        if c.shape[0] != num_coeffs(self.order) or c.ndim > 2:
            raise ValueError(
                f"order {self.order} needs {num_coeffs(self.order)} coefficients per channel, got shape {c.shape}"
            )
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def channels(self) -> int:
        return 1 if self.coeffs.ndim == 1 else self.coeffs.shape[1]

    def __call__(self, dirs):
        """Reconstruct the band-limited function at ``dirs``."""
        return sh_basis(dirs, self.order) @ self.coeffs

    def __add__(self, other: "SHVector") -> "SHVector":
        if other.order != self.order:
            raise ValueError("cannot add SH vectors of different order")
        return SHVector(self.order, self.coeffs + other.coeffs)

    def scaled(self, s) -> "SHVector":
        return SHVector(self.order, self.coeffs * s)


def sh_dot(a: SHVector, b: SHVector):
    """Inner product of two SH expansions; broadcasts 1 against 3 channels."""
    if a.order != b.order:
        raise ValueError(f"SH order mismatch: {a.order} vs {b.order}")
    ca, cb = a.coeffs, b.coeffs
    if ca.ndim == 1 and cb.ndim == 1:
        return float(ca @ cb)
    if ca.ndim == 1:
        ca = ca[:, None]
    if cb.ndim == 1:
        cb = cb[:, None]
    return np.sum(ca * cb, axis=0)


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    dirs: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    scheme: str = "custom"

    def __post_init__(self):
        if self.dirs.shape[0] != self.weights.shape[0]:
            raise ValueError("dirs and weights must have the same length")

    def __len__(self) -> int:
        return self.weights.shape[0]


def _frame(axis):
    """Orthonormal (t, b, axis) basis with ``axis`` as the third column."""
    axis = normalize(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t = normalize(np.cross(helper, axis))
    b = np.cross(axis, t)
    return np.stack([t, b, axis], axis=1)


def product_gauss_rule(n_theta: int = 128, n_phi: int = 256, axis=None) -> QuadratureRule:
    """Gauss-Legendre in cos(theta) times uniform phi; exact for SH up to degree 2*n_theta-1."""
    x, w = np.polynomial.legendre.leggauss(n_theta)
    return _polar_rule(x, w, n_phi, axis, f"gauss{n_theta}x{n_phi}")


def _polar_rule(cos_t, w_t, n_phi, axis, scheme):
    phi = (np.arange(n_phi) + 0.5) * (2 * np.pi / n_phi)
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
    dirs = np.stack(
        [
            sin_t[:, None] * np.cos(phi)[None, :],
            sin_t[:, None] * np.sin(phi)[None, :],
            np.broadcast_to(cos_t[:, None], (cos_t.size, n_phi)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    weights = np.repeat(w_t * (2 * np.pi / n_phi), n_phi)
    if axis is not None:
        dirs = dirs @ _frame(axis).T
    return QuadratureRule(dirs, weights, scheme)


def lobe_rule(axis, sigma: float, n_theta: int = 64, n_phi: int = 128, cutoff: float = 9.0) -> QuadratureRule:
    """Product rule concentrated around ``axis`` for integrands with an angular lobe of width sigma.

    The cap ``theta <= cutoff*sigma`` gets its own Gauss-Legendre panel; the
    rest of the sphere is covered by a second panel so the rule still
    integrates smooth functions over the whole sphere.
    """
    theta_max = min(math.pi, cutoff * sigma)
    x, w = np.polynomial.legendre.leggauss(n_theta)
    # panel 1: theta in [0, theta_max], substituted in theta (not cos) for resolution near the pole
    t = 0.5 * theta_max * (x + 1.0)
    cos1, w1 = np.cos(t), w * 0.5 * theta_max * np.sin(t)
    cos_all, w_all = [cos1], [w1]
    if theta_max < math.pi:
        c_lo, c_hi = -1.0, math.cos(theta_max)
        cos_all.append(0.5 * (c_hi - c_lo) * x + 0.5 * (c_hi + c_lo))
        w_all.append(w * 0.5 * (c_hi - c_lo))
    return _polar_rule(np.concatenate(cos_all), np.concatenate(w_all), n_phi, axis, f"lobe{n_theta}x{n_phi}")


def fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


_DEFAULT_RULE: Optional[QuadratureRule] = None


def default_rule() -> QuadratureRule:
    global _DEFAULT_RULE
    if _DEFAULT_RULE is None:
        _DEFAULT_RULE = product_gauss_rule(128, 256)
    return _DEFAULT_RULE


def sphere_integrate(fn: Callable, rule: Optional[QuadratureRule] = None):
    """Weighted sum of ``fn(dirs)`` over the rule's nodes (scalar or per channel)."""
    rule = rule or default_rule()
    vals = np.asarray(fn(rule.dirs), dtype=np.float64)
    return np.tensordot(rule.weights, vals, axes=(0, 0))


def sh_project(fn: Callable, order: int, rule: Optional[QuadratureRule] = None) -> SHVector:
    rule = rule or default_rule()
    vals = np.asarray(fn(rule.dirs), dtype=np.float64)
    basis = sh_basis(rule.dirs, order) * rule.weights[:, None]
    return SHVector(order, np.tensordot(basis, vals, axes=(0, 0)))


# ---------------------------------------------------------------------------
# Spherical Gaussians and reflection
# ---------------------------------------------------------------------------


def sg_constant(sigma):
    """C = 1 / (sqrt(2) * pi^(2/3) * sigma), exactly as printed for the angle-based lobe."""
    return 1.0 / (math.sqrt(2.0) * math.pi ** (2.0 / 3.0) * np.asarray(sigma, dtype=np.float64))


def sg_eval(p, axis, sigma):
    """Angle-based spherical Gaussian ``C exp(-0.5 (arccos(p.q) / sigma)^2)``."""
    p = np.asarray(p, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    cos_t = np.clip(np.sum(p * axis, axis=-1), -1.0, 1.0)
    theta = np.arccos(cos_t)
    return sg_constant(sigma) * np.exp(-0.5 * (theta / sigma) ** 2)


@dataclass(frozen=True)
class SGLobe:
    axis: np.ndarray
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "axis", normalize(self.axis))

    def __call__(self, p):
        return sg_eval(p, self.axis, self.sigma)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(96)


def sg_integral(sigma):
    """Sphere integral of ``sg_eval`` for lobe width ``sigma`` (vectorized).

    With the printed normalization this is not 1; it tends to
    sqrt(2) * pi^(1/3) * sigma for small sigma.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    t_max = np.minimum(math.pi, 12.0 * sigma)[..., None]
    t = 0.5 * t_max * (_GL_X + 1.0)
    f = np.exp(-0.5 * (t / sigma[..., None]) ** 2) * np.sin(t)
    return 2 * math.pi * sg_constant(sigma) * 0.5 * t_max[..., 0] * (f @ _GL_W)


def reflect(w_o, n):
    """Mirror ``w_o`` about ``n``: ``2 (w_o . n) n - w_o``."""
    w_o = np.asarray(w_o, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return 2.0 * np.sum(w_o * n, axis=-1, keepdims=True) * n - w_o


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis``."""
    k = normalize(axis)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def dirs_to_equirect(dirs):
    """Map directions to (u, v) in [0,1): u = phi / 2pi (phi = atan2(y, x)), v = theta / pi (theta from +z)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    phi = np.mod(np.arctan2(dirs[..., 1], dirs[..., 0]), 2 * np.pi)
    theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
    return phi / (2 * np.pi), theta / np.pi


def equirect_dirs(height: int, width: int) -> np.ndarray:
    """Texel-centre directions of a lat-long map, shape (H, W, 3); row 0 is the +z pole."""
    theta = (np.arange(height) + 0.5) * (np.pi / height)
    phi = (np.arange(width) + 0.5) * (2 * np.pi / width)
    st = np.sin(theta)[:, None]
    return np.stack(
        [st * np.cos(phi)[None, :], st * np.sin(phi)[None, :], np.broadcast_to(np.cos(theta)[:, None], (height, width))],
        axis=-1,
    )


def equirect_solid_angles(height: int, width: int) -> np.ndarray:
    """Exact solid angle of each lat-long texel row band, shape (H, W)."""
    edges = np.arange(height + 1) * (np.pi / height)
    band = (np.cos(edges[:-1]) - np.cos(edges[1:])) * (2 * np.pi / width)
    return np.broadcast_to(band[:, None], (height, width))
