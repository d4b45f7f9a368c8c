"""Light environments: point-light patterns, lat-long HDR maps, SH projection and SG prefiltering.

Lat-long convention: row 0 is the +z pole, ``theta = (row + 0.5) * pi / H``,
``phi = atan2(y, x) = (col + 0.5) * 2pi / W``.  PFM files store rows
bottom-to-top; :func:`read_pfm` / :func:`write_pfm` flip on the way in and out.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .sphmath import (
    SHVector,
    dirs_to_equirect,
    equirect_dirs,
    equirect_solid_angles,
    fibonacci_directions,
    normalize,
    sg_constant,
    sg_integral,
    sh_basis,
)

LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class PointLightPattern:
    directions: np.ndarray
    intensities: np.ndarray
    pattern_id: str = ""

    def __post_init__(self):
        d = normalize(np.atleast_2d(np.asarray(self.directions, dtype=np.float64)))
        it = np.atleast_2d(np.asarray(self.intensities, dtype=np.float64))
        if d.shape[0] == 0:
            raise ValueError("a light pattern needs at least one light")
        if it.shape == (1, 3) and d.shape[0] > 1:
            it = np.repeat(it, d.shape[0], axis=0)
        if it.shape != d.shape:
            raise ValueError(f"intensities shape {it.shape} does not match directions {d.shape}")
        if np.any(it < 0):
            raise ValueError("light intensities must be non-negative")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "intensities", it)

    def __len__(self) -> int:
        return self.directions.shape[0]

    def __add__(self, other: "PointLightPattern") -> "PointLightPattern":
        return PointLightPattern(
            np.concatenate([self.directions, other.directions]),
            np.concatenate([self.intensities, other.intensities]),
            f"{self.pattern_id}+{other.pattern_id}",
        )

    def scaled(self, s: float) -> "PointLightPattern":
        return PointLightPattern(self.directions, self.intensities * s, self.pattern_id)

    def to_json(self) -> dict:
        return {"pattern_id": self.pattern_id, "directions": self.directions.tolist(), "intensities": self.intensities.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "PointLightPattern":
        return cls(doc["directions"], doc["intensities"], doc.get("pattern_id", ""))


def save_patterns(patterns: Sequence[PointLightPattern], path) -> None:
    Path(path).write_text(json.dumps({"patterns": [p.to_json() for p in patterns]}, indent=1))


def load_patterns(path) -> List[PointLightPattern]:
    doc = json.loads(Path(path).read_text())
    if "patterns" in doc:
        return [PointLightPattern.from_json(p) for p in doc["patterns"]]
    return [PointLightPattern.from_json(doc)]


def make_patterns(kind: str, n_lights: int, group_size: int = 5, seed: int = 0,
                  n_patterns: Optional[int] = None, intensity: float = 1.0) -> List[PointLightPattern]:
    """Light-stage style patterns over ``n_lights`` Fibonacci-sphere directions.

    ``olat`` gives one single-light pattern per direction.  ``grouped`` gives
    ``n_patterns`` (default ``n_lights``) seeded random subsets of
    ``group_size`` distinct lights.
    """
    if n_lights < 1:
        raise ValueError("n_lights must be >= 1")
    dirs = fibonacci_directions(n_lights)
    white = np.full(3, float(intensity))
    if kind == "olat":
        return [PointLightPattern(dirs[i], white, f"olat{i}") for i in range(n_lights)]
    if kind != "grouped":
        raise ValueError(f"unknown pattern kind {kind!r}")
    if group_size > n_lights:
        raise ValueError(f"group_size {group_size} exceeds n_lights {n_lights}")
    rng = np.random.default_rng(seed)
    out = []
    for p in range(n_patterns or n_lights):
        idx = np.sort(rng.choice(n_lights, size=group_size, replace=False))
        out.append(PointLightPattern(dirs[idx], white, "grp" + "-".join(map(str, idx))))
    return out


def delta_light_sh(direction, intensity, order: int = 8) -> SHVector:
    """Exact SH coefficients of a Dirac light: ``intensity * Y_i(direction)``."""
    y = sh_basis(normalize(direction), order)
    return SHVector(order, np.outer(y, np.broadcast_to(np.asarray(intensity, dtype=np.float64), (3,))))


def pattern_sh(pattern: PointLightPattern, order: int = 8) -> SHVector:
    Y = sh_basis(pattern.directions, order)
    return SHVector(order, Y.T @ pattern.intensities)


# ---------------------------------------------------------------------------
# Environment maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvMap:
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.array(self.pixels, dtype=np.float64)
        if p.ndim == 2:
            p = np.repeat(p[..., None], 3, axis=-1)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {p.shape}")
        if p.shape[1] != 2 * p.shape[0]:
            raise ValueError(f"lat-long map must have width = 2*height, got {p.shape[1]}x{p.shape[0]}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("environment pixels must be finite and non-negative")
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_function(cls, fn, height: int) -> "EnvMap":
        d = equirect_dirs(height, 2 * height)
        return cls(np.broadcast_to(np.asarray(fn(d), dtype=np.float64).reshape(height, 2 * height, -1), (height, 2 * height, 3)))

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.pixels).tobytes()).hexdigest()

    def rotated(self, R: np.ndarray) -> "EnvMap":
        """Env whose radiance in direction ``R w`` equals this env's radiance in ``w`` (bilinear resample)."""
        d = equirect_dirs(self.height, self.width) @ np.asarray(R)  # R^T applied to row vectors
        return EnvMap(sample_bilinear(self.pixels, d))

    def sample(self, dirs) -> np.ndarray:
        return sample_bilinear(self.pixels, dirs)


def sample_bilinear(img, dirs):
    """Bilinear lookup in a lat-long image; wraps in phi, clamps in theta."""
    h, w = img.shape[:2]
    u, v = dirs_to_equirect(dirs)
    x = u * w - 0.5
    y = np.clip(v * h - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros_like(x0)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None] if h > 1 else np.zeros_like(fx)
    x0m = np.mod(x0, w)
    x1m = np.mod(x0 + 1, w)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0m] * (1 - fx) + img[y0, x1m] * fx
    bot = img[y1, x0m] * (1 - fx) + img[y1, x1m] * fx
    return top * (1 - fy) + bot * fy


def latlong_sh_weights(height: int, width: int) -> np.ndarray:
    """Quadrature weights on texel centres, exact for band-limited integrands.

    Texel-centre colatitudes are Fejer first-rule nodes in cos(theta), so the
    rule integrates polynomials of degree < H in cos(theta) exactly; the
    uniform phi sum is exact for trigonometric degree < W.
    """
    theta = (np.arange(height) + 0.5) * (np.pi / height)
    k = np.arange(1, height // 2 + 1)
    s = np.cos(2 * np.outer(theta, k)) @ (1.0 / (4 * k * k - 1))
    w_theta = (2.0 / height) * (1.0 - 2.0 * s)
    return np.broadcast_to((w_theta * (2 * np.pi / width))[:, None], (height, width))


def env_to_sh(env: EnvMap, order: int = 8) -> SHVector:
    dirs = equirect_dirs(env.height, env.width).reshape(-1, 3)
    w = latlong_sh_weights(env.height, env.width).reshape(-1)
    Y = sh_basis(dirs, order) * w[:, None]
    return SHVector(order, Y.T @ env.pixels.reshape(-1, 3))


def sh_to_env(sh: SHVector, height: int) -> np.ndarray:
    """Reconstruct an SH expansion on a lat-long grid (may be negative)."""
    d = equirect_dirs(height, 2 * height)
    return sh_basis(d, sh.order) @ sh.coeffs


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a top-to-bottom float array (H, W, 3) or (H, W)."""
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dt = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    body = data[m.end():]
    n = w * h * channels
    if len(body) < n * 4:
        raise ValueError(f"{path}: truncated PFM data")
    img = np.frombuffer(body[: n * 4], dtype=dt).astype(np.float64)
    img = img.reshape((h, w, channels) if channels == 3 else (h, w))
    return img[::-1].copy()


def write_pfm(path, img) -> None:
    img = np.asarray(img, dtype=np.float64)
    color = img.ndim == 3
    h, w = img.shape[:2]
    header = f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def load_env(path) -> EnvMap:
    return EnvMap(read_pfm(path))


# ---------------------------------------------------------------------------
# Prefiltering
# ---------------------------------------------------------------------------

SIGMA_LEVEL_MIN = 0.02
SIGMA_LEVEL_MAX = 1.0
DEFAULT_LEVELS = 32
LEVEL_TEXELS_PER_SIGMA = 4.0
KERNEL_CUTOFF = 6.0


@dataclass(frozen=True)
class PrefilteredEnv:
    """SG-convolved lat-long levels; ``levels[l][q] = integral L(w) G_s(w; q, sigmas[l]) dw``."""

    sigmas: np.ndarray
    levels: tuple = field(repr=False)
    sh: SHVector = field(repr=False)
    source_digest: str = ""

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if np.any(np.diff(s) <= 0):
            raise ValueError("prefilter sigmas must be strictly increasing")
        object.__setattr__(self, "sigmas", s)
        object.__setattr__(self, "levels", tuple(np.asarray(l, dtype=np.float64) for l in self.levels))


def _downsample(img):
    """2x2 box filter weighted by texel solid angle."""
    h, w = img.shape[:2]
    area = equirect_solid_angles(h, w)[..., None]
    num = (img * area).reshape(h // 2, 2, w // 2, 2, 3).sum(axis=(1, 3))
    den = area.reshape(h // 2, 2, w // 2, 2, 1).sum(axis=(1, 3))
    return num / den


def _pyramid(pixels):
    pyr = [pixels]
    while pyr[-1].shape[0] >= 4 and pyr[-1].shape[0] % 2 == 0:
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _level_source(heights, sigma, texels_per_sigma, floor):
    """Index of the coarsest grid with pitch <= sigma / texels_per_sigma (at least ``floor`` rows)."""
    best = 0
    for k, h in enumerate(heights):
        if math.pi / h <= sigma / texels_per_sigma and h >= min(floor, heights[0]):
            best = k
    return best


def level_shapes(height: int, sigmas, texels_per_sigma: float = LEVEL_TEXELS_PER_SIGMA, floor: int = 16):
    """Grid of each level: a power-of-two reduction of the source with pitch at most
    ``sigma / texels_per_sigma`` where the pyramid allows it.  Level 0 is the source grid."""
    heights = [height]
    while heights[-1] >= 4 and heights[-1] % 2 == 0:
        heights.append(heights[-1] // 2)
    shapes = []
    for l, sigma in enumerate(np.asarray(sigmas, dtype=np.float64)):
        h = height if l == 0 else heights[_level_source(heights, sigma, texels_per_sigma, floor)]
        shapes.append((h, 2 * h))
    return shapes


def sg_filter_latlong(pixels, sigma: float, cutoff: float = KERNEL_CUTOFF) -> np.ndarray:
    """``out[q] = sum_t L[t] G_s(t; q, sigma) area[t]`` evaluated at every texel centre of ``pixels``.

    For a fixed pair of rows the kernel depends only on the longitude offset,
    so each output row is a sum of circular convolutions done with real FFTs.
    Texels farther than ``cutoff * sigma`` from ``q`` are ignored.  The
    discrete kernel of each row is rescaled to the exact SG energy, so a
    constant map filters exactly even when sigma is close to the texel pitch.
    """
    H, W = pixels.shape[:2]
    theta = (np.arange(H) + 0.5) * np.pi / H
    ct, st = np.cos(theta), np.sin(theta)
    cos_dphi = np.cos(np.arange(W) * 2.0 * np.pi / W)
    area = equirect_solid_angles(H, W)[:, :1, None]
    spec = np.fft.rfft(pixels * area, axis=1)  # (H, W//2 + 1, 3)
    radius = min(cutoff * sigma, np.pi)
    cos_r = np.cos(radius)
    c = sg_constant(sigma)
    energy = float(sg_integral(sigma))
    out = np.empty((H, W, 3))
    for oi in range(H):
        rows = np.nonzero(np.abs(theta - theta[oi]) <= radius + np.pi / H)[0]
        d = ct[oi] * ct[rows, None] + st[oi] * st[rows, None] * cos_dphi
        k = c * np.exp(-0.5 * (np.arccos(np.clip(d, -1.0, 1.0)) / sigma) ** 2)
        k[d < cos_r] = 0.0
        # the kernel is even in the longitude offset, so its spectrum is real
        k *= energy / np.sum(k * area[rows, :, 0])
        kf = np.fft.rfft(k, axis=1).real
        out[oi] = np.fft.irfft(np.einsum("nf,nfc->fc", kf, spec[rows]), n=W, axis=0)
    return out


def prefilter(env: EnvMap, num_levels: int = DEFAULT_LEVELS, sigma_min: float = SIGMA_LEVEL_MIN,
              sigma_max: float = SIGMA_LEVEL_MAX, sh_order: int = 8) -> PrefilteredEnv:
    """Convolve the environment with the angle-based SG at geometric sigma levels.

    Each level is computed on a box-filtered copy of the source chosen by
    ``level_shapes``.
    """
    if num_levels < 2:
        raise ValueError("prefilter needs at least two levels")
    sigmas = np.geomspace(sigma_min, sigma_max, num_levels)
    by_height = {p.shape[0]: p for p in _pyramid(env.pixels)}
    levels = [sg_filter_latlong(by_height[h], float(s)) for s, (h, _) in zip(sigmas, level_shapes(env.height, sigmas))]
    return PrefilteredEnv(sigmas, tuple(levels), env_to_sh(env, sh_order), env.digest())


def env_specular_lookup(pf: PrefilteredEnv, q, sigma, interp: str = "log"):
    """Approximate ``integral L(w) G_s(w; q, sigma) dw`` with one filtered lookup.

    Each level is divided by its SG energy, bilinearly sampled at ``q``,
    blended between the two bracketing levels in log(sigma) (geometric blend
    of values when ``interp='log'``, linear otherwise), and rescaled by the SG
    energy at ``sigma``.  Sigmas outside the level range use the end level's
    blur.  ``q`` is ``(..., 3)``, ``sigma`` broadcasts against ``q[..., 0]``.
    """
    q = np.asarray(q, dtype=np.float64)
    shape = q.shape[:-1]
    q = q.reshape(-1, 3)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), shape).reshape(-1)
    n_lev = len(pf.sigmas)
    s_blur = np.clip(sigma, pf.sigmas[0], pf.sigmas[-1])
    pos = np.interp(np.log(s_blur), np.log(pf.sigmas), np.arange(n_lev))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, max(n_lev - 2, 0))
    hi = np.minimum(lo + 1, n_lev - 1)
    t = (pos - lo)[:, None]
    energy = sg_integral(pf.sigmas)
    samples = np.stack([sample_bilinear(lvl, q) / e for lvl, e in zip(pf.levels, energy)])  # (L, M, 3)
    rows = np.arange(q.shape[0])
    a = samples[lo, rows]
    b = samples[hi, rows]
    if interp == "log":
        tiny = 1e-300
        val = np.exp((1 - t) * np.log(np.maximum(a, tiny)) + t * np.log(np.maximum(b, tiny)))
        val = np.where((a <= 0) | (b <= 0), (1 - t) * a + t * b, val)
    else:
        val = (1 - t) * a + t * b
    return (val * sg_integral(sigma)[:, None]).reshape(shape + (3,))


def brute_force_specular(env: EnvMap, q, sigma) -> np.ndarray:
    """Direct texel sum of ``L * G_s`` over the full-resolution map (oracle).

    The discrete kernel is rescaled to the exact SG energy.
    """
    d = equirect_dirs(env.height, env.width).reshape(-1, 3)
    area = equirect_solid_angles(env.height, env.width).reshape(-1)
    cos_t = np.clip(d @ np.asarray(q, dtype=np.float64), -1.0, 1.0)
    g = np.exp(-0.5 * (np.arccos(cos_t) / sigma) ** 2) * area
    return sg_integral(sigma) * (g @ env.pixels.reshape(-1, 3)) / g.sum()


# ---------------------------------------------------------------------------
# Prefilter cache
# ---------------------------------------------------------------------------

CACHE_VERSION = 1


def save_prefiltered(pf: PrefilteredEnv, path) -> None:
    arrays = {f"level{i}": lvl for i, lvl in enumerate(pf.levels)}
    with open(path, "wb") as f:  # a file object keeps numpy from appending ".npz"
        np.savez(
            f, version=np.array(CACHE_VERSION), sigmas=pf.sigmas, sh=pf.sh.coeffs,
            sh_order=np.array(pf.sh.order), digest=np.array(pf.source_digest), **arrays,
        )


def load_prefiltered(path) -> PrefilteredEnv:
    """Load a prefilter cache; raises ``ValueError`` on any version or content problem."""
    try:
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != CACHE_VERSION:
                raise ValueError(f"prefilter cache version {int(z['version'])} != {CACHE_VERSION}")
            sigmas = z["sigmas"]
            levels = [z[f"level{i}"] for i in range(len(sigmas))]
            return PrefilteredEnv(sigmas, tuple(levels), SHVector(int(z["sh_order"]), z["sh"]), str(z["digest"]))
    except ValueError:
        raise
    except Exception as e:  # zip/pickle/key errors from a damaged file
        raise ValueError(f"unreadable prefilter cache {path}: {e}") from e
