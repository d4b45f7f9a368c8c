"""Gaussian cloud data model, per-Gaussian radiance-transfer parameters and eye geometry.

Units are scene units (the synthetic scenes use millimetres).  Opacity is
stored as a logit and rotation as a unit quaternion ``(w, x, y, z)``; scales
are stored in natural units and optimized in log space by the fitter.
"""

from __future__ import annotations

import enum
import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .sphmath import fibonacci_directions, normalize

SIGMA_MIN = 0.01
SIGMA_MAX = 1.5
N_RGB_SH = 16  # bands 0-3
N_MONO_SH = 65  # bands 4-8
N_VIEW_SH = 9  # order-2 view-direction tables

FREEZE_POSITION = 1
FREEZE_NORMAL = 2


class Group(enum.IntEnum):
    HEAD = 0
    LEFT_EYE = 1
    RIGHT_EYE = 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def sigma_from_raw(rough_raw):
    """Lobe width: softplus(raw) + SIGMA_MIN, clamped to SIGMA_MAX."""
    if isinstance(rough_raw, torch.Tensor):
        return torch.clamp(torch.nn.functional.softplus(rough_raw) + SIGMA_MIN, max=SIGMA_MAX)
    r = np.asarray(rough_raw, dtype=np.float64)
    return np.minimum(np.logaddexp(0.0, r) + SIGMA_MIN, SIGMA_MAX)


def raw_from_sigma(sigma):
    s = np.asarray(sigma, dtype=np.float64) - SIGMA_MIN
    return s + np.log(-np.expm1(-s))  # inverse softplus


def quat_to_rotmat(q):
    """Rotation matrices from (possibly unnormalized) quaternions ``(..., 4)`` in (w, x, y, z) order."""
    q = normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def covariance(rotation, scale):
    """World covariance ``R diag(s) diag(s)^T R^T`` (batched over leading axes)."""
    R = quat_to_rotmat(rotation)
    s = np.asarray(scale, dtype=np.float64)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


# ---------------------------------------------------------------------------
# Eyes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EyeballParams:
    r_e: float
    r_c: float
    d: float
    center: np.ndarray
    gaze: np.ndarray
    sharpness: float = 50.0  # log-sum-exp blend sharpness, per unit length

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "gaze", normalize(np.asarray(self.gaze, dtype=np.float64).reshape(3)))
        if not (self.r_e > 0 and self.r_c >= 0):
            raise ValueError("eyeball and cornea radii must be positive")
        if not 0 <= self.d < self.r_e:
            raise ValueError("cornea offset must satisfy 0 <= d < r_e")

    @property
    def cornea_center(self) -> np.ndarray:
        return self.center + self.d * self.gaze

    @property
    def degenerate(self) -> bool:
        """Cornea sphere lies inside the eyeball sphere and adds no surface."""
        return self.r_c <= 0 or self.d + self.r_c <= self.r_e

    def with_gaze(self, gaze) -> "EyeballParams":
        return replace(self, gaze=gaze)

    def to_array(self) -> np.ndarray:
        return np.concatenate([[self.r_e, self.r_c, self.d], self.center, self.gaze, [self.sharpness]])

    @classmethod
    def from_array(cls, a) -> "EyeballParams":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]), a[3:6], a[6:9], float(a[9]))


def eye_field(eye: EyeballParams, points):
    """Signed blend field (negative inside) and its gradient at ``points``.

    Smooth union of the two spheres via log-sum-exp of their inside functions.
    """
    p = np.asarray(points, dtype=np.float64)
    k = eye.sharpness
    ve = p - eye.center
    vc = p - eye.cornea_center
    de = np.linalg.norm(ve, axis=-1)
    dc = np.linalg.norm(vc, axis=-1)
    g_e = eye.r_e - de
    g_c = eye.r_c - dc
    if eye.degenerate:
        grad = ve / np.maximum(de, 1e-300)[..., None]
        return -g_e, grad
    smax = np.logaddexp(k * g_e, k * g_c) / k
    w_e = np.exp(k * g_e - k * smax)
    w_c = np.exp(k * g_c - k * smax)
    grad = w_e[..., None] * ve / np.maximum(de, 1e-300)[..., None] + w_c[..., None] * vc / np.maximum(dc, 1e-300)[..., None]
    return -smax, grad


def eye_surface_along(eye: EyeballParams, dirs):
    """Outermost surface point along each ray ``center + r*dir`` and its outward normal."""
    u = normalize(dirs)
    if eye.degenerate:
        pos = eye.center + eye.r_e * u
        return pos, u.copy()
    # r_hi stays outside the surface; march it inward until the next step lands inside
    r_hi = np.full(u.shape[:-1], eye.r_e + eye.d + eye.r_c + 10.0 / eye.sharpness)
    r_lo = np.zeros_like(r_hi)
    step = min(eye.r_e, eye.r_c) / 64.0
    done = np.zeros(r_hi.shape, dtype=bool)
    for _ in range(int(math.ceil(r_hi.max() / step)) + 1):
        r_try = np.maximum(r_hi - step, 0.0)
        f, _ = eye_field(eye, eye.center + r_try[..., None] * u)
        hit = (f < 0) & ~done
        r_lo = np.where(hit, r_try, r_lo)
        done |= hit
        r_hi = np.where(done, r_hi, r_try)
        if done.all():
            break
    for _ in range(80):
        mid = 0.5 * (r_lo + r_hi)
        f, _ = eye_field(eye, eye.center + mid[..., None] * u)
        neg = f < 0
        r_lo = np.where(neg, mid, r_lo)
        r_hi = np.where(neg, r_hi, mid)
    r = 0.5 * (r_lo + r_hi)
    pos = eye.center + r[..., None] * u
    _, g = eye_field(eye, pos)
    return pos, normalize(g)


def eyeball_surface(eye: EyeballParams, n_samples: int):
    """Sample ``n_samples`` points (Fibonacci directions about the eye centre) on the eye surface.

    Returns ``(positions, normals)``, each ``(n_samples, 3)``.
    """
    if eye.degenerate:
        warnings.warn("cornea adds no surface to the eyeball; returning a pure sphere", RuntimeWarning, stacklevel=2)
    return eye_surface_along(eye, fibonacci_directions(n_samples))


# ---------------------------------------------------------------------------
# Cloud
# ---------------------------------------------------------------------------

# field name -> trailing shape; this order is also the on-disk block order
FIELDS: Dict[str, tuple] = {
    "positions": (3,),
    "rotations": (4,),
    "scales": (3,),
    "opacity_logits": (),
    "albedo": (3,),
    "d_c": (N_RGB_SH, 3),
    "d_m": (N_MONO_SH,),
    "rough_raw": (),
    "n_base": (3,),
    "dn_view": (N_VIEW_SH, 3),
    "v_view": (N_VIEW_SH,),
    "albedo_view": (N_VIEW_SH, 3),
}


@dataclass(frozen=True)
class Gaussian:
    t: np.ndarray
    R: np.ndarray
    s: np.ndarray
    o: float
    group: Group

    @property
    def covariance(self) -> np.ndarray:
        return covariance(self.R, self.s)


@dataclass(frozen=True)
class TransferParams:
    albedo: np.ndarray
    d_c: np.ndarray
    d_m: np.ndarray
    rough_raw: float
    n_base: np.ndarray
    dn_view: np.ndarray
    v_view: np.ndarray
    albedo_view: Optional[np.ndarray] = None

    @property
    def sigma(self) -> float:
        return float(sigma_from_raw(self.rough_raw))


@dataclass
class GaussianCloud:
    """Struct-of-arrays Gaussian scene (float64 throughout)."""

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacity_logits: np.ndarray
    albedo: np.ndarray
    d_c: np.ndarray
    d_m: np.ndarray
    rough_raw: np.ndarray
    n_base: np.ndarray
    dn_view: np.ndarray
    v_view: np.ndarray
    albedo_view: np.ndarray
    groups: np.ndarray
    frozen: np.ndarray
    eye_left: Optional[EyeballParams] = None
    eye_right: Optional[EyeballParams] = None
    metadata: dict = field(default_factory=lambda: {"units": "mm"})

    def __post_init__(self):
        n = np.asarray(self.positions).shape[0]
        for name, shape in FIELDS.items():
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if a.shape != (n,) + shape:
                raise ValueError(f"{name}: expected shape {(n,) + shape}, got {a.shape}")
            setattr(self, name, a)
        self.groups = np.ascontiguousarray(self.groups, dtype=np.uint8).reshape(n)
        self.frozen = np.ascontiguousarray(self.frozen, dtype=np.uint8).reshape(n)
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if np.any(self.groups == Group.LEFT_EYE) and self.eye_left is None:
            raise ValueError("left-eye Gaussians present without eye_left parameters")
        if np.any(self.groups == Group.RIGHT_EYE) and self.eye_right is None:
            raise ValueError("right-eye Gaussians present without eye_right parameters")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls, n: int, **kw) -> "GaussianCloud":
        """Cloud of ``n`` identity-rotation unit Gaussians with zero transfer."""
        arrays = {name: np.zeros((n,) + shape) for name, shape in FIELDS.items()}
        arrays["rotations"][:, 0] = 1.0
        arrays["scales"][:] = 1.0
        arrays["n_base"][:, 2] = 1.0
        arrays.update(groups=np.zeros(n, np.uint8), frozen=np.zeros(n, np.uint8))
        arrays.update(kw)
        return cls(**arrays)

    def copy(self) -> "GaussianCloud":
        kw = {name: getattr(self, name).copy() for name in FIELDS}
        return GaussianCloud(
            **kw,
            groups=self.groups.copy(),
            frozen=self.frozen.copy(),
            eye_left=self.eye_left,
            eye_right=self.eye_right,
            metadata=dict(self.metadata),
        )

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.rotations[i], self.scales[i], float(self.opacity_logits[i]), Group(self.groups[i]))

    def transfer(self, i: int) -> TransferParams:
        eye = self.groups[i] != Group.HEAD
        return TransferParams(
            self.albedo[i], self.d_c[i], self.d_m[i], float(self.rough_raw[i]), self.n_base[i],
            self.dn_view[i], self.v_view[i], self.albedo_view[i] if eye else None,
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def sigmas(self) -> np.ndarray:
        return sigma_from_raw(self.rough_raw)

    def eye(self, group: int) -> Optional[EyeballParams]:
        return {Group.LEFT_EYE: self.eye_left, Group.RIGHT_EYE: self.eye_right}.get(Group(group))

    def tensors(self, dtype=torch.float64) -> Dict[str, torch.Tensor]:
        """Torch copies of every numeric field plus ``groups``/``frozen``."""
        out = {name: torch.tensor(getattr(self, name), dtype=dtype) for name in FIELDS}
        out["groups"] = torch.tensor(self.groups.astype(np.int64))
        out["frozen"] = torch.tensor(self.frozen.astype(np.int64))
        return out

    def with_arrays(self, **arrays) -> "GaussianCloud":
        c = self.copy()
        for name, a in arrays.items():
            if isinstance(a, torch.Tensor):
                a = a.detach().cpu().numpy()
            setattr(c, name, np.array(a, dtype=np.uint8 if name in ("groups", "frozen") else np.float64))
        c.__post_init__()
        return c

    def equals(self, other: "GaussianCloud") -> bool:
        """Bit-exact equality of all numeric fields and eye parameters."""
        if len(self) != len(other):
            return False
        for name in list(FIELDS) + ["groups", "frozen"]:
            if getattr(self, name).tobytes() != getattr(other, name).tobytes():
                return False
        for a, b in ((self.eye_left, other.eye_left), (self.eye_right, other.eye_right)):
            if (a is None) != (b is None):
                return False
            if a is not None and a.to_array().tobytes() != b.to_array().tobytes():
                return False
        return True


def apply_eye_constraints(cloud: GaussianCloud) -> GaussianCloud:
    """Snap eye Gaussians onto their eyeball surface and freeze position and normal.

    Normals are set to the surface normal and the view-dependent normal
    residual is zeroed.  Head Gaussians are untouched.  Idempotent.
    """
    out = cloud.copy()
    for group in (Group.LEFT_EYE, Group.RIGHT_EYE):
        idx = np.flatnonzero(cloud.groups == group)
        if idx.size == 0:
            continue
        eye = cloud.eye(group)
        rel = cloud.positions[idx] - eye.center
        norms = np.linalg.norm(rel, axis=-1, keepdims=True)
        rel = np.where(norms > 1e-12, rel, eye.gaze)
        pos, _ = eye_surface_along(eye, rel)
        # points already on the surface stay put so repeated calls are bit-identical
        on = np.abs(eye_field(eye, cloud.positions[idx])[0]) <= 1e-9 * eye.r_e
        pos = np.where(on[:, None], cloud.positions[idx], pos)
        nrm = normalize(eye_field(eye, pos)[1])
        out.positions[idx] = pos
        out.n_base[idx] = nrm
        out.dn_view[idx] = 0.0
        out.frozen[idx] |= FREEZE_POSITION | FREEZE_NORMAL
    return out


# ---------------------------------------------------------------------------
# Scene file
# ---------------------------------------------------------------------------

MAGIC = b"RGSC"
VERSION = 1
FLAG_F64 = 1  # parameter blocks are float64 instead of float32
FLAG_EYE_LEFT = 2
FLAG_EYE_RIGHT = 4
_HEADER = struct.Struct("<4sIII")
_EYE_LEN = 10


class SceneFormatError(ValueError):
    pass


def save_scene(cloud: GaussianCloud, path, precision: str = "f64") -> None:
    """Write the binary scene container.

    Layout (little-endian): header ``magic 'RGSC', version u32, count u32,
    flags u32``; optional eye blocks (10 floats each: r_e, r_c, d, centre,
    gaze, sharpness); one block per entry of ``FIELDS`` in order; ``groups``
    and ``frozen`` as u8 blocks; u32-length-prefixed JSON metadata.  Float
    blocks are float64 unless ``precision='f32'`` (lossy).
    """
    if precision not in ("f32", "f64"):
        raise ValueError("precision must be 'f32' or 'f64'")
    dt = np.dtype("<f8") if precision == "f64" else np.dtype("<f4")
    flags = (FLAG_F64 if precision == "f64" else 0)
    flags |= FLAG_EYE_LEFT if cloud.eye_left is not None else 0
    flags |= FLAG_EYE_RIGHT if cloud.eye_right is not None else 0
    parts = [_HEADER.pack(MAGIC, VERSION, len(cloud), flags)]
    for eye in (cloud.eye_left, cloud.eye_right):
        if eye is not None:
            parts.append(eye.to_array().astype(dt).tobytes())
    for name in FIELDS:
        parts.append(getattr(cloud, name).astype(dt).tobytes())
    parts.append(cloud.groups.tobytes())
    parts.append(cloud.frozen.tobytes())
    meta = json.dumps(cloud.metadata, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)) + meta)
    Path(path).write_bytes(b"".join(parts))


def load_scene(path) -> GaussianCloud:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SceneFormatError(f"{path}: truncated header")
    magic, version, count, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SceneFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise SceneFormatError(f"{path}: unsupported scene version {version} (reader supports {VERSION})")
    dt = np.dtype("<f8") if flags & FLAG_F64 else np.dtype("<f4")
    off = _HEADER.size

    def take(nbytes, what):
        nonlocal off
        if off + nbytes > len(data):
            raise SceneFormatError(f"{path}: truncated while reading {what} at byte {off}")
        chunk = data[off:off + nbytes]
        off += nbytes
        return chunk

    eyes = {}
    for key, bit in (("eye_left", FLAG_EYE_LEFT), ("eye_right", FLAG_EYE_RIGHT)):
        if flags & bit:
            a = np.frombuffer(take(_EYE_LEN * dt.itemsize, key), dtype=dt).astype(np.float64)
            if not np.all(np.isfinite(a)):
                raise SceneFormatError(f"{path}: non-finite value in {key}")
            eyes[key] = EyeballParams.from_array(a)
    arrays = {}
    for name, shape in FIELDS.items():
        n_el = count * int(np.prod(shape, dtype=int))
        a = np.frombuffer(take(n_el * dt.itemsize, name), dtype=dt).astype(np.float64).reshape((count,) + shape)
        bad = ~np.isfinite(a.reshape(count, -1)).all(axis=1)
        if bad.any():
            raise SceneFormatError(f"{path}: non-finite {name} at Gaussian index {int(np.flatnonzero(bad)[0])}")
        arrays[name] = a
    arrays["groups"] = np.frombuffer(take(count, "groups"), dtype=np.uint8).copy()
    arrays["frozen"] = np.frombuffer(take(count, "frozen"), dtype=np.uint8).copy()
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    metadata = json.loads(take(meta_len, "metadata").decode())
    if off != len(data):
        raise SceneFormatError(f"{path}: {len(data) - off} trailing bytes")
    bad = np.flatnonzero(np.any(arrays["scales"] <= 0, axis=1))
    if bad.size:
        raise SceneFormatError(f"{path}: non-positive scale at Gaussian index {int(bad[0])}")
    try:
        return GaussianCloud(**arrays, **eyes, metadata=metadata)
    except ValueError as e:
        raise SceneFormatError(f"{path}: {e}") from e


def export_json(cloud: GaussianCloud, path) -> None:
    """Human-readable debug dump (lossy: decimal formatting, no round-trip guarantee)."""
    doc = {
        "count": len(cloud),
        "metadata": cloud.metadata,
        "eyes": {k: e.to_array().tolist() for k, e in (("left", cloud.eye_left), ("right", cloud.eye_right)) if e is not None},
        "gaussians": [
            {
                "position": cloud.positions[i].tolist(),
                "rotation": cloud.rotations[i].tolist(),
                "scale": cloud.scales[i].tolist(),
                "opacity": float(cloud.opacities[i]),
                "group": Group(cloud.groups[i]).name.lower(),
                "albedo": cloud.albedo[i].tolist(),
                "sigma": float(cloud.sigmas[i]),
            }
            for i in range(len(cloud))
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))
