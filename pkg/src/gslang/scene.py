"""Explicit Gaussian scenes, pinhole cameras and the GSPL scene file format.

A :class:`Scene` stores its splats as parallel float32 arrays (the on-disk
precision), so ``load_scene(save_scene(s))`` is the identity bit for bit.
Rendering and training promote to float64 internally.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .tensorio import DimensionMismatch, FormatError, MagicMismatch, TruncatedFile

GSPL_MAGIC = b"GSPL"
GSPL_VERSION = 1
QUAT_TOL = 1e-6
QUAT_RENORM_TOL = 1e-3


class InvalidQuaternion(FormatError):
    pass


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion; accepts (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class Gaussian:
    """One splat. ``rotation`` is a unit quaternion in (w, x, y, z) order."""

    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity: float
    latent: np.ndarray

    def __post_init__(self):
        for name in ("mu", "scale", "rotation", "color", "latent"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "opacity", float(self.opacity))
        _check_splats(
            self.scale[None], self.rotation[None], self.color[None], np.array([self.opacity])
        )


def covariance_of(g: Gaussian) -> np.ndarray:
    """World-space covariance R diag(scale^2) R^T."""
    return covariances(g.scale[None], g.rotation[None])[0]


def covariances(scale, quat) -> np.ndarray:
    r = quat_to_rotmat(quat)
    s2 = np.asarray(scale, dtype=np.float64) ** 2
    cov = np.einsum("nij,nj,nkj->nik", r, s2, r)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def _check_splats(scale, quat, color, opacity) -> None:
    if np.any(~(scale > 0)):
        raise ValueError("scale components must be > 0")
    qn = np.linalg.norm(np.asarray(quat, dtype=np.float64), axis=-1)
    if np.any(np.abs(qn - 1.0) > QUAT_TOL):
        raise ValueError("rotation quaternions must be unit norm")
    if np.any(~((opacity >= 0) & (opacity <= 1))):
        raise ValueError("opacity must lie in [0, 1]")
    if np.any(~((color >= 0) & (color <= 1))):
        raise ValueError("color components must lie in [0, 1]")


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.array(self.world_to_cam, dtype=np.float64)
        m.setflags(write=False)
        object.__setattr__(self, "world_to_cam", m)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        rot = m[:3, :3]
        if m.shape != (4, 4) or np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise ValueError("world_to_cam rotation block must be orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, fov_deg=60.0, width=64, height=64):
        """Camera at ``eye`` looking at ``target``; +z forward, +y down in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        m = np.eye(4)
        m[:3, :3] = rot
        m[:3, 3] = -rot @ eye
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, m)

    def to_dict(self) -> dict[str, Any]:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_cam": self.world_to_cam.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), np.array(d["world_to_cam"], dtype=np.float64),
        )


def _frozen_f32(a, shape) -> np.ndarray:
    out = np.array(a, dtype=np.float32).reshape(shape)
    out.setflags(write=False)
    return out


class Scene:
    """Ordered, immutable collection of Gaussians sharing one latent width.

    Arrays: ``mu`` (N,3), ``scale`` (N,3), ``quat`` (N,4), ``color`` (N,3),
    ``opacity`` (N,), ``latent`` (N,d), all float32 and read-only.
    """

    def __init__(self, mu, scale, quat, color, opacity, latent, metadata=None):
        mu = np.asarray(mu)
        n = mu.shape[0]
        latent = np.asarray(latent)
        d = latent.shape[1] if latent.ndim == 2 else 0
        self.mu = _frozen_f32(mu, (n, 3))
        self.scale = _frozen_f32(scale, (n, 3))
        self.quat = _frozen_f32(quat, (n, 4))
        self.color = _frozen_f32(color, (n, 3))
        self.opacity = _frozen_f32(opacity, (n,))
        self.latent = _frozen_f32(latent, (n, d))
        self.metadata = dict(metadata or {})
        _check_splats(self.scale, self.quat, self.color, self.opacity)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], metadata=None) -> "Scene":
        if not gaussians:
            raise ValueError("cannot infer latent width from an empty list")
        dims = {g.latent.shape[0] for g in gaussians}
        if len(dims) != 1:
            raise ValueError("all gaussians must share latent_dim")
        return cls(
            [g.mu for g in gaussians], [g.scale for g in gaussians],
            [g.rotation for g in gaussians], [g.color for g in gaussians],
            [g.opacity for g in gaussians], [g.latent for g in gaussians], metadata,
        )

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.mu[i], self.scale[i], self.quat[i], self.color[i],
            float(self.opacity[i]), self.latent[i],
        )

    @property
    def latent_dim(self) -> int:
        return self.latent.shape[1]

    def covariances(self) -> np.ndarray:
        return covariances(self.scale, self.quat)

    def with_latents(self, latent) -> "Scene":
        """New scene sharing every geometry/appearance array, with new latents."""
        out = Scene.__new__(Scene)
        out.__dict__.update(self.__dict__)
        out.latent = _frozen_f32(latent, (len(self), -1))
        out.metadata = dict(self.metadata)
        return out

    def with_appearance(self, color=None, opacity=None) -> "Scene":
        return Scene(
            self.mu, self.scale, self.quat,
            self.color if color is None else np.clip(color, 0, 1),
            self.opacity if opacity is None else np.clip(opacity, 0, 1),
            self.latent, self.metadata,
        )

    def permuted(self, order) -> "Scene":
        order = np.asarray(order)
        return Scene(
            self.mu[order], self.scale[order], self.quat[order], self.color[order],
            self.opacity[order], self.latent[order], self.metadata,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return self.metadata == other.metadata and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("mu", "scale", "quat", "color", "opacity", "latent")
        )


def scene_bytes(s: Scene) -> bytes:
    n, d = len(s), s.latent_dim
    rows = np.concatenate(
        [s.mu, s.scale, s.quat, s.color, s.opacity[:, None], s.latent], axis=1
    ).astype("<f4")
    meta = json.dumps(s.metadata, sort_keys=True).encode("utf-8")
    return b"".join(
        [
            GSPL_MAGIC,
            struct.pack("<III", GSPL_VERSION, n, d),
            rows.tobytes(),
            struct.pack("<I", len(meta)),
            meta,
        ]
    )


def save_scene(s: Scene, path) -> None:
    Path(path).write_bytes(scene_bytes(s))


def parse_scene(buf: bytes) -> Scene:
    if len(buf) < 16:
        raise TruncatedFile("GSPL header shorter than 16 bytes")
    if buf[:4] != GSPL_MAGIC:
        raise MagicMismatch(f"expected GSPL magic, got {buf[:4]!r}")
    version, n, d = struct.unpack_from("<III", buf, 4)
    if version != GSPL_VERSION:
        raise FormatError(f"unsupported GSPL version {version}")
    width = 14 + d
    body_end = 16 + 4 * n * width
    if len(buf) < body_end + 4:
        raise TruncatedFile(f"GSPL body truncated: {len(buf)} bytes, need >= {body_end + 4}")
    rows = np.frombuffer(buf, dtype="<f4", count=n * width, offset=16).reshape(n, width)
    (mlen,) = struct.unpack_from("<I", buf, body_end)
    if len(buf) < body_end + 4 + mlen:
        raise TruncatedFile("GSPL metadata truncated")
    if len(buf) > body_end + 4 + mlen:
        raise DimensionMismatch("trailing bytes after GSPL metadata; N or d inconsistent")
    meta = json.loads(buf[body_end + 4 : body_end + 4 + mlen].decode("utf-8"))

    quat = rows[:, 6:10].astype(np.float32)
    norms = np.linalg.norm(quat.astype(np.float64), axis=1)
    err = np.abs(norms - 1.0)
    if np.any(err > QUAT_RENORM_TOL):
        raise InvalidQuaternion(f"quaternion norm off by {err.max():.3g}")
    fix = err > QUAT_TOL
    if np.any(fix):
        quat[fix] = (quat[fix] / norms[fix, None]).astype(np.float32)
    return Scene(rows[:, 0:3], rows[:, 3:6], quat, rows[:, 10:13], rows[:, 13], rows[:, 14:], meta)


def load_scene(path) -> Scene:
    return parse_scene(Path(path).read_bytes())
