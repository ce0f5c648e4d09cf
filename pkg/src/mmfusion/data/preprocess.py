"""Intensity scaling and rigid augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume

log = logging.getLogger(__name__)

MAX_ANGLE_DEG = 8.0
MAX_SHIFT_MM = 8.0


def minmax_scale(vol: Volume) -> Volume:
    data = vol.data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("min-max scaling requires finite values")
    lo, hi = data.min(), data.max()
    if hi == lo:
        log.warning("constant volume (value %g) min-max scaled to zeros", lo)
        return Volume(np.zeros_like(vol.data), vol.spacing)
    return Volume((data - lo) / (hi - lo), vol.spacing)


@dataclass(frozen=True)
class RigidTransform:
    angles_deg: tuple = (0.0, 0.0, 0.0)
    shift_mm: tuple = (0.0, 0.0, 0.0)

    def shift_voxels(self, spacing) -> np.ndarray:
        return np.asarray(self.shift_mm, dtype=np.float64) / np.asarray(spacing, dtype=np.float64)


def sample_transform(rng: np.random.Generator, max_angle: float = MAX_ANGLE_DEG,
                     max_shift_mm: float = MAX_SHIFT_MM) -> RigidTransform:
    angles = rng.uniform(-max_angle, max_angle, size=3)
    shift = rng.uniform(-max_shift_mm, max_shift_mm, size=3)
    return RigidTransform(tuple(angles), tuple(shift))


def _rotation(angles_deg) -> np.ndarray:
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_transform(vol: Volume, tf: RigidTransform) -> Volume:
    """Rotate about the volume center, then translate; trilinear, zero fill."""
    shift = tf.shift_voxels(vol.spacing)
    if not any(tf.angles_deg):
        if not shift.any():
            return Volume(vol.data.copy(), vol.spacing)
        if np.all(shift == np.round(shift)):
            return Volume(_integer_shift(vol.data, shift.astype(int)), vol.spacing)
    rot = _rotation(tf.angles_deg)
    center = (np.asarray(vol.shape, dtype=np.float64) - 1) / 2
    # output o samples input at R^T (o - c - t) + c
    matrix = rot.T
    offset = center - matrix @ (center + shift)
    out = ndimage.affine_transform(vol.data, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    return Volume(np.clip(out, 0.0, 1.0), vol.spacing)


def _integer_shift(data: np.ndarray, shift) -> np.ndarray:
    out = np.zeros_like(data)
    src, dst = [], []
    for n, s in zip(data.shape, shift):
        if abs(s) >= n:
            return out
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = data[tuple(src)]
    return np.clip(out, 0.0, 1.0)


def augment(vol: Volume, rng: np.random.Generator) -> Volume:
    return apply_transform(vol, sample_transform(rng))
