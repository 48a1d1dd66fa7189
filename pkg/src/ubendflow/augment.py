"""Stochastic 90-degree rotation / up-down flip augmentation.

Scalar fields (binary image, distance field, mask) are index-transformed;
velocity components are remapped as proper vector components, so a rotated
flow field stays physically consistent:

    rot90 CCW:  (vx', vy') at the rotated pixel = (-vy, vx) at the source
    flip u/d:   (vx', vy') = (vx, -vy)

Arrays are ``values[iy, ix]`` with y increasing along the row index.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    p_rotate: float = 0.44
    p_flip: float = 0.44
    enabled: bool = True

    def validate(self) -> None:
        for name in ("p_rotate", "p_flip"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AugmentError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class TransformRecord:
    """Which transforms were applied, in the fixed order flip-then-rotate.

    With this composition order the four draws produce four visually
    distinct gross orientations of the channel (arch up / left / down /
    right), so the input image alone determines the flow direction.  The
    opposite order would send rotate+flip to the same gross orientation as
    rotate alone while reversing the flow, leaving two nearly
    indistinguishable inputs with contradictory targets.
    """

    rotate: bool
    flip: bool

    @property
    def code(self) -> int:
        return int(self.rotate) | (int(self.flip) << 1)


IDENTITY = TransformRecord(rotate=False, flip=False)
ALL_TRANSFORMS = tuple(TransformRecord(bool(c & 1), bool(c & 2)) for c in range(4))


def rotate_scalar(a: np.ndarray) -> np.ndarray:
    """90-degree CCW rotation in the y-up frame."""
    return np.rot90(a, -1).copy()


def flip_scalar(a: np.ndarray) -> np.ndarray:
    """Upside-down flip (mirror across the horizontal midline)."""
    return a[::-1].copy()


def rotate_vector(vx: np.ndarray, vy: np.ndarray):
    return -rotate_scalar(vy), rotate_scalar(vx)


def flip_vector(vx: np.ndarray, vy: np.ndarray):
    return flip_scalar(vx), -flip_scalar(vy)


def transform_fields(scalars: dict, vx: np.ndarray, vy: np.ndarray,
                     record: TransformRecord):
    """Apply a recorded transform to named scalar fields plus one vector field."""
    scalars = dict(scalars)
    if record.flip:
        scalars = {k: flip_scalar(v) for k, v in scalars.items()}
        vx, vy = flip_vector(vx, vy)
    if record.rotate:
        scalars = {k: rotate_scalar(v) for k, v in scalars.items()}
        vx, vy = rotate_vector(vx, vy)
    return scalars, vx, vy


def transform_prediction_frame(scalars: dict, vx: np.ndarray, vy: np.ndarray,
                               record: TransformRecord):
    """Inverse of transform_fields: maps fields back to the canonical frame."""
    if not isinstance(record, TransformRecord):
        raise AugmentError(f"unknown transform record {record!r}")
    scalars = dict(scalars)
    if record.rotate:
        for _ in range(3):
            scalars = {k: rotate_scalar(v) for k, v in scalars.items()}
            vx, vy = rotate_vector(vx, vy)
    if record.flip:
        scalars = {k: flip_scalar(v) for k, v in scalars.items()}
        vx, vy = flip_vector(vx, vy)
    return scalars, vx, vy


def draw_record(rng: np.random.Generator, config: AugmentConfig) -> TransformRecord:
    config.validate()
    if not config.enabled:
        return IDENTITY
    return TransformRecord(rotate=bool(rng.random() < config.p_rotate),
                           flip=bool(rng.random() < config.p_flip))


def augment_sample(sample, rng: np.random.Generator,
                   config: AugmentConfig | None = None):
    """Return (augmented sample, transform record) for one dataset Sample."""
    if config is None:
        config = AugmentConfig()
    record = draw_record(rng, config)
    if record == IDENTITY:
        return sample, record
    scalars, vx, vy = transform_fields(
        {"binary": sample.binary.values, "sdf": sample.sdf.values,
         "mask": sample.mask.values},
        sample.vx.values, sample.vy.values, record)
    return replace(
        sample,
        binary=replace(sample.binary, values=scalars["binary"]),
        sdf=replace(sample.sdf, values=scalars["sdf"]),
        mask=replace(sample.mask, values=scalars["mask"]),
        vx=replace(sample.vx, values=vx),
        vy=replace(sample.vy, values=vy),
    ), record
