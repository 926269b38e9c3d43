"""Affine training-time augmentation and deterministic preprocessing.

Augmentation operates at the native 48x48 resolution, before any resize.
Each sample's parameters are drawn from a generator keyed on
(global seed, epoch, sample index), so the augmented image is identical
no matter how many workers iterate the data or in which order.

Warping composes a single 3x3 homogeneous matrix over (x, y, 1) column
vectors with x = column and y = row.  The pipeline, applied to input
coordinates in order: shift to the image center, rotate, shear, zoom,
translate, flip, shift back.  Sampling is nearest-neighbor with
edge-replicated out-of-bounds reads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import keyed_rng

PREPROCESS_SIZE = 260
REFERENCE_INPUT_SCALE = 1.0 / 255.0


class DegenerateTransformError(ValueError):
    """Zoom factors <= 0 collapse the transform and cannot be inverted."""


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max: float = 25.0  # degrees
    shift_max: float = 0.15  # fraction of the 48-pixel source side
    zoom_max: float = 0.25
    shear_max: float = 0.1
    hflip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self) -> None:
        for name in ("rotation_max", "shift_max", "zoom_max", "shear_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")


@dataclass(frozen=True)
class AffineParams:
    angle: float = 0.0  # degrees
    tx: float = 0.0  # pixel offsets
    ty: float = 0.0
    zoom: float = 1.0
    shear: float = 0.0
    flip: bool = False

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls()


def sample_params(config: AugmentConfig, rng_key: tuple[int, int, int]) -> AffineParams:
    """Draw affine parameters fully determined by (seed, epoch, sample index).

    Draw order is part of the determinism contract: angle, tx, ty, zoom,
    shear, flip.
    """
    rng = keyed_rng(*rng_key)
    angle = rng.uniform(-config.rotation_max, config.rotation_max)
    shift_px = config.shift_max * 48.0
    tx = rng.uniform(-shift_px, shift_px)
    ty = rng.uniform(-shift_px, shift_px)
    zoom = rng.uniform(1.0 - config.zoom_max, 1.0 + config.zoom_max)
    shear = rng.uniform(-config.shear_max, config.shear_max)
    flip = bool(rng.random() < config.hflip_prob)
    return AffineParams(angle=angle, tx=tx, ty=ty, zoom=zoom, shear=shear, flip=flip)


def _translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def compose_matrix(params: AffineParams, width: int, height: int) -> np.ndarray:
    """Forward 3x3 matrix mapping input (x, y, 1) to output coordinates."""
    if params.zoom <= 0.0:
        raise DegenerateTransformError(f"zoom must be > 0, got {params.zoom}")

    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    theta = np.deg2rad(params.angle)
    rotate = np.array(
        [
            [np.cos(theta), -np.sin(theta), 0.0],
            [np.sin(theta), np.cos(theta), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    shear = np.array([[1.0, params.shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    zoom = np.diag([params.zoom, params.zoom, 1.0])
    flip = np.diag([-1.0, 1.0, 1.0]) if params.flip else np.eye(3)

    matrix = _translation(-cx, -cy)
    for stage in (rotate, shear, zoom, _translation(params.tx, params.ty), flip):
        matrix = stage @ matrix
    return _translation(cx, cy) @ matrix


def apply_affine(image: np.ndarray, params: AffineParams) -> np.ndarray:
    """Warp a 48x48 (or any HxW) grid by the composed affine matrix."""
    image = np.asarray(image)
    height, width = image.shape
    matrix = compose_matrix(params, width, height)
    inverse = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:height, 0:width]
    coords = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    src = inverse @ coords
    src_x = np.clip(np.rint(src[0]).astype(np.int64), 0, width - 1)
    src_y = np.clip(np.rint(src[1]).astype(np.int64), 0, height - 1)
    return image[src_y, src_x].reshape(height, width)


def augment_image(
    image: np.ndarray, config: AugmentConfig, rng_key: tuple[int, int, int]
) -> np.ndarray:
    """Sample keyed parameters and warp; identity pass-through when disabled."""
    if not config.enabled:
        return np.asarray(image).copy()
    return apply_affine(image, sample_params(config, rng_key))


def resize_bilinear(image: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center coordinate mapping.

    Interpolation uses the lerp form a + t*(b - a), so constant inputs are
    preserved exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    in_height, in_width = image.shape

    def source_coords(out_size: int, in_size: int) -> np.ndarray:
        scale = in_size / out_size
        coords = (np.arange(out_size) + 0.5) * scale - 0.5
        return np.clip(coords, 0.0, in_size - 1.0)

    sx = source_coords(out_width, in_width)
    sy = source_coords(out_height, in_height)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, in_width - 1)
    y1 = np.minimum(y0 + 1, in_height - 1)
    fx = sx - x0
    fy = sy - y0

    top = image[y0][:, x0]
    rows0 = top + fx[None, :] * (image[y0][:, x1] - top)
    bottom = image[y1][:, x0]
    rows1 = bottom + fx[None, :] * (image[y1][:, x1] - bottom)
    return rows0 + fy[:, None] * (rows1 - rows0)


def preprocess(
    image: np.ndarray,
    *,
    size: int = PREPROCESS_SIZE,
    scale: float = REFERENCE_INPUT_SCALE,
) -> np.ndarray:
    """Grayscale -> identical 3 channels, bilinear resize, backend scaling."""
    resized = resize_bilinear(image, size, size) * scale
    return np.repeat(resized[:, :, None], 3, axis=2)
