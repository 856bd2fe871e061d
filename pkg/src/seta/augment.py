"""Rotation / scale / masking augmentation applied consistently to image,
skeleton and part masks.

The affine map is stored as a 2x3 matrix acting on ``(x, y, 1)``; keypoints
are transformed analytically with that exact matrix, the image is resampled
bilinearly and the part labels with nearest neighbour.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform

from .core import Image, PartMaskSet, PersonSample, Skeleton
from .synth import BACKGROUND

ROTATIONS = (20, 10, 5, -5, -10, -20)
SCALE_RANGE = 0.2
MASK_RATIO = 0.5
MIN_INSIDE = 0.9
MAX_RETRIES = 8


class OutOfFrameError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugParams:
    rotation_deg: float = 0.0
    scale_delta: float = 0.0
    mask_on: bool = False
    mask_ratio: float = 0.0
    mask_anchor: tuple = (0.5, 0.5)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "AugParams":
        return cls(**{**data, "mask_anchor": tuple(data["mask_anchor"])})


@dataclass(frozen=True)
class AugmentedPair:
    sample_aug: PersonSample
    params: AugParams
    matrix: np.ndarray  # 2x3 forward map on (x, y, 1)
    source_id: object = None
    retries: int = 0
    clean_image: Image | None = None  # the geometric result before the occluding band


def sample_aug_params(seed: int) -> AugParams:
    rng = np.random.default_rng(seed)
    rotation = ROTATIONS[rng.integers(len(ROTATIONS))]
    scale = float(rng.uniform(-SCALE_RANGE, SCALE_RANGE))
    mask_on = bool(rng.random() < 0.5)
    anchor = (float(rng.random()), float(rng.random()))
    return AugParams(float(rotation), scale, mask_on, MASK_RATIO if mask_on else 0.0, anchor)


def centroid(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.mean(), ys.mean()])


def affine_matrix(rotation_deg: float, scale_delta: float, center, shift=(0.0, 0.0)) -> np.ndarray:
    """Rotate by ``rotation_deg`` (y-down, so positive turns +x toward +y) and
    scale by ``1 + scale_delta`` about ``center``, then translate by ``shift``."""
    th = np.deg2rad(rotation_deg)
    A = (1.0 + scale_delta) * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    c = np.asarray(center, dtype=np.float64)
    b = c - A @ c + np.asarray(shift, dtype=np.float64)
    return np.hstack([A, b[:, None]])


def apply_to_points(matrix: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ matrix[:, :2].T + matrix[:, 2]


def _is_identity(matrix: np.ndarray) -> bool:
    return np.array_equal(matrix, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


def _warp(arr: np.ndarray, matrix: np.ndarray, order: int, cval: float) -> np.ndarray:
    A, b = matrix[:, :2], matrix[:, 2]
    Ainv = np.linalg.inv(A)
    # scipy works in (row, col) = (y, x) index order and maps output -> input.
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    return affine_transform(arr, swap @ Ainv @ swap, offset=swap @ (-Ainv @ b),
                            order=order, mode="constant", cval=cval)


def _inside_fraction(matrix: np.ndarray, mask: np.ndarray) -> float:
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return 1.0
    p = apply_to_points(matrix, np.stack([xs, ys], 1).astype(np.float64))
    h, w = mask.shape
    ok = (p[:, 0] >= -0.5) & (p[:, 0] < w - 0.5) & (p[:, 1] >= -0.5) & (p[:, 1] < h - 0.5)
    return float(ok.mean())


def mask_rectangle(foreground: np.ndarray, ratio: float, anchor) -> tuple[slice, slice]:
    """Full-width band over the foreground bbox covering ``ratio`` of its area.

    The band's vertical position is ``anchor[1]`` in [0, 1].
    """
    ys, xs = np.nonzero(foreground)
    r0, r1, c0, c1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    rows = int(round(ratio * (r1 - r0)))
    top = r0 + min(int(anchor[1] * (r1 - r0 - rows + 1)), r1 - r0 - rows)
    return slice(top, top + rows), slice(c0, c1)


def augment(sample: PersonSample, params: AugParams, background=BACKGROUND,
            max_retries: int = MAX_RETRIES) -> AugmentedPair:
    fg = sample.parts.foreground
    if not fg.any():
        raise ValueError("sample has an empty foreground")
    h, w = fg.shape
    c = centroid(fg)
    p = params
    for attempt in range(max_retries + 1):
        matrix = affine_matrix(p.rotation_deg, p.scale_delta, c)
        if attempt > 0:
            # re-anchor: centre the transformed figure and damp the scale change
            p = dataclasses.replace(params, scale_delta=params.scale_delta * (1 - attempt / max_retries))
            matrix = affine_matrix(p.rotation_deg, p.scale_delta, c)
            ys, xs = np.nonzero(fg)
            q = apply_to_points(matrix, np.stack([xs, ys], 1).astype(np.float64))
            shift = np.array([(w - 1) / 2, (h - 1) / 2]) - (q.min(0) + q.max(0)) / 2
            matrix = affine_matrix(p.rotation_deg, p.scale_delta, c, shift)
        if _inside_fraction(matrix, fg) >= MIN_INSIDE:
            break
    else:
        raise OutOfFrameError(f"figure leaves the frame after {max_retries} retries")

    if _is_identity(matrix):
        pixels = sample.image.pixels.copy()
        labels = sample.parts.labels()
        kp = sample.skeleton.keypoints.copy()
    else:
        pixels = np.stack([_warp(sample.image.pixels[..., ch], matrix, 1, background[ch]) for ch in range(3)], -1)
        labels = _warp(sample.parts.labels(), matrix, 0, 0)
        kp = apply_to_points(matrix, sample.skeleton.keypoints)
    vis = sample.skeleton.visible & (kp[:, 0] >= 0) & (kp[:, 0] < w) & (kp[:, 1] >= 0) & (kp[:, 1] < h)

    parts = PartMaskSet.from_labels(labels)
    clean = Image(np.clip(pixels, 0, 1))
    if p.mask_on and p.mask_ratio > 0 and parts.foreground.any():
        rs, cs = mask_rectangle(parts.foreground, p.mask_ratio, p.mask_anchor)
        pixels = pixels.copy()
        pixels[rs, cs] = background
    out = PersonSample(Image(np.clip(pixels, 0, 1)), Skeleton(kp, vis), parts, sample.identity_tag)
    return AugmentedPair(out, p, matrix, sample.identity_tag, attempt, clean)
