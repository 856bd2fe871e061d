"""Value types shared across the package and skeleton heatmap rendering.

Coordinates are pixel indices with y pointing down: pixel ``(row i, col j)``
sits at ``(x=j, y=i)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image as PILImage
from PIL import PngImagePlugin

KEYPOINT_NAMES = (
    "head", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)

# Listed in draw order; a later part owns contested pixels.
PART_NAMES = (
    "r_leg", "l_leg", "torso", "head",
    "r_upper_arm", "l_upper_arm", "r_lower_arm", "l_lower_arm",
)
NUM_PARTS = len(PART_NAMES)

# Parts each joint is allowed to sit in (after a 2 px dilation).
JOINT_PARTS = {
    "head": ("head",),
    "neck": ("torso", "head"),
    "r_shoulder": ("torso", "r_upper_arm"),
    "r_elbow": ("r_upper_arm", "r_lower_arm"),
    "r_wrist": ("r_lower_arm",),
    "l_shoulder": ("torso", "l_upper_arm"),
    "l_elbow": ("l_upper_arm", "l_lower_arm"),
    "l_wrist": ("l_lower_arm",),
    "r_hip": ("torso", "r_leg"),
    "r_knee": ("r_leg",),
    "r_ankle": ("r_leg",),
    "l_hip": ("torso", "l_leg"),
    "l_knee": ("l_leg",),
    "l_ankle": ("l_leg",),
}

DEFAULT_HEIGHT = 64
DEFAULT_WIDTH = 48
DEFAULT_SIGMA = 2.0


def _frozen(arr: np.ndarray, dtype=None) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x 3 float64 pixels, nominally in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = _frozen(self.pixels, np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class Skeleton:
    keypoints: np.ndarray  # (K, 2) as (x, y)
    visible: np.ndarray  # (K,) bool

    def __post_init__(self):
        kp = _frozen(self.keypoints, np.float64)
        vis = _frozen(self.visible, bool)
        if kp.shape != (NUM_KEYPOINTS, 2) or vis.shape != (NUM_KEYPOINTS,):
            raise ValueError(f"skeleton needs {NUM_KEYPOINTS} keypoints, got {kp.shape}")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "visible", vis)

    def __eq__(self, other):
        return (
            isinstance(other, Skeleton)
            and np.array_equal(self.keypoints, other.keypoints)
            and np.array_equal(self.visible, other.visible)
        )

    def to_json(self) -> dict:
        return {
            "names": list(KEYPOINT_NAMES),
            "keypoints": self.keypoints.tolist(),
            "visible": self.visible.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Skeleton":
        return cls(np.asarray(data["keypoints"], float), np.asarray(data["visible"], bool))


@dataclass(frozen=True, eq=False)
class Heatmaps:
    channels: np.ndarray  # (K, H, W)
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "channels", _frozen(self.channels, np.float64))


@dataclass(frozen=True, eq=False)
class PartMaskSet:
    masks: np.ndarray  # (Q, H, W) bool
    names: tuple = PART_NAMES

    def __post_init__(self):
        object.__setattr__(self, "masks", _frozen(self.masks, bool))

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "PartMaskSet":
        """Build from an integer map where 0 is background and q+1 is part q."""
        labels = np.asarray(labels)
        return cls(np.stack([labels == q + 1 for q in range(NUM_PARTS)]))

    def labels(self) -> np.ndarray:
        out = np.zeros(self.masks.shape[1:], dtype=np.uint8)
        for q in range(self.masks.shape[0]):
            out[self.masks[q]] = q + 1
        return out

    @property
    def foreground(self) -> np.ndarray:
        return self.masks.any(axis=0)

    def __eq__(self, other):
        return isinstance(other, PartMaskSet) and np.array_equal(self.masks, other.masks)


@dataclass(frozen=True, eq=False)
class PersonSample:
    image: Image
    skeleton: Skeleton
    parts: PartMaskSet
    identity_tag: Any = None

    def __eq__(self, other):
        return (
            isinstance(other, PersonSample)
            and self.image == other.image
            and self.skeleton == other.skeleton
            and self.parts == other.parts
            and self.identity_tag == other.identity_tag
        )


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    def __bool__(self):
        return not self.violations

    def __str__(self):
        return "; ".join(self.violations) or "ok"


def keypoint_pixel(x: float, y: float) -> tuple[int, int]:
    """Nearest pixel (col, row) for a continuous keypoint position."""
    return int(np.floor(x + 0.5)), int(np.floor(y + 0.5))


def in_frame(x: float, y: float, height: int, width: int) -> bool:
    return 0 <= x < width and 0 <= y < height


def render_heatmaps(skeleton: Skeleton, sigma: float = DEFAULT_SIGMA,
                    height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> Heatmaps:
    """Gaussian response per keypoint, truncated to exactly zero beyond 3 sigma.

    The Gaussian is centred on the keypoint's nearest pixel, so a visible in-frame
    keypoint produces exactly one pixel of value 1.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((NUM_KEYPOINTS, height, width))
    for k, ((x, y), vis) in enumerate(zip(skeleton.keypoints, skeleton.visible)):
        if not vis:
            continue
        cx, cy = keypoint_pixel(x, y)
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        ch = np.exp(-d2 / (2.0 * sigma * sigma))
        ch[d2 > (3.0 * sigma) ** 2] = 0.0
        out[k] = ch
    return Heatmaps(out, float(sigma))


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    from scipy.ndimage import binary_dilation

    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return binary_dilation(mask, structure=(xx * xx + yy * yy) <= radius * radius)


def validate_sample(sample: PersonSample) -> PersonSample | ValidationReport:
    """Return ``sample`` untouched if every invariant holds, else a report."""
    bad = []
    px = sample.image.pixels
    h, w = px.shape[:2]
    if h < 8 or w < 8:
        bad.append(f"image size {h}x{w} below 8x8")
    if not np.all(np.isfinite(px)):
        bad.append("image has non-finite pixels")
    elif px.min() < 0.0 or px.max() > 1.0:
        bad.append(f"image range violation: values in [{px.min():.4g}, {px.max():.4g}]")

    kp, vis = sample.skeleton.keypoints, sample.skeleton.visible
    if not np.all(np.isfinite(kp[vis])):
        bad.append("skeleton has non-finite visible keypoints")
    for k in np.flatnonzero(vis):
        if not in_frame(kp[k, 0], kp[k, 1], h, w):
            bad.append(f"visible keypoint {KEYPOINT_NAMES[k]} outside frame")

    masks = sample.parts.masks
    if masks.shape != (NUM_PARTS, h, w):
        bad.append(f"part masks shape {masks.shape} != {(NUM_PARTS, h, w)}")
        return ValidationReport(bad)
    overlap = masks.sum(axis=0) > 1
    if overlap.any():
        pairs = sorted({
            (PART_NAMES[a], PART_NAMES[b])
            for a in range(NUM_PARTS) for b in range(a + 1, NUM_PARTS)
            if np.any(masks[a] & masks[b])
        })
        bad.append(f"part masks not disjoint: {pairs}")

    name_to_q = {n: q for q, n in enumerate(PART_NAMES)}
    for k in np.flatnonzero(vis):
        name = KEYPOINT_NAMES[k]
        cx, cy = keypoint_pixel(*kp[k])
        if not (0 <= cx < w and 0 <= cy < h):
            continue
        allowed = np.zeros((h, w), bool)
        for part in JOINT_PARTS[name]:
            allowed |= masks[name_to_q[part]]
        if not _dilate(allowed, 2)[cy, cx]:
            bad.append(f"keypoint {name} not within 2 px of parts {JOINT_PARTS[name]}")
    return sample if not bad else ValidationReport(bad)


# --- PNG / directory formats -------------------------------------------------

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def save_png(image: Image | np.ndarray, path, text: dict | None = None) -> None:
    px = image.pixels if isinstance(image, Image) else np.asarray(image)
    info = PngImagePlugin.PngInfo()
    for k, v in (text or {}).items():
        info.add_text(str(k), str(v))
    PILImage.fromarray(to_uint8(px), mode="RGB").save(path, pnginfo=info)


def load_png(path) -> Image:
    with PILImage.open(path) as im:
        return Image(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)


def _part_palette() -> list[int]:
    pal = [0, 0, 0]
    for q in range(NUM_PARTS):
        hue = q / NUM_PARTS
        rgb = np.clip(np.abs((hue * 6 + np.array([0, 4, 2])) % 6 - 3) - 1, 0, 1)
        pal.extend(int(c * 255) for c in rgb)
    return pal + [0] * (768 - len(pal))


def save_sample(sample: PersonSample, directory, text: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_png(sample.image, d / "image.png", text)
    meta = sample.skeleton.to_json()
    meta["identity_tag"] = sample.identity_tag
    meta.update(text or {})
    (d / "skeleton.json").write_text(json.dumps(meta, indent=1))
    parts = PILImage.fromarray(sample.parts.labels(), mode="P")
    parts.putpalette(_part_palette())
    parts.save(d / "parts.png")
    return d


def load_sample(directory) -> PersonSample:
    d = Path(directory)
    meta = json.loads((d / "skeleton.json").read_text())
    with PILImage.open(d / "parts.png") as im:
        labels = np.asarray(im)
    return PersonSample(
        image=load_png(d / "image.png"),
        skeleton=Skeleton.from_json(meta),
        parts=PartMaskSet.from_labels(labels),
        identity_tag=meta.get("identity_tag"),
    )
