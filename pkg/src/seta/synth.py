"""Procedural 2-D articulated person figures.

A :class:`PersonSpec` fixes an identity (limb lengths, per-part colours and
patterns) and a pose (10 joint angles).  :func:`render_person` rasterises it
with anti-aliased capsule limbs, a rectangular torso and a round head, and
returns exact keypoints and part masks alongside the image.  Because
:func:`repose` keeps the identity fixed, ``render_person(repose(spec, a))`` is
a pixel-exact ground truth for pose transfer.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_HEIGHT, DEFAULT_WIDTH, KEYPOINT_NAMES, NUM_PARTS, PART_NAMES,
    Image, PartMaskSet, PersonSample, Skeleton,
)

JOINT_NAMES = (
    "r_shoulder", "l_shoulder", "r_elbow", "l_elbow",
    "r_hip", "l_hip", "r_knee", "l_knee", "torso_lean", "head_tilt",
)
NUM_JOINTS = len(JOINT_NAMES)

LIMB_NAMES = (
    "head_radius", "neck_gap", "torso_len", "torso_half_width", "shoulder_half",
    "hip_half", "upper_arm", "lower_arm", "upper_leg", "lower_leg", "limb_radius",
)
PATTERNS = ("solid", "stripes", "dots")

BACKGROUND = (0.9, 0.9, 0.9)
PATTERN_DARKEN = 0.55
HEIGHT_FRACTION = 0.8

PALETTE_A = (
    (0.55, 0.15, 0.15), (0.15, 0.20, 0.50), (0.35, 0.25, 0.15), (0.30, 0.30, 0.30),
    (0.20, 0.40, 0.25), (0.45, 0.30, 0.45), (0.60, 0.45, 0.30), (0.15, 0.35, 0.45),
    (0.50, 0.20, 0.35), (0.25, 0.25, 0.45), (0.40, 0.40, 0.20), (0.10, 0.10, 0.15),
)
PALETTE_B = (
    (0.95, 0.85, 0.10), (0.10, 0.90, 0.40), (0.95, 0.40, 0.75), (0.20, 0.85, 0.95),
    (1.00, 0.55, 0.10), (0.60, 0.95, 0.20), (0.75, 0.35, 0.95), (0.95, 0.20, 0.20),
    (0.30, 0.50, 1.00), (0.10, 0.70, 0.70), (0.85, 0.60, 0.90), (0.70, 0.20, 0.55),
)

_NOMINAL_LIMBS = {
    "head_radius": 3.6, "neck_gap": 1.0, "torso_len": 15.0, "torso_half_width": 4.8,
    "shoulder_half": 4.4, "hip_half": 3.2, "upper_arm": 7.4, "lower_arm": 6.8,
    "upper_leg": 12.0, "lower_leg": 11.5, "limb_radius": 2.2,
}
_SOURCE_ANGLES = (
    (0.15, 0.90), (0.15, 0.90), (-0.30, 0.60), (-0.30, 0.60),
    (0.00, 0.30), (0.00, 0.30), (-0.05, 0.30), (-0.05, 0.30),
    (-0.12, 0.12), (-0.20, 0.20),
)
_EXTREME_ANGLES = (
    (0.15, 2.60), (0.15, 2.60), (-0.50, 1.10), (-0.50, 1.10),
    (0.00, 0.62), (0.00, 0.62), (-0.05, 0.45), (-0.05, 0.45),
    (-0.25, 0.25), (-0.35, 0.35),
)


@dataclass(frozen=True)
class DomainConfig:
    name: str
    angle_ranges: tuple
    palette: tuple
    pattern_set: tuple
    limb_length_ranges: dict = field(hash=False)
    pattern_scale_range: tuple = (3.0, 6.0)

    def __post_init__(self):
        if len(self.angle_ranges) != NUM_JOINTS:
            raise ValueError(f"need {NUM_JOINTS} angle ranges")
        if any(lo > hi for lo, hi in self.angle_ranges):
            raise ValueError("angle range with lo > hi")
        if not self.palette:
            raise ValueError("palette must be non-empty")
        if any(p not in PATTERNS for p in self.pattern_set):
            raise ValueError(f"unknown pattern in {self.pattern_set}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "DomainConfig":
        return cls(
            name=data["name"],
            angle_ranges=tuple(tuple(r) for r in data["angle_ranges"]),
            palette=tuple(tuple(c) for c in data["palette"]),
            pattern_set=tuple(data["pattern_set"]),
            limb_length_ranges={k: tuple(v) for k, v in data["limb_length_ranges"].items()},
            pattern_scale_range=tuple(data["pattern_scale_range"]),
        )


@dataclass(frozen=True)
class PersonSpec:
    joint_angles: tuple
    limb_lengths: dict = field(hash=False)
    colors: tuple  # one RGB triple per part
    patterns: tuple  # one pattern id per part
    pattern_scale: float
    identity: str = ""

    def angles(self) -> np.ndarray:
        return np.asarray(self.joint_angles, dtype=np.float64)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "PersonSpec":
        return cls(
            joint_angles=tuple(data["joint_angles"]),
            limb_lengths=dict(data["limb_lengths"]),
            colors=tuple(tuple(c) for c in data["colors"]),
            patterns=tuple(data["patterns"]),
            pattern_scale=float(data["pattern_scale"]),
            identity=data.get("identity", ""),
        )


PRESETS = ("source", "ood_appearance", "ood_skeleton", "ood_both")


def make_domain(preset: str) -> DomainConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown domain preset {preset!r}; expected one of {PRESETS}")
    limbs = {k: (0.93 * v, 1.07 * v) for k, v in _NOMINAL_LIMBS.items()}
    novel_look = preset in ("ood_appearance", "ood_both")
    novel_pose = preset in ("ood_skeleton", "ood_both")
    return DomainConfig(
        name=preset,
        angle_ranges=_EXTREME_ANGLES if novel_pose else _SOURCE_ANGLES,
        palette=PALETTE_B if novel_look else PALETTE_A,
        pattern_set=PATTERNS if novel_look else ("solid",),
        limb_length_ranges=limbs,
    )


def sample_angles(domain: DomainConfig, rng: np.random.Generator) -> tuple:
    return tuple(float(rng.uniform(lo, hi)) for lo, hi in domain.angle_ranges)


def fits(spec: PersonSpec, height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> bool:
    try:
        layout(spec, height, width)
    except ValueError:
        return False
    return True


def sample_pose(domain: DomainConfig, spec: PersonSpec, rng: np.random.Generator,
                height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH, max_tries: int = 200) -> tuple:
    """Draw joint angles from ``domain`` that keep ``spec``'s figure inside the frame.

    Draws are uniform over the configured ranges, conditioned on fitting.
    """
    for _ in range(max_tries):
        angles = sample_angles(domain, rng)
        if fits(repose(spec, angles), height, width):
            return angles
    raise RuntimeError(f"no fitting pose found in {max_tries} draws")


def sample_person(domain: DomainConfig, seed: int,
                  height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> PersonSpec:
    rng = np.random.default_rng(seed)
    limbs = {k: float(rng.uniform(*domain.limb_length_ranges[k])) for k in LIMB_NAMES}
    colors = tuple(tuple(domain.palette[i]) for i in rng.integers(len(domain.palette), size=NUM_PARTS))
    patterns = tuple(domain.pattern_set[i] for i in rng.integers(len(domain.pattern_set), size=NUM_PARTS))
    scale = float(rng.uniform(*domain.pattern_scale_range))
    spec = PersonSpec((0.0,) * NUM_JOINTS, limbs, colors, patterns, scale, identity=f"{domain.name}:{seed}")
    return repose(spec, sample_pose(domain, spec, rng, height, width))


def repose(spec: PersonSpec, new_angles) -> PersonSpec:
    new_angles = tuple(float(a) for a in new_angles)
    if len(new_angles) != NUM_JOINTS:
        raise ValueError(f"need {NUM_JOINTS} joint angles")
    return dataclasses.replace(spec, joint_angles=new_angles)


# --- geometry ------------------------------------------------------------------

def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _down(angle: float, side: float) -> np.ndarray:
    """Unit vector rotated away from straight-down; ``side`` -1 swings toward -x."""
    return np.array([side * np.sin(angle), np.cos(angle)])


def neutral_height(limbs: dict) -> float:
    return (2 * limbs["head_radius"] + limbs["neck_gap"] + limbs["torso_len"]
            + limbs["upper_leg"] + limbs["lower_leg"] + limbs["limb_radius"])


def _kinematics(spec: PersonSpec) -> dict:
    """Joint positions in body units with the pelvis at the origin."""
    L = spec.limb_lengths
    a = dict(zip(JOINT_NAMES, spec.joint_angles))
    R = _rot(a["torso_lean"])
    pelvis = np.zeros(2)
    neck = pelvis + R @ np.array([0.0, -L["torso_len"]])
    head = neck + _rot(a["torso_lean"] + a["head_tilt"]) @ np.array([0.0, -(L["neck_gap"] + L["head_radius"])])
    p = {"pelvis": pelvis, "neck": neck, "head": head}
    for side, s in (("r", -1.0), ("l", 1.0)):
        sh = neck + R @ np.array([s * L["shoulder_half"], 1.0])
        upper = R @ _down(a[f"{side}_shoulder"], s)
        lower = R @ _down(a[f"{side}_shoulder"] + a[f"{side}_elbow"], s)
        el = sh + L["upper_arm"] * upper
        p[f"{side}_shoulder"], p[f"{side}_elbow"] = sh, el
        p[f"{side}_wrist"] = el + L["lower_arm"] * lower
        hip = pelvis + np.array([s * L["hip_half"], 0.0])
        knee = hip + L["upper_leg"] * _down(a[f"{side}_hip"], s)
        p[f"{side}_hip"], p[f"{side}_knee"] = hip, knee
        p[f"{side}_ankle"] = knee + L["lower_leg"] * _down(a[f"{side}_hip"] + a[f"{side}_knee"], s)
    return p


def _primitives(p: dict, L: dict, lean: float, tilt: float) -> dict:
    r = L["limb_radius"]
    return {
        "r_leg": ("capsules", [(p["r_hip"], p["r_knee"]), (p["r_knee"], p["r_ankle"])], r),
        "l_leg": ("capsules", [(p["l_hip"], p["l_knee"]), (p["l_knee"], p["l_ankle"])], r),
        "torso": ("box", p["neck"], p["pelvis"], L["torso_half_width"]),
        "head": ("circle", p["head"], L["head_radius"], lean + tilt),
        "r_upper_arm": ("capsules", [(p["r_shoulder"], p["r_elbow"])], r),
        "l_upper_arm": ("capsules", [(p["l_shoulder"], p["l_elbow"])], r),
        "r_lower_arm": ("capsules", [(p["r_elbow"], p["r_wrist"])], r),
        "l_lower_arm": ("capsules", [(p["l_elbow"], p["l_wrist"])], r),
    }


def _extent_points(prims: dict) -> np.ndarray:
    pts = []
    for prim in prims.values():
        if prim[0] == "capsules":
            for a, b in prim[1]:
                for c in (a, b):
                    pts += [c + [prim[2], 0], c - [prim[2], 0], c + [0, prim[2]], c - [0, prim[2]]]
        elif prim[0] == "box":
            top, bottom, hw = prim[1], prim[2], prim[3]
            axis = (bottom - top) / np.linalg.norm(bottom - top)
            perp = np.array([-axis[1], axis[0]])
            pts += [top + hw * perp, top - hw * perp, bottom + hw * perp, bottom - hw * perp]
        else:
            c, r = prim[1], prim[2]
            pts += [c + [r, 0], c - [r, 0], c + [0, r], c - [0, r]]
    return np.asarray(pts)


def _transform(p: dict, prims: dict, scale: float, shift: np.ndarray):
    f = lambda v: v * scale + shift  # noqa: E731
    p2 = {k: f(v) for k, v in p.items()}
    out = {}
    for name, prim in prims.items():
        if prim[0] == "capsules":
            out[name] = ("capsules", [(f(a), f(b)) for a, b in prim[1]], prim[2] * scale)
        elif prim[0] == "box":
            out[name] = ("box", f(prim[1]), f(prim[2]), prim[3] * scale)
        else:
            out[name] = ("circle", f(prim[1]), prim[2] * scale, prim[3])
    return p2, out


def _segment_coords(xs, ys, a, b):
    """Distance to segment a-b plus (along, across) local coordinates."""
    d = b - a
    length = max(np.hypot(*d), 1e-12)
    axis = d / length
    rx, ry = xs - a[0], ys - a[1]
    along = rx * axis[0] + ry * axis[1]
    across = -rx * axis[1] + ry * axis[0]
    t = np.clip(along, 0.0, length)
    dist = np.hypot(rx - t * axis[0], ry - t * axis[1])
    return dist, along, across


def _sdf_and_local(prim, xs, ys):
    kind = prim[0]
    if kind == "capsules":
        best = None
        for a, b in prim[1]:
            dist, u, v = _segment_coords(xs, ys, a, b)
            if best is None:
                best = (dist, u, v)
            else:
                closer = dist < best[0]
                best = tuple(np.where(closer, n, o) for n, o in zip((dist, u, v), best))
        return best[0] - prim[2], best[1], best[2]
    if kind == "box":
        top, bottom, hw = prim[1], prim[2], prim[3]
        _, u, v = _segment_coords(xs, ys, top, bottom)
        half_len = np.hypot(*(bottom - top)) / 2
        qx = np.abs(u - half_len) - half_len
        qy = np.abs(v) - hw
        outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
        return outside + np.minimum(np.maximum(qx, qy), 0), u, v
    c, r, theta = prim[1], prim[2], prim[3]
    rx, ry = xs - c[0], ys - c[1]
    cs, sn = np.cos(theta), np.sin(theta)
    return np.hypot(rx, ry) - r, cs * ry - sn * rx, cs * rx + sn * ry


def _pattern(kind: str, u, v, scale: float):
    if kind == "solid":
        return np.ones_like(u)
    if kind == "stripes":
        return np.where(np.floor(u / scale) % 2 == 1, PATTERN_DARKEN, 1.0)
    cu = np.mod(u, scale) - scale / 2
    cv = np.mod(v, scale) - scale / 2
    return np.where(cu * cu + cv * cv < (0.3 * scale) ** 2, PATTERN_DARKEN, 1.0)


def layout(spec: PersonSpec, height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH):
    """Pixel-space joints and drawing primitives for ``spec``.

    Scale depends only on limb lengths (the neutral standing figure spans 80% of
    the frame height); the figure is then centred with an integer shift.
    """
    L = spec.limb_lengths
    if any(L[k] <= 0 for k in LIMB_NAMES):
        raise ValueError("degenerate spec: limb lengths must be positive")
    a = dict(zip(JOINT_NAMES, spec.joint_angles))
    p = _kinematics(spec)
    prims = _primitives(p, L, a["torso_lean"], a["head_tilt"])
    scale = HEIGHT_FRACTION * height / neutral_height(L)
    ext = _extent_points(prims) * scale
    lo, hi = ext.min(axis=0), ext.max(axis=0)
    centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    shift = np.round(centre - (lo + hi) / 2.0)
    if np.any(lo + shift < -0.5) or hi[0] + shift[0] > width - 0.5 or hi[1] + shift[1] > height - 0.5:
        raise ValueError(f"figure does not fit a {height}x{width} frame")
    return _transform(p, prims, scale, shift)


def render_person(spec: PersonSpec, height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> PersonSample:
    joints, prims = layout(spec, height, width)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.empty((height, width, 3))
    img[:] = BACKGROUND
    labels = np.zeros((height, width), dtype=np.uint8)
    for q, name in enumerate(PART_NAMES):
        sdf, u, v = _sdf_and_local(prims[name], xs, ys)
        alpha = np.clip(0.5 - sdf, 0.0, 1.0)[..., None]
        colour = np.asarray(spec.colors[q])[None, None, :] * _pattern(spec.patterns[q], u, v, spec.pattern_scale)[..., None]
        img = img * (1 - alpha) + colour * alpha
        labels[sdf <= 0] = q + 1
    kp = np.array([joints[n] for n in KEYPOINT_NAMES])
    skel = Skeleton(kp, np.ones(len(KEYPOINT_NAMES), bool))
    return PersonSample(Image(np.clip(img, 0, 1)), skel, PartMaskSet.from_labels(labels), spec.identity)


def write_dataset(domain: DomainConfig, count: int, seed: int, out_dir, height=DEFAULT_HEIGHT, width=DEFAULT_WIDTH,
                  text: dict | None = None) -> dict:
    """Render ``count`` persons into numbered sample directories plus manifest.json."""
    from pathlib import Path

    from .core import save_sample

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        spec = sample_person(domain, seed + i)
        d = save_sample(render_person(spec, height, width), out / f"{i:05d}", text)
        (d / "spec.json").write_text(json.dumps(spec.to_json()))
        entries.append({
            "dir": d.name,
            "files": ["image.png", "skeleton.json", "parts.png", "spec.json"],
            "seed": seed + i,
            "identity": spec.identity,
        })
    manifest = {"domain": domain.to_json(), "count": count, "seed": seed,
                "height": height, "width": width, "samples": entries, **(text or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
