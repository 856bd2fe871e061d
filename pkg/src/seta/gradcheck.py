"""Finite-difference checks of every loss composed with the generator."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .autodiff import fd_grad, gather, grad, relative_error, sample_coords
from .features import as_batch, init_extractor
from .losses import l_appe, l_att, l_com, l_content, l_gram, l_perc, l_rec
from .model import ArchConfig, forward, init_model, pose_tensor

LOSSES = ("rec", "perc", "att", "appe", "content", "gram", "com")
TOLERANCE = 1e-4
CHECK_ARCH = ArchConfig(base_channels=8, tokens=4, token_dim=8)


@dataclass
class CheckResult:
    loss: str
    seed: int
    coords: int
    rel_error: float
    passed: bool

    def to_json(self) -> dict:
        return asdict(self)


def _problem(seed: int, arch: ArchConfig):
    """A random model plus one (reference, target pose, target image) triple with part layouts."""
    from .synth import make_domain, render_person, repose, sample_person, sample_pose

    domain = make_domain("ood_both")
    spec = sample_person(domain, seed)
    rng = np.random.default_rng(seed)
    ref = render_person(spec, arch.height, arch.width)
    tgt = render_person(repose(spec, sample_pose(domain, spec, rng, arch.height, arch.width)),
                        arch.height, arch.width)
    params = init_model(arch, seed)
    pose = pose_tensor(tgt.skeleton, arch)[None]
    ref_pose = pose_tensor(ref.skeleton, arch)[None]
    return params, as_batch(ref.image), pose, ref_pose, as_batch(tgt.image), ref.parts, tgt.parts


def loss_function(name: str, seed: int, arch: ArchConfig = CHECK_ARCH):
    """``(params, loss_fn)`` where ``loss_fn(tensors, None)`` is the named loss of the generator output."""
    if name not in LOSSES:
        raise ValueError(f"unknown loss {name!r}; choose from {LOSSES}")
    params, ref, pose, ref_pose, target, ref_parts, tgt_parts = _problem(seed, arch)
    psi = init_extractor("perceptual_analog", height=arch.height, width=arch.width)
    phi = init_extractor("reid_analog", height=arch.height, width=arch.width)
    # Attention here is a function of the pose alone, so maps for the target
    # pose would coincide with the prediction and park L1 on its kink; the
    # reference pose gives generic targets.
    with torch.no_grad():
        _, att_target = forward(params, ref, ref_pose)

    def fn(p, _):
        gen, att = forward(p, ref, pose)
        if name == "rec":
            return l_rec(gen, target)
        if name == "perc":
            return l_perc(gen, target, psi)
        if name == "att":
            return l_att(att, att_target)
        if name == "appe":
            return l_appe(gen, target, att, att_target, psi)
        if name == "content":
            return l_content(gen, ref, phi)
        if name == "gram":
            return l_gram(gen, ref, tgt_parts, ref_parts, phi)
        return l_com(gen, ref, tgt_parts, ref_parts, phi)

    return params, fn


def check(name: str, seed: int, coords: int = 200, eps: float = 1e-6,
          arch: ArchConfig = CHECK_ARCH) -> CheckResult:
    params, fn = loss_function(name, seed, arch)
    picks = sample_coords(params, coords, seed)
    _, g = grad(fn, params)
    numeric = fd_grad(fn, params, None, eps, picks).values
    err = relative_error(gather(g, picks), numeric)
    return CheckResult(name, seed, len(picks), err, err < TOLERANCE)


def run_all(names=LOSSES, seeds=(0, 1, 2, 3, 4), coords: int = 200) -> list[CheckResult]:
    return [check(n, s, coords) for n in names for s in seeds]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'loss':<8} {'seed':>4} {'coords':>6} {'rel_error':>10}  status"]
    for r in results:
        lines.append(f"{r.loss:<8} {r.seed:>4} {r.coords:>6} {r.rel_error:>10.2e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
