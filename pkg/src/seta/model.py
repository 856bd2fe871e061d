"""Toy attention-based pose-transfer generator.

``forward(params, reference, pose)`` has three parts:

* a texture encoder that pools the reference image into ``T`` texture tokens
  through a learned spatial soft-assignment,
* a skeleton encoder that turns target-pose heatmaps into spatial queries at
  each attention resolution,
* attention layers that softly assign every spatial site to the tokens, and a
  conv decoder whose output is blended, through a learned per-pixel gate, with
  the tokens' mean reference colours splatted through the finest attention map.

Parameters live in a flat :class:`~seta.autodiff.ParameterSet` so that the
adaptation code can treat the model as a pure function.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import PRETRAINED, AdamState, ParameterSet, adam_step, grad
from .core import DEFAULT_HEIGHT, DEFAULT_SIGMA, DEFAULT_WIDTH, NUM_KEYPOINTS, render_heatmaps
from .features import as_batch

ENCODER_GROUPS = ("tex", "skel", "dec")


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 16
    tokens: int = 8
    token_dim: int = 32
    attention_layers: int = 2
    height: int = DEFAULT_HEIGHT
    width: int = DEFAULT_WIDTH
    keypoints: int = NUM_KEYPOINTS
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        for name in ("base_channels", "tokens", "token_dim", "attention_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        step = 2 ** max(self.attention_layers, 2)
        if self.height % step or self.width % step:
            raise ValueError(f"height and width must be divisible by {step}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ArchConfig":
        return cls(**data)

    def widths(self) -> list[int]:
        """Encoder channel width at downsampling level 1..L."""
        return [self.base_channels * 2 ** i for i in range(self.attention_layers)]


def _shapes(arch: ArchConfig) -> dict:
    C, T, D, L, K = arch.base_channels, arch.tokens, arch.token_dim, arch.attention_layers, arch.keypoints
    w = arch.widths()
    s = {}
    cin = K
    for i in range(L):
        s[f"skel.conv{i}.w"] = (w[i], cin, 3, 3)
        s[f"skel.conv{i}.b"] = (w[i],)
        cin = w[i]
    cin = 5  # rgb + xy coordinates
    for i in range(L):
        s[f"tex.conv{i}.w"] = (w[i], cin, 3, 3)
        s[f"tex.conv{i}.b"] = (w[i],)
        cin = w[i]
    pooled = w[-1] + 3
    s["tex.assign.w"] = (T, pooled)
    s["tex.assign.b"] = (T,)
    s["tex.prior"] = (T, (arch.height // 2 ** L) * (arch.width // 2 ** L))
    s["tex.token.w"] = (D, pooled)
    s["tex.token.b"] = (D,)
    for l in range(L):
        level = L - 1 - l  # coarse to fine
        s[f"attn{l}.query.w"] = (D, w[level])
        s[f"attn{l}.query.b"] = (D,)
        s[f"attn{l}.key"] = (T, D)
        s[f"attn{l}.value.w"] = (D, D)
    cin = D
    for l in range(L):
        level = L - 1 - l
        if l > 0:
            cin = w[level + 1] + D
        s[f"dec.conv{l}.w"] = (w[level], cin, 3, 3)
        s[f"dec.conv{l}.b"] = (w[level],)
    s["dec.full.w"] = (C, w[0], 3, 3)
    s["dec.full.b"] = (C,)
    s["dec.out.w"] = (3, C, 3, 3)
    s["dec.out.b"] = (3,)
    s["dec.gate.w"] = (1, C, 3, 3)
    s["dec.gate.b"] = (1,)
    return s


_LINEAR_OUT = ("tex.assign.w", "tex.token.w", "dec.out.w", "dec.gate.w")


def init_model(arch: ArchConfig = ArchConfig(), seed: int = 0, dtype: torch.dtype = torch.float64) -> ParameterSet:
    """Seeded fan-in initialisation; SiLU-fed layers get a He-style gain of sqrt(2)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _shapes(arch).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "tex.prior":
            arr = _blob_prior(arch)
        elif name.endswith(".key"):
            arr = rng.normal(0.0, 1.0, size=shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if (name in _LINEAR_OUT or name.startswith("attn")) else 2.0
            arr = rng.normal(0.0, math.sqrt(gain / fan_in), size=shape)
        tensors[name] = torch.tensor(arr, dtype=dtype)
    return ParameterSet(tensors, PRETRAINED, {"arch": arch.to_json(), "seed": seed})


def _blob_prior(arch: ArchConfig) -> np.ndarray:
    """Token-assignment logits that start as Gaussian blobs tiling the frame centre."""
    L = arch.attention_layers
    h, w = arch.height // 2 ** L, arch.width // 2 ** L
    ys, xs = np.mgrid[0:h, 0:w]
    cols = 2
    rows = -(-arch.tokens // cols)
    out = np.empty((arch.tokens, h * w))
    for t in range(arch.tokens):
        cy = (t // cols + 0.5) / rows * h
        cx = w / 2 + (t % cols - 0.5) * w / 4
        out[t] = -((ys - cy) ** 2 / (h / rows) ** 2 + (xs - cx) ** 2 / (w / 4) ** 2).ravel()
    return 2.0 * out


def arch_of(params: ParameterSet) -> ArchConfig:
    return ArchConfig.from_json(params.meta["arch"])


def _coords(n, h, w, dtype):
    ys = torch.linspace(-1, 1, h, dtype=dtype).view(1, 1, h, 1).expand(n, 1, h, w)
    xs = torch.linspace(-1, 1, w, dtype=dtype).view(1, 1, 1, w).expand(n, 1, h, w)
    return torch.cat([xs, ys], 1)


def _conv(p, name, x, stride=1):
    return F.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=1)


def _as_pose(pose, dtype) -> torch.Tensor:
    if hasattr(pose, "channels"):
        pose = pose.channels
    if isinstance(pose, np.ndarray):
        pose = torch.tensor(np.asarray(pose), dtype=dtype)
    if pose.dim() == 3:
        pose = pose.unsqueeze(0)
    return pose.to(dtype)


def forward(params, reference, pose) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Generate ``(N,3,H,W)`` images and per-layer ``(N,T,S_l)`` attention maps.

    ``params`` may be a ParameterSet or its tensor dict.  Attention columns are
    softmax distributions over the T tokens.
    """
    p = params.tensors if isinstance(params, ParameterSet) else params
    dtype = next(iter(p.values())).dtype
    ref = as_batch(reference, dtype).to(dtype)
    hm = _as_pose(pose, dtype)
    if ref.shape[0] != hm.shape[0] or ref.shape[-2:] != hm.shape[-2:]:
        raise ValueError(f"reference {tuple(ref.shape)} and pose {tuple(hm.shape)} do not match")
    if hm.shape[1] != p["skel.conv0.w"].shape[1]:
        raise ValueError(f"pose has {hm.shape[1]} channels, model expects {p['skel.conv0.w'].shape[1]}")
    L = sum(1 for k in p if k.startswith("skel.conv") and k.endswith(".w"))
    n = ref.shape[0]

    skel = [hm]
    for i in range(L):
        skel.append(F.silu(_conv(p, f"skel.conv{i}", skel[-1], stride=2)))

    x = torch.cat([ref, _coords(n, ref.shape[2], ref.shape[3], dtype)], 1)
    for i in range(L):
        x = F.silu(_conv(p, f"tex.conv{i}", x, stride=2))
    colour = F.adaptive_avg_pool2d(ref, x.shape[-2:])
    feats = torch.cat([x, colour], 1).flatten(2)  # (N, Cf, S)
    assign = torch.softmax(torch.einsum("tc,ncs->nts", p["tex.assign.w"], feats)
                           + p["tex.assign.b"][None, :, None] + p["tex.prior"][None], dim=2)
    pooled = torch.einsum("nts,ncs->ntc", assign, feats)
    tokens = pooled @ p["tex.token.w"].T + p["tex.token.b"]  # (N, T, D)

    attn_maps = []
    h = None
    for l in range(L):
        s = skel[L - l]
        q = torch.einsum("dc,nchw->ndhw", p[f"attn{l}.query.w"], s) + p[f"attn{l}.query.b"][None, :, None, None]
        keys = p[f"attn{l}.key"]
        values = tokens @ p[f"attn{l}.value.w"].T  # (N, T, D)
        logits = torch.einsum("td,nds->nts", keys, q.flatten(2)) / math.sqrt(keys.shape[-1])
        a = torch.softmax(logits, dim=1)
        attn_maps.append(a)
        out = torch.einsum("ntd,nts->nds", values, a).view(n, -1, *s.shape[-2:])
        if h is None:
            h = out
        else:
            h = torch.cat([F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False), out], 1)
        h = F.silu(_conv(p, f"dec.conv{l}", h))
    h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
    h = F.silu(_conv(p, "dec.full", h))
    # Splat each token's pooled reference colour through the finest attention map,
    # then blend with the decoded residual image through a learned per-pixel gate.
    fine = F.interpolate(a.view(n, -1, *s.shape[-2:]), size=ref.shape[-2:], mode="bilinear",
                         align_corners=False)
    splat = torch.einsum("ntc,nthw->nchw", pooled[..., -3:], fine)
    gate = torch.sigmoid(_conv(p, "dec.gate", h))
    return gate * splat + (1 - gate) * torch.sigmoid(_conv(p, "dec.out", h)), attn_maps


def to_image(batch: torch.Tensor) -> np.ndarray:
    """First image of an (N,3,H,W) batch as an HxWx3 numpy array."""
    return batch[0].detach().permute(1, 2, 0).cpu().double().numpy()


def pose_tensor(skeleton, arch: ArchConfig, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(render_heatmaps(skeleton, arch.sigma, arch.height, arch.width).channels,
                           dtype=dtype)


# --- pretraining --------------------------------------------------------------------

def make_pair_batch(source, rng: np.random.Generator, batch: int, arch: ArchConfig, dtype=torch.float32):
    """(reference A, pose-B heatmaps, target B) for ``batch`` fresh identities."""
    from .synth import render_person, repose, sample_person, sample_pose

    refs, poses, targets = [], [], []
    for _ in range(batch):
        spec = sample_person(source, int(rng.integers(2**31)), arch.height, arch.width)
        b = render_person(repose(spec, sample_pose(source, spec, rng, arch.height, arch.width)),
                          arch.height, arch.width)
        a = render_person(spec, arch.height, arch.width)
        refs.append(as_batch(a.image, dtype))
        poses.append(pose_tensor(b.skeleton, arch, dtype)[None])
        targets.append(as_batch(b.image, dtype))
    return torch.cat(refs), torch.cat(poses), torch.cat(targets)


def pretrain(params: ParameterSet, source, steps: int, seed: int = 0, lr: float = 2e-3,
             batch: int = 8, psi=None, weights=None, betas=(0.5, 0.99), log_every: int = 0,
             dtype: torch.dtype = torch.float32) -> tuple[ParameterSet, list[float]]:
    """Supervised training on same-identity pose pairs drawn from ``source``.

    Each step draws ``batch`` identities, renders each in two poses, and fits
    (image A, pose B) -> image B under the appearance loss components, with
    the model's own attention on the target image as attention target.
    """
    from .features import init_extractor
    from .losses import l_appe

    if steps < 1:
        raise ValueError("steps must be >= 1")
    arch = arch_of(params)
    psi = psi or init_extractor("perceptual_analog", height=arch.height, width=arch.width)
    rng = np.random.default_rng(seed)
    work = params.to(dtype)
    state = AdamState.zeros_like(work, *betas)
    curve = []

    def loss_fn(p, data):
        ref, pose, target = data
        with torch.no_grad():
            _, att_target = forward(p, target, pose)
        pred, att = forward(p, ref, pose)
        return l_appe(pred, target, att, att_target, psi, weights)

    for step in range(steps):
        data = make_pair_batch(source, rng, batch, arch, dtype)
        try:
            value, g = grad(loss_fn, work, data)
        except ArithmeticError as exc:
            raise ArithmeticError(f"pretraining diverged at step {step}: {exc}") from exc
        work, state = adam_step(state, work, g, lr)
        curve.append(value)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {value:.4f}", flush=True)
    out = work.to(torch.float64)
    out.stage = PRETRAINED
    out.meta = {**params.meta, "pretrain": {"steps": steps, "seed": seed, "lr": lr, "batch": batch,
                                            "source": source.name}}
    return out, curve
