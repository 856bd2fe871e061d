"""Appearance and motion-consistency losses.

All losses take batched ``(N,3,H,W)`` tensors (single images are promoted)
and average over the batch.  Appearance: ``l_rec``, ``l_perc``, ``l_att``
combined by ``l_appe``.  Motion consistency: ``l_content`` (global feature
distance over every extractor layer) and ``l_gram`` (per-part Gram statistics
on the first layer) combined by ``l_com``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import PartMaskSet
from .features import Extractor, as_batch, extract

APPE_WEIGHTS = {"rec": 1.0, "perc": 1.0, "att": 1.0}
COM_WEIGHTS = {"content": 1.0, "gram": 1.0}
MIN_PART_SITES = 4
CONTENT_MODES = ("pooled", "spatial")


@dataclass
class LossBreakdown:
    components: dict
    weights: dict
    total: torch.Tensor
    info: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "components": {k: float(v.detach()) for k, v in self.components.items()},
            "weights": dict(self.weights),
            **self.info,
        }


def _combine(components: dict, weights: dict, info=None) -> LossBreakdown:
    total = sum(weights[k] * v for k, v in components.items())
    return LossBreakdown(components, dict(weights), total, info or {})


def _pair(pred, target):
    a, b = as_batch(pred), as_batch(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b.to(a.dtype)


def l_rec(pred, target) -> torch.Tensor:
    """Mean absolute pixel difference."""
    a, b = _pair(pred, target)
    return (a - b).abs().mean()


def l_perc(pred, target, psi: Extractor) -> torch.Tensor:
    a, b = _pair(pred, target)
    return sum(((fa - fb) ** 2).mean() for fa, fb in zip(extract(psi, a), extract(psi, b)))


def l_att(pred_maps, target_maps) -> torch.Tensor:
    if len(pred_maps) != len(target_maps):
        raise ValueError("attention maps have different layer counts")
    total = 0.0
    for a, b in zip(pred_maps, target_maps):
        if a.shape != b.shape:
            raise ValueError(f"attention shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        total = total + (a - b.to(a.dtype)).abs().mean()
    return total


def l_appe(pred, target, pred_att, target_att, psi: Extractor, weights: dict | None = None) -> LossBreakdown:
    w = {**APPE_WEIGHTS, **(weights or {})}
    return _combine({
        "rec": l_rec(pred, target),
        "perc": l_perc(pred, target, psi),
        "att": l_att(pred_att, target_att),
    }, w)


def gram(feature_map: torch.Tensor) -> torch.Tensor:
    """``F F^T / N`` with F the (C, N=H*W) flattening; batched input gives (N_b, C, C).

    Per-site products are summed in sorted order, so any permutation of the
    spatial columns gives a bit-identical result.
    """
    flat = feature_map.flatten(-2)
    prods = flat[..., :, None, :] * flat[..., None, :, :]
    return torch.sort(prods, dim=-1).values.sum(-1) / flat.shape[-1]


def l_content(gen, ref, phi: Extractor, mode: str = "spatial") -> torch.Tensor:
    """Sum over layers of the per-image L2 feature distance, scaled by 1/sqrt(elements).

    ``mode="pooled"`` compares the global-average-pooled descriptor of each
    layer (C elements), which ignores where the figure is; ``"spatial"``
    compares the full C*H*W maps.
    """
    if mode not in CONTENT_MODES:
        raise ValueError(f"unknown content mode {mode!r}")
    a, b = _pair(gen, ref)
    total = 0.0
    for fa, fb in zip(extract(phi, a), extract(phi, b)):
        if mode == "pooled":
            fa, fb = fa.mean(dim=(2, 3)), fb.mean(dim=(2, 3))
        diff = (fa - fb).flatten(1)
        total = total + (torch.linalg.vector_norm(diff, dim=1) / np.sqrt(diff.shape[1])).mean()
    return total


def _masks(parts, n: int, dtype) -> torch.Tensor:
    if isinstance(parts, PartMaskSet):
        parts = parts.masks
    if isinstance(parts, np.ndarray):
        parts = torch.tensor(np.asarray(parts))
    if parts.dim() == 3:
        parts = parts.unsqueeze(0)
    if parts.shape[0] == 1 and n > 1:
        parts = parts.expand(n, *parts.shape[1:])
    return parts.to(dtype)


def downsample_masks(masks: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(masks, size=tuple(size), mode="nearest")


def gram_terms(gen, ref, gen_parts, ref_parts, phi: Extractor):
    """Per-image, per-part Gram distances on layer 1 and the parts skipped.

    Returns ``(terms, skipped)`` where ``terms`` is an (N, Q) tensor with zeros
    at skipped entries and ``skipped`` lists ``(image_index, part_index)``.
    """
    a, b = _pair(gen, ref)
    fa = extract(phi, a)[0]
    fb = extract(phi, b)[0]
    size = fa.shape[-2:]
    mg, mr = _masks(gen_parts, a.shape[0], a.dtype), _masks(ref_parts, a.shape[0], a.dtype)
    if mg.shape[-2:] != a.shape[-2:] or mr.shape != mg.shape:
        raise ValueError(f"part masks {tuple(mg.shape)} / {tuple(mr.shape)} do not match images {tuple(a.shape)}")
    mg, mr = downsample_masks(mg, size), downsample_masks(mr, size)
    valid = (mg.flatten(2).sum(-1) >= MIN_PART_SITES) & (mr.flatten(2).sum(-1) >= MIN_PART_SITES)
    diff = gram(mg[:, :, None] * fa[:, None]) - gram(mr[:, :, None] * fb[:, None])  # (N, Q, C, C)
    dist = torch.linalg.vector_norm(diff.flatten(2), dim=-1)
    terms = torch.where(valid, dist, torch.zeros_like(dist))
    skipped = [tuple(ix) for ix in (~valid).nonzero().tolist()]
    return terms, skipped


def l_gram(gen, ref, gen_parts, ref_parts, phi: Extractor) -> torch.Tensor:
    terms, _ = gram_terms(gen, ref, gen_parts, ref_parts, phi)
    return terms.sum(1).mean()


def l_com(gen, ref, gen_parts, ref_parts, phi: Extractor, weights: dict | None = None,
          content_mode: str = "spatial") -> LossBreakdown:
    w = {**COM_WEIGHTS, **(weights or {})}
    terms, skipped = gram_terms(gen, ref, gen_parts, ref_parts, phi)
    return _combine({
        "content": l_content(gen, ref, phi, content_mode),
        "gram": terms.sum(1).mean(),
    }, w, {"skipped_parts": skipped})
