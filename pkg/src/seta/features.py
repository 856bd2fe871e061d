"""Frozen convolutional feature extractors.

Two kinds share one architecture (four 3x3 stride-2 conv layers, widths
8/16/32/64, ReLU) and differ only in their seeded random weights:
``reid_analog`` feeds the motion-consistency losses, ``perceptual_analog``
feeds the perceptual loss and the evaluation metrics.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import DEFAULT_HEIGHT, DEFAULT_WIDTH, Image

KINDS = ("reid_analog", "perceptual_analog")
DEFAULT_SEEDS = {"reid_analog": 1, "perceptual_analog": 2}
WIDTHS = (8, 16, 32, 64)
KERNEL = 3
STRIDE = 2


@dataclass(frozen=True, eq=False)
class Extractor:
    kind: str
    weights: tuple  # ((W, b), ...) as read-only numpy arrays
    seed: int
    height: int = DEFAULT_HEIGHT
    width: int = DEFAULT_WIDTH

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def checksum(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        for w, b in self.weights:
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        shapes, h, w = [], self.height, self.width
        for (wt, _) in self.weights:
            h, w = (h - 1) // STRIDE + 1, (w - 1) // STRIDE + 1
            shapes.append((wt.shape[0], h, w))
        return shapes


def init_extractor(kind: str, seed: int | None = None, height: int = DEFAULT_HEIGHT,
                   width: int = DEFAULT_WIDTH) -> Extractor:
    if kind not in KINDS:
        raise ValueError(f"unknown extractor kind {kind!r}")
    seed = DEFAULT_SEEDS[kind] if seed is None else seed
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    layers, cin = [], 3
    for cout in WIDTHS:
        fan_in = cin * KERNEL * KERNEL
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, KERNEL, KERNEL))
        b = np.zeros(cout)
        w.setflags(write=False)
        b.setflags(write=False)
        layers.append((w, b))
        cin = cout
    return Extractor(kind, tuple(layers), seed, height, width)


def as_batch(image, dtype=torch.float64) -> torch.Tensor:
    """Image / HxWx3 array / (3,H,W) or (N,3,H,W) tensor -> (N,3,H,W) tensor."""
    if isinstance(image, Image):
        image = image.pixels
    if isinstance(image, np.ndarray):
        image = torch.tensor(np.asarray(image), dtype=dtype).permute(2, 0, 1)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return image


def extract(ex: Extractor, image) -> list[torch.Tensor]:
    """Per-layer feature maps, each (N, C_t, H_t, W_t).

    Differentiable with respect to the image; the extractor weights are
    constants.
    """
    x = as_batch(image)
    if tuple(x.shape[-2:]) != (ex.height, ex.width):
        raise ValueError(f"image is {tuple(x.shape[-2:])}, extractor expects {(ex.height, ex.width)}")
    x = x - 0.5
    feats = []
    for w, b in ex.weights:
        wt = torch.tensor(w, dtype=x.dtype)
        bt = torch.tensor(b, dtype=x.dtype)
        x = F.relu(F.conv2d(x, wt, bt, stride=STRIDE, padding=KERNEL // 2))
        feats.append(x)
    return feats


def descriptor(ex: Extractor, image, layer: int = 0) -> torch.Tensor:
    """Global-average-pooled features of one layer, (N, C_layer)."""
    return extract(ex, image)[layer].mean(dim=(2, 3))


def save_extractor(ex: Extractor, path) -> None:
    """Write in the parameter checkpoint format with the kind and seed in the header."""
    from .autodiff import ParameterSet, save_checkpoint

    tensors = {}
    for i, (w, b) in enumerate(ex.weights):
        tensors[f"conv{i}.w"] = torch.tensor(w)
        tensors[f"conv{i}.b"] = torch.tensor(b)
    save_checkpoint(ParameterSet(tensors), path,
                    {"extractor": {"kind": ex.kind, "seed": ex.seed, "height": ex.height, "width": ex.width}})


def load_extractor(path) -> Extractor:
    from .autodiff import load_checkpoint, read_header

    info = read_header(path).get("extractor")
    if info is None or info.get("kind") not in KINDS:
        raise ValueError(f"{path}: not an extractor checkpoint")
    p = load_checkpoint(path)
    layers = []
    for i in range(len(p.tensors) // 2):
        w = p.tensors[f"conv{i}.w"].numpy().copy()
        b = p.tensors[f"conv{i}.b"].numpy().copy()
        w.setflags(write=False)
        b.setflags(write=False)
        layers.append((w, b))
    return Extractor(info["kind"], tuple(layers), info["seed"], info["height"], info["width"])
