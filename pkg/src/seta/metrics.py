"""SSIM, a feature-space perceptual distance, and a Fréchet distance over
pooled extractor embeddings, plus the per-condition evaluation report."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .features import Extractor, as_batch, extract

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EIG_FLOOR = -1e-8


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid window positions and channels (Gaussian 11x11, sigma 1.5)."""
    return float(ssim_batch(a, b, data_range).mean())


def ssim_batch(a, b, data_range: float = 1.0) -> np.ndarray:
    x = as_batch(a).double()
    y = as_batch(b).double()
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c = x.shape[1]
    win = torch.tensor(gaussian_window(), dtype=torch.float64)[None, None].repeat(c, 1, 1, 1)
    blur = lambda t: F.conv2d(t, win, groups=c)  # noqa: E731
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return smap.mean(dim=(1, 2, 3)).numpy()


def _unit(f: torch.Tensor) -> torch.Tensor:
    return f / (torch.linalg.vector_norm(f, dim=1, keepdim=True) + 1e-10)


def perceptual_distance_batch(a, b, psi: Extractor) -> np.ndarray:
    x, y = as_batch(a).double(), as_batch(b).double()
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    with torch.no_grad():
        total = torch.zeros(x.shape[0], dtype=torch.float64)
        for fx, fy in zip(extract(psi, x), extract(psi, y)):
            total += ((_unit(fx) - _unit(fy)) ** 2).mean(dim=(1, 2, 3))
    return total.numpy()


def perceptual_distance(a, b, psi: Extractor) -> float:
    """Sum over layers of the mean squared difference of channel-normalised features."""
    return float(perceptual_distance_batch(a, b, psi).mean())


def embed(images, psi: Extractor) -> np.ndarray:
    """Global-average-pooled last-layer features, one row per image."""
    x = as_batch(images).double()
    with torch.no_grad():
        return extract(psi, x)[-1].mean(dim=(2, 3)).numpy()


def _psd_sqrt_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = (m + m.T) / 2
    vals, vecs = np.linalg.eigh(m)
    floor = EIG_FLOOR * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if np.any(vals < floor):
        raise ArithmeticError(f"matrix square root failed: eigenvalue {vals.min():.3g} is negative")
    return np.clip(vals, 0, None), vecs


def frechet_from_embeddings(ea: np.ndarray, eb: np.ndarray) -> float:
    """Fréchet distance between Gaussians fitted to two embedding sets (rows = samples)."""
    ea = np.atleast_2d(np.asarray(ea, dtype=np.float64))
    eb = np.atleast_2d(np.asarray(eb, dtype=np.float64))
    if ea.shape[0] == 1 and ea.shape[1] > 1 and eb.shape[0] == 1:
        ea, eb = ea.T, eb.T
    d = ea.shape[1]
    if eb.shape[1] != d:
        raise ValueError("embedding dimensions differ")
    if min(ea.shape[0], eb.shape[0]) < d + 2:
        raise ValueError(f"each set needs at least {d + 2} samples for dimension {d}")
    mu_a, mu_b = ea.mean(0), eb.mean(0)
    cov_a = np.atleast_2d(np.cov(ea, rowvar=False))
    cov_b = np.atleast_2d(np.cov(eb, rowvar=False))
    # Tr sqrt(A B) = Tr sqrt(A^1/2 B A^1/2), the latter symmetric PSD.
    vals, vecs = _psd_sqrt_eig(cov_a)
    root_a = (vecs * np.sqrt(vals)) @ vecs.T
    inner, _ = _psd_sqrt_eig(root_a @ cov_b @ root_a)
    tr_sqrt = np.sqrt(inner).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)


def frechet_distance(set_a, set_b, psi: Extractor) -> float:
    return frechet_from_embeddings(embed(set_a, psi), embed(set_b, psi))


# --- reports ------------------------------------------------------------------------

@dataclass
class ConditionMetrics:
    label: str
    ssim_mean: float
    perceptual_mean: float
    frechet: float | None
    count: int
    ssim: list = field(default_factory=list)
    perceptual: list = field(default_factory=list)
    note: str = ""
    groups: list = field(default_factory=list)  # identity index per pair, empty when ungrouped

    def group_means(self) -> dict:
        """``{"ssim": array, "perceptual": array}`` of per-identity means, in group order."""
        groups = np.asarray(self.groups if self.groups else [0] * self.count)
        keys = list(dict.fromkeys(groups.tolist()))
        s, p = np.asarray(self.ssim), np.asarray(self.perceptual)
        return {"ssim": np.array([s[groups == g].mean() for g in keys]),
                "perceptual": np.array([p[groups == g].mean() for g in keys])}


@dataclass
class MetricsReport:
    conditions: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def add(self, cm: ConditionMetrics) -> "MetricsReport":
        self.conditions[cm.label] = cm
        return self

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        self.conditions.update(other.conditions)
        self.seeds.update(other.seeds)
        return self

    def __getitem__(self, label: str) -> ConditionMetrics:
        return self.conditions[label]

    def to_json(self) -> dict:
        return {"conditions": {k: asdict(v) for k, v in self.conditions.items()}, "seeds": self.seeds}

    @classmethod
    def from_json(cls, data: dict) -> "MetricsReport":
        return cls({k: ConditionMetrics(**v) for k, v in data["conditions"].items()}, data.get("seeds", {}))

    def to_csv(self, extra: dict | None = None) -> str:
        """One row per condition; ``extra`` maps column name -> {label: value}."""
        extra = extra or {}
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["condition", "count", "ssim_mean", "perceptual_mean", "frechet", *extra])
        for cm in self.conditions.values():
            w.writerow([cm.label, cm.count, cm.ssim_mean, cm.perceptual_mean, cm.frechet,
                        *(col.get(cm.label, "") for col in extra.values())])
        return buf.getvalue()

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def generate(params, refs: torch.Tensor, poses: torch.Tensor, batch: int = 32) -> torch.Tensor:
    """Run the generator (a ParameterSet or a ``(refs, poses) -> images`` callable) in chunks."""
    from .autodiff import ParameterSet
    from .model import forward

    outs = []
    with torch.no_grad():
        for i in range(0, refs.shape[0], batch):
            if isinstance(params, ParameterSet):
                outs.append(forward(params, refs[i:i + batch].to(params.dtype), poses[i:i + batch])[0])
            else:
                outs.append(params(refs[i:i + batch], poses[i:i + batch]))
    return torch.cat(outs).double()


def stack_pairs(eval_pairs, sigma: float | None = None):
    """``[(sample, target Skeleton, ground-truth Image)]`` -> (refs, heatmaps, targets) tensors."""
    from .core import DEFAULT_SIGMA, render_heatmaps

    sigma = DEFAULT_SIGMA if sigma is None else sigma
    refs, poses, gts = [], [], []
    for sample, skel, gt in eval_pairs:
        h, w = sample.image.height, sample.image.width
        refs.append(as_batch(sample.image))
        poses.append(torch.tensor(render_heatmaps(skel, sigma, h, w).channels)[None])
        gts.append(as_batch(gt))
    return torch.cat(refs), torch.cat(poses), torch.cat(gts)


def score(fake: torch.Tensor, gts: torch.Tensor, psi: Extractor, label: str = "eval", seed=None,
          groups=None) -> MetricsReport:
    """Score generated images against ground truth.

    Fréchet needs at least ``d + 2`` images per set (d = 64 embedding dims); for
    smaller sets it is reported as ``None`` with a note.
    """
    s = ssim_batch(fake, gts)
    pd = perceptual_distance_batch(fake, gts, psi)
    note = ""
    try:
        fd = frechet_distance(fake, gts, psi)
    except ValueError as exc:
        fd, note = None, str(exc)
    cm = ConditionMetrics(label, float(s.mean()), float(pd.mean()), fd, int(fake.shape[0]),
                          s.tolist(), pd.tolist(), note, list(groups or []))
    return MetricsReport({label: cm}, {} if seed is None else {label: seed})


def evaluate_set(params, eval_pairs, psi: Extractor, label: str = "eval", seed=None,
                 sigma: float | None = None) -> MetricsReport:
    """Generate every pair's target and score it against ground truth."""
    refs, poses, gts = stack_pairs(eval_pairs, sigma)
    return score(generate(params, refs, poses), gts, psi, label, seed)


def evaluate_groups(models, pair_groups, psi: Extractor, label: str = "eval", seed=None,
                    sigma: float | None = None) -> MetricsReport:
    """Pool the outputs of one model per identity (``models[i]`` on ``pair_groups[i]``)."""
    fakes, gts, groups = [], [], []
    for i, (params, pairs) in enumerate(zip(models, pair_groups)):
        refs, poses, gt = stack_pairs(pairs, sigma)
        fakes.append(generate(params, refs, poses))
        gts.append(gt)
        groups += [i] * len(pairs)
    return score(torch.cat(fakes), torch.cat(gts).double(), psi, label, seed, groups)
