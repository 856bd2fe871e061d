"""Sequential test-time adaptation: an appearance stage followed by a skeleton
stage, plus the ordering and budget variants used for ablations.

Each stage owns a fresh Adam state.  Every optimiser step leaves exactly one
:class:`TraceRecord`, and every random choice (augmentation draws) is derived
from ``cfg.seed`` and the iteration index so that a run can be replayed.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import AugParams, augment, sample_aug_params
from .autodiff import (
    APPEARANCE, PRETRAINED, SKELETON, AdamState, NumericError, ParameterSet, adam_step, grad,
)
from .core import PartMaskSet, PersonSample, Skeleton, render_heatmaps, validate_sample
from .features import Extractor, as_batch, init_extractor
from .losses import LossBreakdown, l_appe, l_com
from .metrics import MetricsReport, evaluate_set
from .model import arch_of, forward

PROFILES = ("default", "nted_analog")
VARIANTS = ("sequential", "reversed", "joint", "appearance_only", "skeleton_only")
BASELINE_LABEL = "w/o SETA"
ADAPTED_LABEL = "w/ SETA"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class AdaptationConfig:
    alpha: float = 2e-3
    beta: float = 2e-3
    appearance_iters: int = 30
    skeleton_iters: int = 5
    beta1: float = 0.5
    beta2: float = 0.99
    adam_eps: float = 1e-8
    augs_per_iter: int = 1
    k: int = 8
    seed: int = 0
    profile: str = "default"
    appe_weights: dict | None = field(default=None, hash=False)
    com_weights: dict | None = field(default=None, hash=False)
    dtype: str = "float64"

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("learning rates must be positive")
        if self.appearance_iters < 0 or self.skeleton_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.augs_per_iter < 1 or self.k < 1:
            raise ValueError("augs_per_iter and k must be >= 1")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @classmethod
    def for_profile(cls, profile: str = "default", **overrides) -> "AdaptationConfig":
        """Config with the profile's forced settings applied after ``overrides``."""
        cfg = cls(profile=profile, **overrides)
        if profile == "nted_analog":
            cfg = dataclasses.replace(cfg, alpha=1e-3, beta1=0.0)
        return cfg

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "AdaptationConfig":
        return cls.for_profile(**data)


@dataclass(frozen=True)
class TargetSkeletonSet:
    """Target poses for the skeleton stage with their ground-truth part layouts."""

    skeletons: tuple
    masks: tuple  # PartMaskSet per skeleton, the layout of the identity in that pose
    domain: str
    seed: int

    def __post_init__(self):
        if len(self.skeletons) < 1:
            raise ValueError("need at least one target skeleton")
        if len(self.masks) != len(self.skeletons):
            raise ValueError("one part layout per target skeleton is required")

    def __len__(self) -> int:
        return len(self.skeletons)

    def to_json(self) -> dict:
        return {"domain": self.domain, "seed": self.seed,
                "skeletons": [{"keypoints": s.keypoints.tolist(), "visible": s.visible.tolist()}
                              for s in self.skeletons],
                "labels": [m.labels().tolist() for m in self.masks]}

    @classmethod
    def from_json(cls, data: dict) -> "TargetSkeletonSet":
        skels = tuple(Skeleton(np.array(s["keypoints"], dtype=np.float64), np.array(s["visible"], dtype=bool))
                      for s in data["skeletons"])
        masks = tuple(PartMaskSet.from_labels(np.array(lab)) for lab in data["labels"])
        return cls(skels, masks, data["domain"], data["seed"])


def _pose_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def make_targets(spec, domain, k: int, seed: int, with_truth: bool = False):
    """``k`` poses of ``spec``'s identity drawn from ``domain``.

    With ``with_truth`` also returns the evaluation pairs for those same poses,
    ``[(sample, skeleton, ground-truth image)]``; the ground-truth images are
    never seen by the adaptation stages.
    """
    from .synth import render_person, repose, sample_pose

    rng = _pose_rng(seed, 1)
    ref = render_person(spec)
    skels, masks, pairs = [], [], []
    for _ in range(k):
        s = render_person(repose(spec, sample_pose(domain, spec, rng)))
        skels.append(s.skeleton)
        masks.append(s.parts)
        pairs.append((ref, s.skeleton, s.image))
    targets = TargetSkeletonSet(tuple(skels), tuple(masks), domain.name, seed)
    return (targets, pairs) if with_truth else targets


def make_eval_pairs(spec, domain, n: int, seed: int) -> list:
    """Held-out ``(sample, target skeleton, ground-truth image)`` triples for one identity.

    Uses a different pose stream from :func:`make_targets` so evaluation poses
    are never the ones adapted on.
    """
    from .synth import render_person, repose, sample_pose

    rng = _pose_rng(seed, 2)
    ref = render_person(spec)
    out = []
    for _ in range(n):
        gt = render_person(repose(spec, sample_pose(domain, spec, rng)))
        out.append((ref, gt.skeleton, gt.image))
    return out


# --- traces -------------------------------------------------------------------------

@dataclass
class TraceRecord:
    stage: str
    iteration: int
    loss: dict
    aug: list | None = None  # AugParams as JSON, one per augmentation
    target: int | None = None
    wall: float = 0.0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdaptationTrace:
    records: list = field(default_factory=list)
    checksums: list = field(default_factory=list)  # [{"stage", "initial", "final"}]

    def extend(self, other: "AdaptationTrace") -> "AdaptationTrace":
        return AdaptationTrace(self.records + other.records, self.checksums + other.checksums)

    @property
    def stages(self) -> list[str]:
        return [r.stage for r in self.records]

    def to_jsonl(self, header: dict | None = None) -> str:
        """One JSON object per line: an optional ``{"run": header}``, the records, then the checksums."""
        lines = [json.dumps({"run": header}, sort_keys=True)] if header else []
        lines += [json.dumps({"record": r.to_json()}, sort_keys=True) for r in self.records]
        lines += [json.dumps({"checksum": c}, sort_keys=True) for c in self.checksums]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "AdaptationTrace":
        out = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            item = json.loads(line)
            if "record" in item:
                out.records.append(TraceRecord(**item["record"]))
            elif "checksum" in item:
                out.checksums.append(item["checksum"])
        return out


class AdaptationAborted(NumericError):
    """A non-finite loss stopped adaptation; ``trace`` holds the records so far."""

    def __init__(self, message: str, node: str | None, trace: AdaptationTrace):
        super().__init__(message, node)
        self.trace = trace


# --- stages ---------------------------------------------------------------------------

def _heat(skeleton, arch, dtype) -> torch.Tensor:
    return torch.tensor(render_heatmaps(skeleton, arch.sigma, arch.height, arch.width).channels,
                        dtype=dtype)[None]


def _check_sample(sample: PersonSample) -> None:
    res = validate_sample(sample)
    if not isinstance(res, PersonSample):
        raise ValueError(f"invalid sample: {res.violations}")


def aug_draws(cfg: AdaptationConfig, iteration: int) -> list[AugParams]:
    return [sample_aug_params(int(np.random.SeedSequence([cfg.seed, 3, iteration, j]).generate_state(1)[0]))
            for j in range(cfg.augs_per_iter)]


def _appearance_batch(sample, draws, arch, dtype):
    """Stacked (refs, poses, targets) for [I_aug -> P_id] and [I_id -> P_aug].

    The occluding band only ever appears on the reference side; the
    reconstruction target for the augmented pose is the unoccluded warp.
    """
    pairs = [augment(sample, d) for d in draws]
    img_id = as_batch(sample.image, dtype)
    pose_id = _heat(sample.skeleton, arch, dtype)
    n = len(pairs)
    img_aug = torch.cat([as_batch(a.sample_aug.image, dtype) for a in pairs])
    clean_aug = torch.cat([as_batch(a.clean_image, dtype) for a in pairs])
    pose_aug = torch.cat([_heat(a.sample_aug.skeleton, arch, dtype) for a in pairs])
    refs = torch.cat([img_aug, img_id.expand(n, -1, -1, -1)])
    poses = torch.cat([pose_id.expand(n, -1, -1, -1), pose_aug])
    targets = torch.cat([img_id.expand(n, -1, -1, -1), clean_aug])
    return refs, poses, targets, n


def _appearance_loss(p, data, psi, weights) -> LossBreakdown:
    refs, poses, targets, n = data
    with torch.no_grad():
        # attention targets: self-reconstruction forward of each target image in its own pose
        _, att_target = forward(p, targets, poses)
    pred, att = forward(p, refs, poses)
    halves = []
    for name, sl in (("id", slice(0, n)), ("aug", slice(n, 2 * n))):
        halves.append((name, l_appe(pred[sl], targets[sl], [a[sl] for a in att],
                                    [a[sl] for a in att_target], psi, weights)))
    comps = {f"{name}.{k}": v for name, b in halves for k, v in b.components.items()}
    wts = {f"{name}.{k}": w for name, b in halves for k, w in b.weights.items()}
    return LossBreakdown(comps, wts, halves[0][1].total + halves[1][1].total)


def _skeleton_data(sample, targets, v, arch, dtype):
    return (as_batch(sample.image, dtype), _heat(targets.skeletons[v], arch, dtype),
            targets.masks[v], sample.parts)


def _skeleton_loss(p, data, phi, weights) -> LossBreakdown:
    img_id, pose, gen_parts, ref_parts = data
    gen, _ = forward(p, img_id, pose)
    return l_com(gen, img_id, gen_parts, ref_parts, phi, weights)


def _run_stage(stage, params, steps, lr, cfg, trace_into):
    """Shared optimiser loop; ``steps`` yields (iteration, loss_fn, data, record_kwargs)."""
    work = params.to(cfg.torch_dtype)
    state = AdamState.zeros_like(work, cfg.beta1, cfg.beta2, cfg.adam_eps)
    initial = params.checksum()
    for it, loss_fn, data, extra in steps:
        t0 = time.perf_counter()
        box = {}

        def wrapped(p, d):
            out = loss_fn(p, d)
            box["out"] = out
            return out
        try:
            _, g = grad(wrapped, work, data)
        except NumericError as exc:
            raise AdaptationAborted(f"{stage} iteration {it}: {exc}", exc.node, trace_into) from exc
        work, state = adam_step(state, work, g, lr)
        trace_into.records.append(TraceRecord(stage, it, box["out"].to_json(), wall=time.perf_counter() - t0,
                                              **extra))
    out = work.to(params.dtype)
    trace_into.checksums.append({"stage": stage, "initial": initial, "final": out.checksum()})
    return out


def _tagged(params: ParameterSet, stage: str, ablation: bool) -> ParameterSet:
    return params.advance(stage, ablation=ablation)


def adapt_appearance(params: ParameterSet, sample: PersonSample, cfg: AdaptationConfig = AdaptationConfig(),
                     psi: Extractor | None = None, *, ablation: bool = False,
                     draws: list | None = None) -> tuple[ParameterSet, AdaptationTrace]:
    """Self-supervised reconstruction of augmented copies of ``sample``.

    ``draws`` (a list of AugParams lists, one per iteration) overrides the
    seeded augmentation schedule; used for replay.
    """
    if not ablation and params.stage != PRETRAINED:
        raise ValueError(f"appearance stage expects a pretrained model, got {params.stage!r}")
    _check_sample(sample)
    arch = arch_of(params)
    psi = psi or init_extractor("perceptual_analog", height=arch.height, width=arch.width)
    dtype = cfg.torch_dtype
    trace = AdaptationTrace()
    n_iter = cfg.appearance_iters if draws is None else len(draws)

    def steps():
        for it in range(n_iter):
            d = aug_draws(cfg, it) if draws is None else draws[it]
            data = _appearance_batch(sample, d, arch, dtype)
            yield it, lambda p, x: _appearance_loss(p, x, psi, cfg.appe_weights), data, \
                {"aug": [a.to_json() for a in d]}

    out = _run_stage(APPEARANCE, _tagged(params, APPEARANCE, ablation), steps(), cfg.alpha, cfg, trace)
    return out, trace


def adapt_skeleton(params: ParameterSet, sample: PersonSample, targets: TargetSkeletonSet,
                   cfg: AdaptationConfig = AdaptationConfig(), phi: Extractor | None = None, *,
                   ablation: bool = False) -> tuple[ParameterSet, AdaptationTrace]:
    """Motion-consistency updates against generated images in the target poses,
    cycling through ``targets`` when there are more iterations than skeletons."""
    if not ablation and params.stage != APPEARANCE:
        raise ValueError(f"skeleton stage expects an appearance-adapted model, got {params.stage!r}")
    _check_sample(sample)
    arch = arch_of(params)
    phi = phi or init_extractor("reid_analog", height=arch.height, width=arch.width)
    dtype = cfg.torch_dtype
    trace = AdaptationTrace()

    def steps():
        for it in range(cfg.skeleton_iters):
            v = it % len(targets)
            yield it, lambda p, x: _skeleton_loss(p, x, phi, cfg.com_weights), \
                _skeleton_data(sample, targets, v, arch, dtype), {"target": v}

    out = _run_stage(SKELETON, _tagged(params, SKELETON, ablation), steps(), cfg.beta, cfg, trace)
    return out, trace


def adapt_joint(params: ParameterSet, sample: PersonSample, targets: TargetSkeletonSet,
                cfg: AdaptationConfig = AdaptationConfig(), psi=None, phi=None) -> tuple[ParameterSet, AdaptationTrace]:
    """Both objectives summed in every step, ``appearance_iters`` steps at rate ``alpha``."""
    _check_sample(sample)
    arch = arch_of(params)
    psi = psi or init_extractor("perceptual_analog", height=arch.height, width=arch.width)
    phi = phi or init_extractor("reid_analog", height=arch.height, width=arch.width)
    dtype = cfg.torch_dtype
    trace = AdaptationTrace()

    def loss(p, data):
        a = _appearance_loss(p, data[0], psi, cfg.appe_weights)
        c = _skeleton_loss(p, data[1], phi, cfg.com_weights)
        comps = {**a.components, **{f"com.{k}": v for k, v in c.components.items()}}
        wts = {**a.weights, **{f"com.{k}": w for k, w in c.weights.items()}}
        return LossBreakdown(comps, wts, a.total + c.total, c.info)

    def steps():
        for it in range(cfg.appearance_iters):
            d = aug_draws(cfg, it)
            v = it % len(targets)
            data = (_appearance_batch(sample, d, arch, dtype), _skeleton_data(sample, targets, v, arch, dtype))
            yield it, loss, data, {"aug": [a.to_json() for a in d], "target": v}

    tagged = params.advance(SKELETON, ablation=True)
    out = _run_stage("joint", tagged, steps(), cfg.alpha, cfg, trace)
    return out, trace


def _evaluate(before, after, eval_pairs, psi, seed) -> MetricsReport:
    report = MetricsReport(seeds={"seed": seed})
    if eval_pairs:
        report.merge(evaluate_set(before, eval_pairs, psi, BASELINE_LABEL, seed))
        report.merge(evaluate_set(after, eval_pairs, psi, ADAPTED_LABEL, seed))
    return report


def run_seta(params: ParameterSet, sample: PersonSample, targets: TargetSkeletonSet,
             cfg: AdaptationConfig = AdaptationConfig(), eval_pairs=None, psi=None, phi=None
             ) -> tuple[ParameterSet, AdaptationTrace, MetricsReport]:
    """Appearance stage, then skeleton stage; report compares the input and final models."""
    arch = arch_of(params)
    psi = psi or init_extractor("perceptual_analog", height=arch.height, width=arch.width)
    hat, t1 = adapt_appearance(params, sample, cfg, psi)
    tilde, t2 = adapt_skeleton(hat, sample, targets, cfg, phi)
    return tilde, t1.extend(t2), _evaluate(params, tilde, eval_pairs, psi, cfg.seed)


def run_order_variant(variant: str, params: ParameterSet, sample: PersonSample, targets: TargetSkeletonSet,
                      cfg: AdaptationConfig = AdaptationConfig(), eval_pairs=None, psi=None, phi=None
                      ) -> tuple[ParameterSet, AdaptationTrace, MetricsReport]:
    """Run one ordering variant; the report's adapted condition is labelled ``variant``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    arch = arch_of(params)
    psi = psi or init_extractor("perceptual_analog", height=arch.height, width=arch.width)
    if variant == "sequential":
        out, trace, _ = run_seta(params, sample, targets, cfg, None, psi, phi)
    elif variant == "appearance_only":
        out, trace, _ = run_seta(params, sample, targets, dataclasses.replace(cfg, skeleton_iters=0), None, psi, phi)
    elif variant == "skeleton_only":
        out, trace = adapt_skeleton(params, sample, targets, cfg, phi, ablation=True)
    elif variant == "reversed":
        mid, t1 = adapt_skeleton(params, sample, targets, cfg, phi, ablation=True)
        out, t2 = adapt_appearance(mid, sample, cfg, psi, ablation=True)
        trace = t1.extend(t2)
    else:
        out, trace = adapt_joint(params, sample, targets, cfg, psi, phi)
    out.meta = {**out.meta, "variant": variant}
    report = MetricsReport(seeds={"seed": cfg.seed})
    if eval_pairs:
        report.merge(evaluate_set(out, eval_pairs, psi, variant, cfg.seed))
    return out, trace, report


def replay(trace: AdaptationTrace, params: ParameterSet, sample: PersonSample, targets: TargetSkeletonSet,
           cfg: AdaptationConfig, psi=None, phi=None) -> tuple[ParameterSet, AdaptationTrace]:
    """Re-run a sequential trace from its recorded augmentations and target ids."""
    app = [r for r in trace.records if r.stage == APPEARANCE]
    skel = [r for r in trace.records if r.stage == SKELETON]
    draws = [[AugParams.from_json(a) for a in r.aug] for r in app]
    hat, t1 = adapt_appearance(params, sample, cfg, psi, draws=draws)
    order = [r.target for r in skel]
    if order != [i % len(targets) for i in range(len(order))]:
        raise ValueError("trace target order does not follow the cycling schedule")
    tilde, t2 = adapt_skeleton(hat, sample, targets, dataclasses.replace(cfg, skeleton_iters=len(order)), phi)
    return tilde, t1.extend(t2)
