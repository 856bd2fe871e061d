"""Multi-identity experiments: identity sets with held-out truth, their on-disk
layout, ordering comparisons and appearance-budget sweeps."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

from .autodiff import ParameterSet
from .core import PersonSample, load_png, load_sample, save_png, save_sample
from .engine import BASELINE_LABEL, AdaptationConfig, TargetSkeletonSet, make_targets, run_order_variant, run_seta
from .features import Extractor, init_extractor
from .metrics import MetricsReport, evaluate_groups
from .model import arch_of
from .synth import DomainConfig, render_person, sample_person

PAIRS_FILE = "pairs.json"
TARGETS_FILE = "targets.json"


@dataclass
class Identity:
    sample: PersonSample
    targets: TargetSkeletonSet
    pairs: list  # [(sample, target skeleton, ground-truth image)], one per target

    @property
    def truth(self) -> list:
        return [gt for _, _, gt in self.pairs]


def make_identities(domain: DomainConfig, n: int, k: int, seed: int) -> list[Identity]:
    """``n`` identities (seeds ``seed .. seed+n-1``), each with ``k`` target poses and their truth."""
    out = []
    for i in range(n):
        spec = sample_person(domain, seed + i)
        targets, pairs = make_targets(spec, domain, k, seed + i, with_truth=True)
        out.append(Identity(render_person(spec), targets, pairs))
    return out


# --- disk layout ----------------------------------------------------------------------
# DIR/pairs.json lists identity directories; each holds the sample files plus
# targets.json (poses and part layouts) and truth_XX.png (held-out images).

def write_targets(directory, targets: TargetSkeletonSet, truth=None, stamp: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    data = {**targets.to_json(), **(stamp or {})}
    if truth is not None:
        names = [f"truth_{v:02d}.png" for v in range(len(truth))]
        for name, img in zip(names, truth):
            save_png(img, d / name, stamp)
        data["truth"] = names
    (d / TARGETS_FILE).write_text(json.dumps(data, indent=1))
    return d / TARGETS_FILE


def read_targets(directory) -> tuple[TargetSkeletonSet, list | None]:
    d = Path(directory)
    data = json.loads((d / TARGETS_FILE).read_text())
    truth = [load_png(d / name) for name in data["truth"]] if "truth" in data else None
    return TargetSkeletonSet.from_json(data), truth


def write_identities(identities: list[Identity], out_dir, stamp: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, ident in enumerate(identities):
        d = save_sample(ident.sample, out / f"{i:05d}", stamp)
        write_targets(d, ident.targets, ident.truth, stamp)
        names.append(d.name)
    (out / PAIRS_FILE).write_text(json.dumps({"identities": names, **(stamp or {})}, indent=1))
    return out / PAIRS_FILE


def identity_from_dir(sample_dir, targets_dir=None) -> Identity:
    sample = load_sample(sample_dir)
    targets, truth = read_targets(targets_dir or sample_dir)
    pairs = [] if truth is None else [(sample, s, gt) for s, gt in zip(targets.skeletons, truth)]
    return Identity(sample, targets, pairs)


def read_identities(pairs_dir) -> list[Identity]:
    d = Path(pairs_dir)
    names = json.loads((d / PAIRS_FILE).read_text())["identities"]
    return [identity_from_dir(d / name) for name in names]


# --- experiments ----------------------------------------------------------------------

def _extractors(params, psi, phi):
    arch = arch_of(params)
    psi = psi or init_extractor("perceptual_analog", height=arch.height, width=arch.width)
    phi = phi or init_extractor("reid_analog", height=arch.height, width=arch.width)
    return psi, phi


def evaluate_models(models, identities, psi: Extractor, label: str, seed=None) -> MetricsReport:
    return evaluate_groups(models, [i.pairs for i in identities], psi, label, seed)


def compare_variants(params: ParameterSet, identities: list[Identity], cfg: AdaptationConfig,
                     variants=("appearance_only", "sequential"), psi=None, phi=None,
                     baseline: bool = True) -> tuple[MetricsReport, dict]:
    """Adapt a copy of ``params`` per identity under each variant and pool the held-out scores.

    Returns the report (one condition per variant, plus the unadapted
    baseline) and the total adaptation wall time per condition in seconds.
    """
    psi, phi = _extractors(params, psi, phi)
    report, walls = MetricsReport(seeds={"seed": cfg.seed}), {}
    if baseline:
        report.merge(evaluate_models([params] * len(identities), identities, psi, BASELINE_LABEL, cfg.seed))
        walls[BASELINE_LABEL] = 0.0
    for variant in variants:
        t0 = time.perf_counter()
        models = [run_order_variant(variant, params, i.sample, i.targets, cfg, None, psi, phi)[0]
                  for i in identities]
        walls[variant] = time.perf_counter() - t0
        report.merge(evaluate_models(models, identities, psi, variant, cfg.seed))
    return report, walls


def iters_label(budget: int) -> str:
    return f"iters={budget}"


def ablate_iters(params: ParameterSet, identities: list[Identity], cfg: AdaptationConfig, budgets,
                 psi=None, phi=None) -> tuple[MetricsReport, dict]:
    """Full sequential runs with ``appearance_iters`` set to each budget.

    A budget of 0 means no adaptation at all: the unadapted model.
    """
    psi, phi = _extractors(params, psi, phi)
    report, walls = MetricsReport(seeds={"seed": cfg.seed}), {}
    for b in budgets:
        if b < 0:
            raise ValueError("iteration budgets must be >= 0")
        label = iters_label(b)
        t0 = time.perf_counter()
        if b == 0:
            models = [params] * len(identities)
        else:
            c = dataclasses.replace(cfg, appearance_iters=b)
            models = [run_seta(params, i.sample, i.targets, c, None, psi, phi)[0] for i in identities]
        walls[label] = time.perf_counter() - t0
        report.merge(evaluate_models(models, identities, psi, label, cfg.seed))
    return report, walls
