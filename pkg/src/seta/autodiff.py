"""Parameter containers, reverse-mode gradients, a finite-difference oracle,
Adam, and the binary checkpoint format.

Reverse mode is delegated to ``torch.autograd``; everything a loss touches
must be built from torch ops on the tensors handed to it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

PRETRAINED = "pretrained"
APPEARANCE = "appearance_adapted"
SKELETON = "skeleton_adapted"
STAGES = (PRETRAINED, APPEARANCE, SKELETON)
_FORWARD = {PRETRAINED: {APPEARANCE, SKELETON}, APPEARANCE: {SKELETON}, SKELETON: set()}

MAGIC = b"SETA"
FORMAT_VERSION = 1

Gradients = dict  # name -> tensor, congruent with ParameterSet.tensors


class NumericError(ArithmeticError):
    def __init__(self, message: str, node: str | None = None):
        super().__init__(message)
        self.node = node


@dataclass
class ParameterSet:
    tensors: dict
    stage: str = PRETRAINED
    meta: dict = field(default_factory=dict)
    history: tuple = ()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage tag {self.stage!r}")

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def total_count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ParameterSet":
        return replace(self, tensors={k: v.detach().clone() for k, v in self.tensors.items()},
                       meta=dict(self.meta))

    def to(self, dtype: torch.dtype) -> "ParameterSet":
        return replace(self, tensors={k: v.detach().to(dtype) for k, v in self.tensors.items()})

    def advance(self, stage: str, *, ablation: bool = False) -> "ParameterSet":
        """Copy tagged with ``stage``.

        Normal engines only move pretrained -> appearance -> skeleton; ablations
        (e.g. skeleton-first ordering) may pass ``ablation=True`` and the real
        order is kept in ``history``.
        """
        if stage not in STAGES:
            raise ValueError(f"unknown stage tag {stage!r}")
        if not ablation and stage not in _FORWARD[self.stage]:
            raise ValueError(f"illegal stage transition {self.stage} -> {stage}")
        out = self.copy()
        out.stage = stage
        out.history = self.history + (stage,)
        return out

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.tensors:
            h.update(name.encode())
            h.update(self.tensors[name].detach().to(torch.float64).cpu().numpy().tobytes())
        return h.hexdigest()

    def flat(self) -> np.ndarray:
        return np.concatenate([t.detach().cpu().double().reshape(-1).numpy() for t in self.tensors.values()])


def _loss_scalar(out) -> tuple[torch.Tensor, dict]:
    """Accept a tensor or anything with ``total`` / ``components`` (a LossBreakdown)."""
    if isinstance(out, torch.Tensor):
        return out, {"loss": out}
    return out.total, dict(out.components)


def _check_finite(total: torch.Tensor, parts: dict) -> None:
    if torch.isfinite(total).all():
        return
    for name, value in parts.items():
        if isinstance(value, torch.Tensor) and not torch.isfinite(value).all():
            raise NumericError(f"non-finite loss at node {name!r}", node=name)
    raise NumericError("non-finite loss", node="total")


def grad(loss_fn: Callable, params: ParameterSet, inputs=None) -> tuple[float, Gradients]:
    """Value and exact reverse-mode gradient of ``loss_fn(tensors, inputs)``."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.tensors.items()}
    total, parts = _loss_scalar(loss_fn(leaves, inputs))
    _check_finite(total, parts)
    names = list(leaves)
    gs = torch.autograd.grad(total, [leaves[n] for n in names], allow_unused=True)
    grads = {n: (torch.zeros_like(leaves[n]) if g is None else g.detach()) for n, g in zip(names, gs)}
    return float(total.detach()), grads


@dataclass
class SampledGradient:
    """Finite-difference derivatives at a set of ``(name, flat_index)`` coordinates."""

    coords: list
    values: np.ndarray


def sample_coords(params: ParameterSet, n: int | None, seed: int = 0) -> list:
    everything = [(name, i) for name, t in params.tensors.items() for i in range(t.numel())]
    if n is None or n >= len(everything):
        return everything
    rng = np.random.default_rng(seed)
    return [everything[j] for j in sorted(rng.choice(len(everything), size=n, replace=False))]


def fd_grad(loss_fn: Callable, params: ParameterSet, inputs=None, eps: float = 1e-6,
            coords: list | None = None) -> SampledGradient:
    """Central differences ``(L(p + eps e) - L(p - eps e)) / (2 eps)`` per coordinate."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if coords is None:
        coords = sample_coords(params, None)
    work = {k: v.detach().clone() for k, v in params.tensors.items()}
    values = np.empty(len(coords))
    with torch.no_grad():
        for j, (name, idx) in enumerate(coords):
            flat = work[name].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = float(_loss_scalar(loss_fn(work, inputs))[0])
            flat[idx] = orig - eps
            down = float(_loss_scalar(loss_fn(work, inputs))[0])
            flat[idx] = orig
            values[j] = (up - down) / (2 * eps)
    return SampledGradient(list(coords), values)


def gather(grads: Gradients, coords: list) -> np.ndarray:
    return np.array([float(grads[name].reshape(-1)[idx]) for name, idx in coords])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over the sampled coordinates (0 if both vanish)."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


# --- Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParameterSet, beta1: float = 0.5, beta2: float = 0.99,
                   eps: float = 1e-8) -> "AdamState":
        z = {k: torch.zeros_like(v) for k, v in params.tensors.items()}
        return cls(z, {k: t.clone() for k, t in z.items()}, 0, beta1, beta2, eps)


def adam_step(state: AdamState, params: ParameterSet, grads: Gradients, lr
              ) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched.

    ``lr`` is a float or a ``name -> float`` dict of per-tensor rates.
    """
    rates = lr if isinstance(lr, dict) else dict.fromkeys(params.tensors, lr)
    if not all(r > 0 for r in rates.values()):
        raise ValueError("learning rate must be positive")
    if set(grads) != set(params.tensors):
        raise ValueError("gradient names do not match parameters")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for name, p in params.tensors.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(g.shape)} vs {tuple(p.shape)}")
            m = b1 * state.m[name] + (1 - b1) * g
            v = b2 * state.v[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            new_p[name] = p - rates[name] * m_hat / (torch.sqrt(v_hat) + state.eps)
            new_m[name], new_v[name] = m, v
    return replace(params, tensors=new_p), replace(state, m=new_m, v=new_v, t=t)


# --- checkpoint format -------------------------------------------------------------
# MAGIC | u32 version | u64 header length | JSON header | float64 little-endian payload

def save_checkpoint(params: ParameterSet, path, extra: dict | None = None) -> None:
    table, offset = [], 0
    for name, t in params.tensors.items():
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.numel()
    header = {"stage": params.stage, "history": list(params.history), "meta": params.meta,
              "params": table, "count": offset, **(extra or {})}
    blob = json.dumps(header, sort_keys=True).encode()
    payload = params.flat().astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + payload)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(16)
        if head[:4] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, n = struct.unpack("<IQ", head[4:])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(f.read(n))


def load_checkpoint(path, dtype: torch.dtype = torch.float64) -> ParameterSet:
    data = Path(path).read_bytes()
    header = read_header(path)
    start = 16 + struct.unpack("<Q", data[8:16])[0]
    flat = np.frombuffer(data[start:], dtype="<f8")
    if flat.size != header["count"]:
        raise ValueError(f"{path}: payload has {flat.size} values, header says {header['count']}")
    tensors = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"]:entry["offset"] + n].reshape(entry["shape"])
        tensors[entry["name"]] = torch.tensor(chunk, dtype=dtype)
    return ParameterSet(tensors, header["stage"], header.get("meta", {}), tuple(header.get("history", ())))
