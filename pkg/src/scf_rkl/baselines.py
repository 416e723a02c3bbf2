"""Reference merge operators: task arithmetic, DARE, TIES, DARE-TIES and SCE.

All operators work on float64 arrays. ``deltas`` is a sequence of task vectors
(parent minus base), one per parent, each shaped like ``base``.

Trimming keeps the top ``ceil(density * n)`` entries; ties at the cut go to the
higher flat index (stable ascending sort, keep the tail), so a delta of [1, 1]
trimmed to one entry keeps [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .checkpoint_io import DTYPES, TensorEntry, TensorMap, encode
from .fusion import CheckpointFusion, ShapeMismatchError, assemble, plan_checkpoint, run_per_tensor
from .rng import uniform

METHODS = ("task-arithmetic", "dare-linear", "ties", "dare-ties", "sce")


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "task-arithmetic"
    lam: float = 1.0
    density: float = 0.5
    drop_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline method {self.method!r}")
        if not 0 < self.density <= 1:
            raise ValueError("density must be in (0, 1]")
        if not 0 <= self.drop_rate < 1:
            raise ValueError("drop_rate must be in [0, 1)")


def _stack(base: np.ndarray, deltas: Sequence[np.ndarray]) -> np.ndarray:
    if isinstance(deltas, dict):
        deltas = [deltas[k] for k in sorted(deltas)]
    if len(deltas) == 0:
        raise ValueError("at least one delta is required")
    out = []
    for d in deltas:
        d = np.asarray(d, dtype=np.float64)
        if d.shape != base.shape:
            raise ShapeMismatchError(f"delta shape {d.shape} does not match base {base.shape}")
        out.append(d)
    return np.stack(out)


def _apply(base: np.ndarray, update: np.ndarray) -> np.ndarray:
    # a zero update must return the stored base value itself (keeps -0.0 intact)
    return np.where(update == 0, base, base + update)


def _topk_mask(score: np.ndarray, density: float) -> np.ndarray:
    flat = score.reshape(-1)
    k = min(flat.size, math.ceil(density * flat.size))
    keep = np.zeros(flat.size, dtype=bool)
    # stable ascending sort, keep the last k: equal scores go to the higher index
    if k:
        keep[np.argsort(flat, kind="stable")[-k:]] = True
    return keep.reshape(score.shape)


def trim(delta: np.ndarray, density: float) -> np.ndarray:
    """Zero all but the ``ceil(density * n)`` largest-magnitude entries."""
    delta = np.asarray(delta, dtype=np.float64)
    return np.where(_topk_mask(np.abs(delta), density), delta, 0.0)


def task_arithmetic(base, deltas, lam: float = 1.0) -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    stacked = _stack(base, deltas)
    return _apply(base, lam * stacked.sum(axis=0))


def dare_prune(delta, drop_rate: float, seed: int, name: str = "") -> np.ndarray:
    """Drop each entry with probability ``drop_rate``; rescale survivors by 1/(1-drop_rate)."""
    if not 0 <= drop_rate < 1:
        raise ValueError("drop_rate must be in [0, 1)")
    delta = np.asarray(delta, dtype=np.float64)
    if drop_rate == 0:
        return delta.copy()
    u = uniform(seed, delta.size, "dare", name).reshape(delta.shape)
    return np.where(u >= drop_rate, delta / (1.0 - drop_rate), 0.0)


def elect_sign(trimmed: np.ndarray) -> np.ndarray:
    """Per-coordinate sign of the summed deltas.

    A zero sum falls back to whichever sign carries more total magnitude; an
    exact tie elects 0, which leaves the base value in place.
    """
    total = trimmed.sum(axis=0)
    pos = np.where(trimmed > 0, trimmed, 0.0).sum(axis=0)
    neg = np.where(trimmed < 0, -trimmed, 0.0).sum(axis=0)
    fallback = np.sign(pos - neg)
    return np.where(total != 0, np.sign(total), fallback)


def ties_merge(base, deltas, density: float = 0.5, lam: float = 1.0) -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    stacked = _stack(base, deltas)
    trimmed = np.stack([trim(d, density) for d in stacked])
    sign = elect_sign(trimmed)
    agree = (np.sign(trimmed) == sign) & (trimmed != 0) & (sign != 0)
    count = agree.sum(axis=0)
    summed = np.where(agree, trimmed, 0.0).sum(axis=0)
    merged = np.where(count > 0, summed / np.maximum(count, 1), 0.0)
    return _apply(base, lam * merged)


def dare_ties(base, deltas, drop_rate: float = 0.5, density: float = 0.5, lam: float = 1.0,
              seed: int = 0, name: str = "") -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    stacked = _stack(base, deltas)
    pruned = [dare_prune(d, drop_rate, seed, f"{name}#{k}") for k, d in enumerate(stacked)]
    return ties_merge(base, pruned, density, lam)


def dare_linear(base, deltas, drop_rate: float = 0.5, lam: float = 1.0, seed: int = 0,
                name: str = "") -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    stacked = _stack(base, deltas)
    pruned = [dare_prune(d, drop_rate, seed, f"{name}#{k}") for k, d in enumerate(stacked)]
    return task_arithmetic(base, pruned, lam)


def sce_merge(base, deltas, density: float = 0.5, lam: float = 1.0) -> np.ndarray:
    """Select by cross-parent variance, weight parents by selected energy, erase sign conflicts.

    With a single parent there is no variance to rank, so the delta is
    magnitude-trimmed instead.
    """
    base = np.asarray(base, dtype=np.float64)
    stacked = _stack(base, deltas)
    if stacked.shape[0] == 1:
        return _apply(base, lam * trim(stacked[0], density))

    selected = _topk_mask(stacked.var(axis=0), density)
    kept = np.where(selected, stacked, 0.0)
    energy = (kept * kept).reshape(kept.shape[0], -1).sum(axis=1)
    if energy.sum() == 0:
        return base.copy()
    weights = energy / energy.sum()
    weighted = kept * weights.reshape((-1,) + (1,) * base.ndim)
    sign = np.sign(weighted.sum(axis=0))
    survive = (np.sign(kept) == sign) & (sign != 0)
    return _apply(base, lam * np.where(survive, weighted, 0.0).sum(axis=0))


def merge_arrays(base: np.ndarray, parents: Sequence[np.ndarray], cfg: BaselineConfig,
                 name: str = "") -> np.ndarray:
    """Dispatch one tensor through the configured operator."""
    base = np.asarray(base, dtype=np.float64)
    deltas = [np.asarray(p, dtype=np.float64) - base for p in parents]
    if cfg.method == "task-arithmetic":
        return task_arithmetic(base, deltas, cfg.lam)
    if cfg.method == "dare-linear":
        return dare_linear(base, deltas, cfg.drop_rate, cfg.lam, cfg.seed, name)
    if cfg.method == "ties":
        return ties_merge(base, deltas, cfg.density, cfg.lam)
    if cfg.method == "dare-ties":
        return dare_ties(base, deltas, cfg.drop_rate, cfg.density, cfg.lam, cfg.seed, name)
    return sce_merge(base, deltas, cfg.density, cfg.lam)


@dataclass
class BaselineTensorStats:
    name: str
    method: str
    changed: int
    total: int
    update_l2: float
    lossy_reencodes: int
    dtype: str

    def to_dict(self) -> dict:
        return asdict(self)


def merge_entries(base: TensorEntry, parents: Sequence[TensorEntry], cfg: BaselineConfig,
                  name: str = ""):
    """Merge stored tensors; unchanged coordinates keep the base bit pattern."""
    wb = base.values
    merged = merge_arrays(wb, [p.values for p in parents], cfg, name)
    unchanged = (merged == wb).reshape(-1)
    encoded = np.frombuffer(encode(merged, base.dtype), dtype=DTYPES[base.dtype][1])
    bits = np.where(unchanged, base.bits(), encoded).astype(DTYPES[base.dtype][1])
    entry = TensorEntry(base.shape, base.dtype, bits.tobytes())
    stored = entry.values
    update = merged - wb
    stats = BaselineTensorStats(
        name=name,
        method=cfg.method,
        changed=int(np.count_nonzero(~unchanged)),
        total=base.size,
        update_l2=float(np.sqrt(np.sum(update * update))),
        lossy_reencodes=int(np.count_nonzero(stored != merged)),
        dtype=base.dtype,
    )
    return entry, stats


def merge_checkpoint(base: TensorMap, secondaries: Sequence[TensorMap], cfg: BaselineConfig,
                     policy: str = "error", threads: int = 1) -> CheckpointFusion:
    if not secondaries:
        raise ValueError("at least one secondary checkpoint is required")
    warnings = []
    matched = None
    report = None
    for sec in secondaries:
        report, w = plan_checkpoint(base, sec, policy)
        warnings.extend(w)
        matched = set(report.matched) if matched is None else matched & set(report.matched)
    names = sorted(matched)
    if not names:
        raise ShapeMismatchError("no tensor is shared by the base and every secondary")

    def work(name):
        return merge_entries(base[name], [s[name] for s in secondaries], cfg, name)

    results = run_per_tensor(work, names, threads)
    fused_entries = {n: r[0] for n, r in zip(names, results)}
    stats = [r[1] for r in results]
    # secondary-only tensors come from the last parent when copying is allowed
    fused = assemble(base, secondaries[-1], report, policy, fused_entries)
    return CheckpointFusion(fused=fused, stats=stats, warnings=warnings)
