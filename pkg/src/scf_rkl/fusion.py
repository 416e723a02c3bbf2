"""Sparse complementary fusion driven by reverse-KL saliency.

Each parameter tensor is read as a stack of categorical distributions (softmax
along one axis). Per slice we measure how far the secondary model's distribution
moves the base one in reverse KL, weight the absolute parameter change by that
divergence, and adopt the secondary value only where the resulting importance
sits in the upper Tukey tail of the tensor's own importance distribution.

Fusion is realized as a select on the stored bit patterns, so every fused
element is exactly one of its two parents.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .checkpoint_io import DTYPES, TensorEntry, TensorMap, align, decode, encode

log = logging.getLogger(__name__)

UNMATCHED_POLICIES = ("error", "copy-secondary", "skip")
DEGENERATE_POLICIES = ("follow-formula", "force-base")


class ShapeMismatchError(ValueError):
    """Raised when tensors that must be fused have different shapes."""


@dataclass(frozen=True)
class FusionConfig:
    epsilon: float = 1e-8
    q_low: float = 0.25
    q_high: float = 0.75
    q_center: float = 0.5
    alpha: float = 1.5
    # None treats the whole tensor as one distribution
    softmax_axis: Optional[int] = -1
    degenerate_iqr_policy: str = "follow-formula"
    max_quantile_elements: int = 2 ** 27

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.q_low < self.q_center < self.q_high < 1:
            raise ValueError("need 0 < q_low < q_center < q_high < 1")
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if self.degenerate_iqr_policy not in DEGENERATE_POLICIES:
            raise ValueError(f"degenerate_iqr_policy must be one of {DEGENERATE_POLICIES}")
        if self.max_quantile_elements < 1:
            raise ValueError("max_quantile_elements must be positive")


@dataclass
class ImportanceField:
    values: np.ndarray
    per_row_rkl: np.ndarray


@dataclass
class TensorFusionStats:
    name: str
    q1: float
    q3: float
    median: float
    tau: float
    selected: int
    total: int
    sparsity: float
    delta_l2: float
    masked_delta_l2: float
    approximate: bool = False
    degenerate_iqr: bool = False
    lossy_reencodes: int = 0
    dtype: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ThresholdStats:
    q1: float
    q3: float
    median: float
    tau: float
    approximate: bool = False


def _check_finite(x: np.ndarray, what: str = "input"):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def _as_slices(theta: np.ndarray, axis) -> np.ndarray:
    """View ``theta`` as a 2-D (slices, slice_length) array."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim < 1:
        raise ValueError("tensor rank must be >= 1")
    if axis is None:
        return theta.reshape(1, -1)
    return np.moveaxis(theta, axis, -1).reshape(-1, theta.shape[axis])


def stable_softmax(theta, axis: Optional[int] = -1, epsilon: float = 0.0) -> np.ndarray:
    """Max-shifted softmax along ``axis`` plus ``epsilon`` (added after, no renormalization).

    ``axis=None`` normalizes over the whole tensor.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim < 1:
        raise ValueError("tensor rank must be >= 1")
    _check_finite(theta)
    if axis is None:
        shifted = np.exp(theta - theta.max())
        return shifted / shifted.sum() + epsilon
    shifted = np.exp(theta - theta.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True) + epsilon


def _rkl_rows(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    # np.sum over the contiguous last axis uses pairwise summation
    return np.sum(q * np.log(q / p), axis=-1)


def reverse_kl(q, p) -> float:
    """sum_i q_i * ln(q_i / p_i) for strictly positive slices ``q`` (base) and ``p``."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    p = np.ascontiguousarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError(f"length mismatch: {q.shape} vs {p.shape}")
    if not (np.all(q > 0) and np.all(p > 0)):
        raise ValueError("reverse_kl requires strictly positive entries")
    return float(_rkl_rows(q.reshape(-1), p.reshape(-1)))


def importance(theta_b, theta_s, cfg: FusionConfig = FusionConfig()) -> ImportanceField:
    theta_b = np.asarray(theta_b, dtype=np.float64)
    theta_s = np.asarray(theta_s, dtype=np.float64)
    if theta_b.shape != theta_s.shape:
        raise ShapeMismatchError(f"shape mismatch: {theta_b.shape} vs {theta_s.shape}")
    delta = np.abs(theta_s - theta_b)
    q = stable_softmax(_as_slices(theta_b, cfg.softmax_axis), -1, cfg.epsilon)
    p = stable_softmax(_as_slices(theta_s, cfg.softmax_axis), -1, cfg.epsilon)
    rkl = _rkl_rows(np.ascontiguousarray(q), np.ascontiguousarray(p))

    if cfg.softmax_axis is None:
        values = delta * rkl[0]
    else:
        axis = cfg.softmax_axis
        moved = np.moveaxis(delta, axis, -1)
        values = np.moveaxis(moved * rkl.reshape(moved.shape[:-1] + (1,)), -1, axis)
    return ImportanceField(values=values, per_row_rkl=rkl)


def interpolated_quantile(sorted_values: np.ndarray, prob: float) -> float:
    """Linear interpolation between order statistics at position (n - 1) * prob."""
    n = sorted_values.shape[0]
    h = (n - 1) * prob
    lo = int(np.floor(h))
    hi = min(lo + 1, n - 1)
    frac = h - lo
    v_lo = float(sorted_values[lo])
    return v_lo + frac * (float(sorted_values[hi]) - v_lo)


def iqr_threshold(field: ImportanceField | np.ndarray, cfg: FusionConfig = FusionConfig()):
    """Return ``(tau, ThresholdStats)`` with tau = median + alpha * (Q_high - Q_low)."""
    values = field.values if isinstance(field, ImportanceField) else np.asarray(field)
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValueError("cannot threshold an empty importance field")
    approximate = False
    if flat.size > cfg.max_quantile_elements:
        stride = -(-flat.size // cfg.max_quantile_elements)
        flat = flat[::stride]
        approximate = True
    ordered = np.sort(flat)
    q1 = interpolated_quantile(ordered, cfg.q_low)
    q3 = interpolated_quantile(ordered, cfg.q_high)
    med = interpolated_quantile(ordered, cfg.q_center)
    tau = med + cfg.alpha * (q3 - q1)
    return tau, ThresholdStats(q1=q1, q3=q3, median=med, tau=tau, approximate=approximate)


def build_mask(field: ImportanceField | np.ndarray, tau: float) -> np.ndarray:
    if not np.isfinite(tau):
        raise ValueError("tau must be finite")
    values = field.values if isinstance(field, ImportanceField) else np.asarray(field)
    return np.asarray(values >= tau, dtype=bool)


def _select(base: TensorEntry, secondary: TensorEntry, mask: np.ndarray):
    """Pick stored values by mask. Returns (raw bytes, lossy re-encode count)."""
    flat_mask = mask.reshape(-1)
    if base.dtype == secondary.dtype:
        bits = np.where(flat_mask, secondary.bits(), base.bits())
        return bits.astype(DTYPES[base.dtype][1]).tobytes(), 0
    # mixed storage: re-encode chosen secondary values into the base dtype
    src = decode(secondary.raw, secondary.dtype)[flat_mask]
    reencoded = np.frombuffer(encode(src, base.dtype), dtype=DTYPES[base.dtype][1])
    lossy = int(np.count_nonzero(decode(reencoded.tobytes(), base.dtype) != src))
    bits = base.bits().copy()
    bits[flat_mask] = reencoded
    return bits.tobytes(), lossy


def fuse_tensor(theta_b: TensorEntry, theta_s: TensorEntry, cfg: FusionConfig = FusionConfig(),
                name: str = ""):
    """Fuse one tensor pair. Returns ``(fused TensorEntry, TensorFusionStats)``."""
    if theta_b.shape != theta_s.shape:
        raise ShapeMismatchError(f"{name}: shape mismatch {theta_b.shape} vs {theta_s.shape}")
    wb, ws = theta_b.values, theta_s.values
    _check_finite(wb, f"{name} base")
    _check_finite(ws, f"{name} secondary")

    field = importance(wb, ws, cfg)
    tau, th = iqr_threshold(field, cfg)
    delta = ws - wb
    degenerate = th.q3 == th.q1 and bool(np.any(delta != 0))
    if degenerate and cfg.degenerate_iqr_policy == "force-base":
        mask = np.zeros(wb.shape, dtype=bool)
    else:
        mask = build_mask(field, tau)

    raw, lossy = _select(theta_b, theta_s, mask)
    if lossy:
        log.warning("%s: %d selected values lost precision re-encoding %s -> %s",
                    name, lossy, theta_s.dtype, theta_b.dtype)
    sq = delta * delta
    selected = int(np.count_nonzero(mask))
    stats = TensorFusionStats(
        name=name,
        q1=th.q1,
        q3=th.q3,
        median=th.median,
        tau=tau,
        selected=selected,
        total=mask.size,
        sparsity=selected / mask.size,
        delta_l2=float(np.sqrt(np.sum(sq))),
        # same summation layout with zeros keeps the masked norm <= the dense one
        masked_delta_l2=float(np.sqrt(np.sum(np.where(mask, sq, 0.0)))),
        approximate=th.approximate,
        degenerate_iqr=degenerate,
        lossy_reencodes=lossy,
        dtype=theta_b.dtype,
    )
    return TensorEntry(theta_b.shape, theta_b.dtype, raw), stats


@dataclass
class CheckpointFusion:
    """Result of a checkpoint-level merge."""

    fused: TensorMap
    stats: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def plan_checkpoint(base: TensorMap, secondary: TensorMap, policy: str = "error"):
    """Validate alignment under ``policy``; return the AlignmentReport and warnings."""
    if policy not in UNMATCHED_POLICIES:
        raise ValueError(f"unmatched policy must be one of {UNMATCHED_POLICIES}")
    report = align(base, secondary)
    warnings = []
    if report.shape_mismatch:
        if policy != "skip":
            name, sb, ss = report.shape_mismatch[0]
            raise ShapeMismatchError(f"{name}: base shape {list(sb)} vs secondary {list(ss)}")
        for name, sb, ss in report.shape_mismatch:
            warnings.append(f"skipped {name}: shape mismatch {list(sb)} vs {list(ss)}; kept base")
    if report.secondary_only and policy == "error":
        raise ShapeMismatchError(
            f"secondary-only tensors under strict policy: {', '.join(report.secondary_only)}")
    if not report.matched:
        raise ShapeMismatchError("base and secondary share no fusable tensor names")
    if policy == "skip":
        warnings.extend(f"skipped secondary-only tensor {n}" for n in report.secondary_only)
    return report, warnings


def run_per_tensor(fn, names, threads: int = 1):
    """Map ``fn`` over names, in parallel if asked, returning results in input order."""
    if threads <= 1 or len(names) <= 1:
        return [fn(n) for n in names]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, names))


def assemble(base: TensorMap, secondary: TensorMap, report, policy: str, fused_entries: dict):
    out = {}
    for name in sorted(set(base) | (set(secondary) if policy == "copy-secondary" else set())):
        if name in fused_entries:
            out[name] = fused_entries[name]
        elif name in base:
            out[name] = base[name]
        elif name in report.secondary_only:
            out[name] = secondary[name]
    return TensorMap(out, base.metadata)


def fuse_checkpoint(base: TensorMap, secondary: TensorMap, cfg: FusionConfig = FusionConfig(),
                    policy: str = "error", threads: int = 1) -> CheckpointFusion:
    """Fuse every matched tensor with its own threshold; copy the rest per ``policy``."""
    report, warnings = plan_checkpoint(base, secondary, policy)

    def work(name):
        return fuse_tensor(base[name], secondary[name], cfg, name)

    results = run_per_tensor(work, report.matched, threads)
    fused_entries = {n: r[0] for n, r in zip(report.matched, results)}
    stats = [r[1] for r in results]
    for s in stats:
        if s.lossy_reencodes:
            warnings.append(f"{s.name}: {s.lossy_reencodes} lossy re-encodes to {s.dtype}")
        if s.approximate:
            warnings.append(f"{s.name}: quantiles computed on a strided subsample")
    fused = assemble(base, secondary, report, policy, fused_entries)
    return CheckpointFusion(fused=fused, stats=stats, warnings=warnings)
