"""Geometric and information-theoretic diagnostics over (base, secondary, fused) triples."""

from __future__ import annotations

import fnmatch
import re
from dataclasses import asdict, astuple, dataclass, field

import numpy as np

from .checkpoint_io import TensorEntry, TensorMap
from .fusion import ShapeMismatchError, _as_slices, run_per_tensor
from .linalg import jacobi_svd, principal_angles, spectral_norm

DEFAULT_K = 16
_GAP_FLOOR = 1e-9
# sines below this are rounding noise in the projection, not a measurable rotation
_SIN_FLOOR = 1e-12


def as_matrix(w) -> np.ndarray:
    """Reshape a tensor to [d0, rest]; rank-1 tensors become a single row."""
    w = w.values if isinstance(w, TensorEntry) else np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        return w.reshape(1, -1)
    return w.reshape(w.shape[0], -1)


def svd_spectrum(w):
    """Descending singular values and left singular vectors of a matrix-shaped tensor."""
    u, s, _ = jacobi_svd(as_matrix(w))
    return s, u


def _pad(a: np.ndarray, n: int) -> np.ndarray:
    return np.concatenate([a, np.zeros(n - a.size)]) if a.size < n else a


def nss_from_spectra(sigma_base: np.ndarray, sigma_other: np.ndarray) -> float:
    n = max(sigma_base.size, sigma_other.size)
    sb, so = _pad(sigma_base, n), _pad(sigma_other, n)
    denom = np.linalg.norm(sb)
    if denom == 0:
        raise ValueError("NSS is undefined for a zero base matrix")
    return float(np.linalg.norm(so - sb) / denom)


def nss(w_base, w_fused) -> float:
    """Normalized spectral shift ||sigma(W_f) - sigma(W_b)|| / ||sigma(W_b)||."""
    return nss_from_spectra(svd_spectrum(w_base)[0], svd_spectrum(w_fused)[0])


@dataclass
class WedinResult:
    lhs: float
    rhs: float
    gap: float
    perturbation_norm: float
    k: int
    applicable: bool
    holds: bool

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


def _wedin(sigma_b, u_b, u_f, e_norm, k) -> WedinResult:
    if not 1 <= k <= sigma_b.size:
        raise ValueError(f"k={k} out of range 1..{sigma_b.size}")
    next_sigma = sigma_b[k] if k < sigma_b.size else 0.0
    gap = float(sigma_b[k - 1] - next_sigma)
    lhs = float(np.sin(np.radians(principal_angles(u_b, u_f, k)[0])))
    applicable = gap > _GAP_FLOOR * float(sigma_b[0])
    if not applicable:
        return WedinResult(lhs, float("nan"), gap, e_norm, k, False, False)
    rhs = e_norm / gap
    return WedinResult(lhs, rhs, gap, e_norm, k, True, lhs <= rhs * (1 + 1e-9) + _SIN_FLOOR)


def wedin_check(w_base, w_fused, k: int) -> WedinResult:
    """Compare sin of the largest rank-k left-subspace angle with ||E||_2 / gap.

    The gap is sigma_k - sigma_{k+1} of the base. When it is not resolvable the
    result is flagged not applicable instead of reporting a violation.
    """
    wb, wf = as_matrix(w_base), as_matrix(w_fused)
    if wb.shape != wf.shape:
        raise ShapeMismatchError(f"shape mismatch {wb.shape} vs {wf.shape}")
    sb, ub = svd_spectrum(wb)
    _, uf = svd_spectrum(wf)
    return _wedin(sb, ub, uf, spectral_norm(wf - wb), k)


@dataclass
class ProvenanceHistogram:
    from_base: int = 0
    from_secondary: int = 0
    from_both: int = 0
    from_neither: int = 0
    total: int = 0

    @property
    def neither_fraction(self) -> float:
        return self.from_neither / self.total if self.total else 0.0

    def __add__(self, other):
        return ProvenanceHistogram(*(a + b for a, b in zip(astuple(self), astuple(other))))

    def to_dict(self) -> dict:
        return asdict(self)


def provenance(base: TensorEntry, secondary: TensorEntry, fused: TensorEntry) -> ProvenanceHistogram:
    """Classify each fused element by which parent's stored value it reproduces bit for bit."""
    if not base.shape == secondary.shape == fused.shape:
        raise ShapeMismatchError(
            f"shape mismatch: {base.shape}, {secondary.shape}, {fused.shape}")
    b = base.values.reshape(-1).view(np.uint64)
    s = secondary.values.reshape(-1).view(np.uint64)
    f = fused.values.reshape(-1).view(np.uint64)
    eq_b, eq_s = f == b, f == s
    both = int(np.count_nonzero(eq_b & eq_s))
    only_b = int(np.count_nonzero(eq_b & ~eq_s))
    only_s = int(np.count_nonzero(eq_s & ~eq_b))
    return ProvenanceHistogram(only_b, only_s, both, f.size - both - only_b - only_s, f.size)


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def slice_entropy(theta, axis=-1) -> np.ndarray:
    """Shannon entropy (nats) of the softmax of each slice, without smoothing."""
    x = _as_slices(theta, axis)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    total = np.sum(e, axis=-1)
    # H = log(sum e) - sum(r * shifted); exact ln(n) for uniform slices
    return np.log(total) - np.sum(e * shifted, axis=-1) / total


def slice_rkl(theta_q, theta_r, axis=-1) -> np.ndarray:
    """Per-slice KL(softmax(theta_q) || softmax(theta_r)) without smoothing."""
    lq = _log_softmax_rows(_as_slices(theta_q, axis))
    lr = _log_softmax_rows(_as_slices(theta_r, axis))
    return np.sum(np.exp(lq) * (lq - lr), axis=-1)


@dataclass
class EntropyProbe:
    h_base: float
    h_fused: float
    entropy_drop: float
    masked_delta_l2: float
    implied_lipschitz: float
    slices: int

    def to_dict(self) -> dict:
        return asdict(self)


def entropy_probe(base, fused, axis=-1) -> EntropyProbe:
    wb = base.values if isinstance(base, TensorEntry) else np.asarray(base, dtype=np.float64)
    wf = fused.values if isinstance(fused, TensorEntry) else np.asarray(fused, dtype=np.float64)
    if wb.shape != wf.shape:
        raise ShapeMismatchError(f"shape mismatch {wb.shape} vs {wf.shape}")
    hb = slice_entropy(wb, axis)
    hf = slice_entropy(wf, axis)
    h_base, h_fused = float(np.mean(hb)), float(np.mean(hf))
    diff = wf - wb
    norm = float(np.sqrt(np.sum(diff * diff)))
    drop = h_base - h_fused
    return EntropyProbe(h_base, h_fused, drop, norm,
                        drop / norm if norm > 0 else float("nan"), hb.size)


@dataclass
class StabilityProbe:
    rkl_base_to_fused: float
    rkl_base_to_secondary: float
    violations: int
    slices: int

    @property
    def violation_rate(self) -> float:
        return self.violations / self.slices if self.slices else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violation_rate"] = self.violation_rate
        return d


def stability_probe(base, secondary, fused, axis=-1, tol: float = 1e-12) -> StabilityProbe:
    """Mean KL from base slices to fused and to secondary slices, plus per-slice violations."""
    vals = [x.values if isinstance(x, TensorEntry) else np.asarray(x, dtype=np.float64)
            for x in (base, secondary, fused)]
    if not vals[0].shape == vals[1].shape == vals[2].shape:
        raise ShapeMismatchError("base, secondary and fused shapes differ")
    to_fused = slice_rkl(vals[0], vals[2], axis)
    to_secondary = slice_rkl(vals[0], vals[1], axis)
    violations = int(np.count_nonzero(to_fused > to_secondary + tol))
    return StabilityProbe(float(np.mean(to_fused)), float(np.mean(to_secondary)),
                          violations, to_fused.size)


@dataclass
class SpectralReport:
    tensor_name: str
    layer: int
    rank_k: int
    sigma_base: list = field(repr=False)
    sigma_secondary: list = field(repr=False)
    sigma_fused: list = field(repr=False)
    nss_vs_base: float
    nss_vs_secondary: float
    max_angle_vs_base_deg: float
    max_angle_vs_secondary_deg: float
    parent_max_angle_deg: float
    wedin_lhs: float
    wedin_rhs: float
    spectral_gap: float
    perturbation_norm: float
    wedin_applicable: bool
    wedin_holds: bool

    def to_dict(self) -> dict:
        return asdict(self)


_LAYER_RE = re.compile(r"\d+")


def layer_index(name: str) -> int:
    """First integer in a tensor name, or -1 when there is none."""
    m = _LAYER_RE.search(name)
    return int(m.group()) if m else -1


def layer_order(names):
    """Sort names by parsed layer index; names without an index go last."""
    return sorted(names, key=lambda n: (layer_index(n) < 0, layer_index(n), n))


def spectral_report(name: str, base, secondary, fused, k: int = DEFAULT_K,
                    parents=None) -> SpectralReport:
    """Spectral comparison of one matrix-shaped tensor.

    ``parents`` may carry precomputed ``((sigma_b, u_b), (sigma_s, u_s))`` so
    that comparing several fused outputs against the same parents does not
    repeat their decompositions.
    """
    wb, ws, wf = as_matrix(base), as_matrix(secondary), as_matrix(fused)
    if not wb.shape == ws.shape == wf.shape:
        raise ShapeMismatchError(f"{name}: shapes differ")
    (sb, ub), (ss, us) = parents or (svd_spectrum(wb), svd_spectrum(ws))
    sf, uf = svd_spectrum(wf)
    k = min(k, sb.size)
    wedin = _wedin(sb, ub, uf, spectral_norm(wf - wb), k)
    return SpectralReport(
        tensor_name=name,
        layer=layer_index(name),
        rank_k=k,
        sigma_base=sb.tolist(),
        sigma_secondary=ss.tolist(),
        sigma_fused=sf.tolist(),
        nss_vs_base=nss_from_spectra(sb, sf),
        nss_vs_secondary=nss_from_spectra(ss, sf),
        max_angle_vs_base_deg=float(principal_angles(ub, uf, k)[0]),
        max_angle_vs_secondary_deg=float(principal_angles(us, uf, k)[0]),
        parent_max_angle_deg=float(principal_angles(ub, us, k)[0]),
        wedin_lhs=wedin.lhs,
        wedin_rhs=wedin.rhs,
        spectral_gap=wedin.gap,
        perturbation_norm=wedin.perturbation_norm,
        wedin_applicable=wedin.applicable,
        wedin_holds=wedin.holds,
    )


def select_matrices(tmap: TensorMap, selector: str = "*") -> list[str]:
    return [n for n in tmap if fnmatch.fnmatchcase(n, selector) and len(tmap[n].shape) >= 2]


def layer_sweep(base: TensorMap, secondary: TensorMap, fused: TensorMap, selector: str = "*",
                k: int = DEFAULT_K, threads: int = 1, cache: dict = None) -> list[SpectralReport]:
    """One SpectralReport per selected matrix-shaped tensor, in layer order.

    Pass the same ``cache`` dict across calls that share base and secondary.
    """
    names = [n for n in select_matrices(base, selector) if n in secondary and n in fused]
    if not names:
        raise ValueError(f"selector {selector!r} matches no matrix-shaped tensor")
    names = layer_order(names)
    if cache is not None:
        missing = [n for n in names if n not in cache]
        spectra = run_per_tensor(
            lambda n: (svd_spectrum(base[n]), svd_spectrum(secondary[n])), missing, threads)
        cache.update(zip(missing, spectra))

    def work(n):
        parents = cache[n] if cache is not None else None
        return spectral_report(n, base[n], secondary[n], fused[n], k, parents)

    return run_per_tensor(work, names, threads)
