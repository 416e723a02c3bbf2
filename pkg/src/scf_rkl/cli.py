"""``scf-rkl`` command-line driver: merge, diagnose, compare and gen-fixture.

Exit codes: 0 success, 2 configuration error, 3 I/O or container error,
4 shape mismatch under a strict policy. Failures print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import METHODS as BASELINE_METHODS, BaselineConfig, merge_checkpoint
from .checkpoint_io import (DTYPES, CheckpointError, TensorMap, atomic_write, load_checkpoint,
                            save_checkpoint)
from .diagnostics import (DEFAULT_K, ProvenanceHistogram, entropy_probe, layer_sweep, provenance,
                          stability_probe)
from .fixtures import FixtureSpec, make_fixture
from .fusion import UNMATCHED_POLICIES, FusionConfig, ShapeMismatchError, fuse_checkpoint
from .reporting import csv_text, dumps

TOOL = "scf-rkl"
METHODS = ("scf-rkl",) + BASELINE_METHODS
THREADS_ENV = "SCF_RKL_THREADS"
SCHEMA = 1

FUSION_PARAMS = ("alpha", "epsilon", "q_low", "q_high", "q_center")
BASELINE_PARAMS = ("lambda", "density", "drop_rate", "seed")
RECIPE_KEYS = ("method", "base", "secondary", "out", "unmatched_policy", "report", "threads",
               *FUSION_PARAMS, *BASELINE_PARAMS)


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1")
    return n


@dataclass
class MergeRecipe:
    method: str
    base: str
    secondary: list
    out: str
    unmatched_policy: str = "error"
    report: str | None = None
    threads: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.base or not self.out:
            raise ConfigError("base and out paths are required")
        if not self.secondary:
            raise ConfigError("at least one secondary checkpoint is required")
        if self.unmatched_policy not in UNMATCHED_POLICIES:
            raise ConfigError(f"unmatched policy must be one of {', '.join(UNMATCHED_POLICIES)}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        inputs = [os.path.abspath(p) for p in [self.base, *self.secondary]]
        outputs = [os.path.abspath(self.out), os.path.abspath(self.report_path)]
        if len(set(outputs)) < 2 or set(outputs) & set(inputs):
            raise ConfigError("output and report paths must differ from each other and the inputs")
        self.config()

    @property
    def report_path(self) -> str:
        return self.report or self.out + ".manifest.json"

    def relevant(self) -> tuple[str, ...]:
        return FUSION_PARAMS if self.method == "scf-rkl" else BASELINE_PARAMS

    def config(self):
        p = {k: v for k, v in self.params.items() if k in self.relevant()}
        try:
            if self.method == "scf-rkl":
                return FusionConfig(**p)
            if "lambda" in p:
                p["lam"] = p.pop("lambda")
            return BaselineConfig(method=self.method, **p)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def echo(self) -> dict:
        """Recipe as recorded in the manifest; thread count is left out so outputs match."""
        cfg = asdict(self.config())
        if "lam" in cfg:
            cfg["lambda"] = cfg.pop("lam")
        cfg.pop("method", None)
        return {
            "method": self.method,
            "base": self.base,
            "secondary": list(self.secondary),
            "out": self.out,
            "unmatched_policy": self.unmatched_policy,
            "report": self.report_path,
            "config": cfg,
        }

    def ignored(self) -> list[str]:
        return sorted(k for k in self.params if k not in self.relevant())


_NUMERIC = {"alpha": float, "epsilon": float, "q_low": float, "q_high": float,
            "q_center": float, "lambda": float, "density": float, "drop_rate": float, "seed": int}


def _coerce(key, value):
    kind = _NUMERIC[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number")
    if kind is int and (isinstance(value, float) and not value.is_integer()):
        raise ConfigError(f"{key} must be an integer")
    return kind(value)


def load_recipe(path) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"recipe {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"recipe {path}: top level must be an object")
    unknown = sorted(set(data) - set(RECIPE_KEYS))
    if unknown:
        raise ConfigError(f"recipe {path}: unknown keys {', '.join(unknown)}")
    if isinstance(data.get("secondary"), str):
        data["secondary"] = [data["secondary"]]
    return data


def build_recipe(args) -> MergeRecipe:
    """Recipe JSON first, command-line flags override it."""
    data = load_recipe(args.recipe) if args.recipe else {}
    for key in RECIPE_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    params = {k: _coerce(k, data[k]) for k in _NUMERIC if k in data}
    threads = data.get("threads")
    if threads is None:
        threads = default_threads()
    elif isinstance(threads, bool) or not isinstance(threads, int):
        raise ConfigError("threads must be an integer")
    secondary = data.get("secondary") or []
    if not isinstance(secondary, list) or not all(isinstance(s, str) for s in secondary):
        raise ConfigError("secondary must be a path or a list of paths")
    return MergeRecipe(
        method=data.get("method", "scf-rkl"),
        base=data.get("base"),
        secondary=secondary,
        out=data.get("out"),
        unmatched_policy=data.get("unmatched_policy", "error"),
        report=data.get("report"),
        threads=threads,
        params=params,
    )


def _source(name, fused: TensorMap, base: TensorMap) -> str:
    if name in base and fused[name].raw == base[name].raw and fused[name].dtype == base[name].dtype:
        return "base"
    return "secondary"


def run_merge(recipe: MergeRecipe):
    """Load inputs and merge; return ``(fused TensorMap, manifest dict)``."""
    base = load_checkpoint(recipe.base)
    secondaries = [load_checkpoint(p) for p in recipe.secondary]
    cfg = recipe.config()
    warnings = [f"ignored {k} for method {recipe.method}" for k in recipe.ignored()]
    per_tensor = {}
    if recipe.method == "scf-rkl":
        fused = base
        for step, sec in enumerate(secondaries):
            result = fuse_checkpoint(fused, sec, cfg, recipe.unmatched_policy, recipe.threads)
            fused = result.fused
            warnings.extend(f"step {step}: {w}" if len(secondaries) > 1 else w
                            for w in result.warnings)
            for s in result.stats:
                per_tensor.setdefault(s.name, []).append(s.to_dict())
    else:
        result = merge_checkpoint(base, secondaries, cfg, recipe.unmatched_policy, recipe.threads)
        fused = result.fused
        warnings.extend(result.warnings)
        for s in result.stats:
            per_tensor[s.name] = [s.to_dict()]

    rows = []
    for name in fused:
        steps = per_tensor.get(name)
        if steps is None:
            rows.append({"name": name, "source": _source(name, fused, base),
                         "total": fused[name].size, "dtype": fused[name].dtype})
        elif len(steps) == 1:
            rows.append({"name": name, "source": "merged", **steps[0]})
        else:
            rows.append({"name": name, "source": "merged", "steps": steps})

    manifest = {"schema": SCHEMA, "tool": TOOL, "version": __version__, "command": "merge",
                "recipe": recipe.echo()}
    if recipe.method == "scf-rkl":
        manifest["fold_order"] = list(recipe.secondary)
    manifest["tensors"] = rows
    manifest["warnings"] = warnings
    return fused, manifest


def write_merge(recipe: MergeRecipe, fused: TensorMap, manifest: dict):
    text = dumps(manifest)
    save_checkpoint(fused, recipe.out)
    atomic_write(recipe.report_path, text)


# diagnostics ---------------------------------------------------------------

SPECTRA_COLUMNS = ["tensor", "layer", "index", "sigma_base", "sigma_secondary", "sigma_fused"]
ANGLE_COLUMNS = ["tensor", "layer", "rank_k", "max_angle_vs_base_deg",
                 "max_angle_vs_secondary_deg", "parent_max_angle_deg", "wedin_lhs", "wedin_rhs",
                 "spectral_gap", "perturbation_norm", "wedin_applicable", "wedin_holds"]
NSS_COLUMNS = ["tensor", "layer", "nss_vs_base", "nss_vs_secondary"]
PROVENANCE_COLUMNS = ["tensor", "from_base", "from_secondary", "from_both", "from_neither",
                      "total", "neither_fraction"]
ENTROPY_COLUMNS = ["tensor", "h_base", "h_fused", "entropy_drop", "masked_delta_l2",
                   "implied_lipschitz", "slices"]
STABILITY_COLUMNS = ["tensor", "rkl_base_to_fused", "rkl_base_to_secondary", "violations",
                     "slices", "violation_rate"]


def _common(base: TensorMap, secondary: TensorMap, fused: TensorMap) -> list[str]:
    names = [n for n in fused if n in base and n in secondary
             and base[n].shape == secondary[n].shape == fused[n].shape]
    if not names:
        raise ShapeMismatchError("base, secondary and fused share no tensor of equal shape")
    return names


def diagnose_maps(base: TensorMap, secondary: TensorMap, fused: TensorMap, selector: str = "*",
                  k: int = DEFAULT_K, threads: int = 1, cache: dict = None):
    """Compute every diagnostic; return ``(report dict, {filename: text})``."""
    spectral = layer_sweep(base, secondary, fused, selector, k, threads, cache)
    names = _common(base, secondary, fused)
    prov = {n: provenance(base[n], secondary[n], fused[n]) for n in names}
    ent = {n: entropy_probe(base[n], fused[n]) for n in names}
    stab = {n: stability_probe(base[n], secondary[n], fused[n]) for n in names}

    total_prov = sum(prov.values(), ProvenanceHistogram())
    slices = sum(s.slices for s in stab.values())
    applicable = [r for r in spectral if r.wedin_applicable]
    summary = {
        "matrices": len(spectral),
        "tensors": len(names),
        "mean_nss_vs_base": float(np.mean([r.nss_vs_base for r in spectral])),
        "mean_nss_vs_secondary": float(np.mean([r.nss_vs_secondary for r in spectral])),
        "mean_max_angle_vs_base_deg": float(np.mean([r.max_angle_vs_base_deg for r in spectral])),
        "mean_max_angle_vs_secondary_deg":
            float(np.mean([r.max_angle_vs_secondary_deg for r in spectral])),
        "wedin_applicable": len(applicable),
        "wedin_holds": sum(r.wedin_holds for r in applicable),
        "mean_entropy_drop": float(np.mean([e.entropy_drop for e in ent.values()])),
        # slice-weighted, i.e. the mean over every slice of every tensor
        "rkl_base_to_fused":
            sum(s.rkl_base_to_fused * s.slices for s in stab.values()) / slices,
        "rkl_base_to_secondary":
            sum(s.rkl_base_to_secondary * s.slices for s in stab.values()) / slices,
        "stability_violations": sum(s.violations for s in stab.values()),
        "stability_slices": slices,
        "stability_violation_rate": sum(s.violations for s in stab.values()) / slices,
        "provenance": {**total_prov.to_dict(), "neither_fraction": total_prov.neither_fraction},
    }
    tensors = []
    for n in names:
        row = {"name": n, "provenance": {**prov[n].to_dict(),
                                         "neither_fraction": prov[n].neither_fraction},
               "entropy": ent[n].to_dict(), "stability": stab[n].to_dict()}
        tensors.append(row)
    report = {"schema": SCHEMA, "tool": TOOL, "version": __version__, "command": "diagnose",
              "selector": selector, "k": k, "summary": summary,
              "spectral": [r.to_dict() for r in spectral], "tensors": tensors}

    spectra_rows = []
    for r in spectral:
        for i, (a, b, c) in enumerate(zip(r.sigma_base, r.sigma_secondary, r.sigma_fused)):
            spectra_rows.append([r.tensor_name, r.layer, i, a, b, c])
    files = {
        "report.json": dumps(report),
        "spectra.csv": csv_text(SPECTRA_COLUMNS, spectra_rows),
        "angles.csv": csv_text(ANGLE_COLUMNS,
                               [{"tensor": r.tensor_name, **r.to_dict()} for r in spectral]),
        "nss.csv": csv_text(NSS_COLUMNS,
                            [{"tensor": r.tensor_name, **r.to_dict()} for r in spectral]),
        "provenance.csv": csv_text(PROVENANCE_COLUMNS, [
            {"tensor": n, **prov[n].to_dict(), "neither_fraction": prov[n].neither_fraction}
            for n in names]),
        "entropy.csv": csv_text(ENTROPY_COLUMNS,
                                [{"tensor": n, **ent[n].to_dict()} for n in names]),
        "stability.csv": csv_text(STABILITY_COLUMNS,
                                  [{"tensor": n, **stab[n].to_dict()} for n in names]),
    }
    return report, files


def write_files(out_dir, files: dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        atomic_write(out_dir / name, text)


COMPARISON_METRICS = ("mean_nss_vs_base", "mean_nss_vs_secondary", "mean_max_angle_vs_base_deg",
                      "mean_max_angle_vs_secondary_deg", "mean_entropy_drop", "rkl_base_to_fused",
                      "rkl_base_to_secondary", "stability_violation_rate", "neither_fraction",
                      "changed_fraction", "wedin_hold_rate")


def _changed_fraction(base: TensorMap, fused: TensorMap) -> float:
    changed = total = 0
    for n in fused:
        total += fused[n].size
        if n in base and base[n].dtype == fused[n].dtype:
            changed += int(np.count_nonzero(base[n].bits() != fused[n].bits()))
        else:
            changed += fused[n].size
    return changed / total


def comparison_rows(method: str, summary: dict, base: TensorMap, fused: TensorMap) -> list:
    values = dict(summary)
    values["neither_fraction"] = summary["provenance"]["neither_fraction"]
    values["changed_fraction"] = _changed_fraction(base, fused)
    applicable = summary["wedin_applicable"]
    values["wedin_hold_rate"] = summary["wedin_holds"] / applicable if applicable else float("nan")
    return [[method, m, values[m]] for m in COMPARISON_METRICS]


# commands ------------------------------------------------------------------

def _timing(args, label, start):
    if getattr(args, "timing", False):
        print(json.dumps({"timing": label, "seconds": round(time.perf_counter() - start, 6)}),
              file=sys.stderr)


def cmd_merge(args) -> int:
    start = time.perf_counter()
    recipe = build_recipe(args)
    fused, manifest = run_merge(recipe)
    write_merge(recipe, fused, manifest)
    _timing(args, "merge", start)
    return 0


def cmd_diagnose(args) -> int:
    start = time.perf_counter()
    threads = args.threads if args.threads is not None else default_threads()
    if threads < 1:
        raise ConfigError("threads must be at least 1")
    if args.k < 1:
        raise ConfigError("k must be at least 1")
    maps = [load_checkpoint(p) for p in (args.base, args.secondary, args.fused)]
    report, files = diagnose_maps(*maps, selector=args.selector, k=args.k, threads=threads)
    report["inputs"] = {"base": args.base, "secondary": args.secondary, "fused": args.fused}
    files["report.json"] = dumps(report)
    write_files(args.out, files)
    _timing(args, "diagnose", start)
    return 0


def _methods(requested) -> list[str]:
    methods = []
    for item in requested or []:
        for m in item.split(","):
            m = m.strip()
            if m == "all":
                methods.extend(METHODS)
            elif m:
                methods.append(m)
    methods = list(dict.fromkeys(methods))
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {', '.join(unknown)}")
    if len(methods) < 2:
        raise ConfigError("compare needs at least two distinct methods")
    return methods


def cmd_compare(args) -> int:
    start = time.perf_counter()
    methods = _methods(args.method)
    if not args.secondary or len(args.secondary) != 1:
        raise ConfigError("compare takes exactly one --secondary")
    out_dir = Path(args.out)
    recipes = []
    for m in methods:
        ns = argparse.Namespace(**vars(args))
        ns.method, ns.out, ns.report = m, str(out_dir / m / "merged.safetensors"), None
        recipes.append(build_recipe(ns))

    base = load_checkpoint(args.base)
    secondary = load_checkpoint(args.secondary[0])
    cache = {}
    pending, rows = [], []
    for m, recipe in zip(methods, recipes):
        fused, manifest = run_merge(recipe)
        report, files = diagnose_maps(base, secondary, fused, args.selector, args.k,
                                      recipe.threads, cache)
        report["inputs"] = {"base": args.base, "secondary": args.secondary[0],
                            "fused": recipe.out}
        files["report.json"] = dumps(report)
        pending.append((recipe, fused, manifest, files))
        rows.extend(comparison_rows(m, report["summary"], base, fused))

    # nothing is written until every method has succeeded
    for recipe, fused, manifest, files in pending:
        Path(recipe.out).parent.mkdir(parents=True, exist_ok=True)
        write_merge(recipe, fused, manifest)
        write_files(Path(recipe.out).parent / "diagnostics", files)
    atomic_write(out_dir / "comparison.csv", csv_text(["method", "metric", "value"], rows))
    _timing(args, "compare", start)
    return 0


def cmd_gen_fixture(args) -> int:
    try:
        spec = FixtureSpec(layers=args.layers, width=args.width, outputs=args.outputs,
                           seed=args.seed, scale=args.scale, sparse_fraction=args.sparse_fraction,
                           sparse_gain=args.sparse_gain, drift=args.drift, dtype=args.dtype)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    base, secondary = make_fixture(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(base, out / "base.safetensors")
    save_checkpoint(secondary, out / "secondary.safetensors")
    return 0


def _add_merge_flags(p, with_out=True):
    p.add_argument("--recipe", help="JSON recipe; flags override its fields")
    p.add_argument("--base")
    p.add_argument("--secondary", action="append", help="repeatable")
    if with_out:
        p.add_argument("--out")
        p.add_argument("--report", help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--unmatched-policy", dest="unmatched_policy", choices=UNMATCHED_POLICIES)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--q-low", dest="q_low", type=float)
    p.add_argument("--q-high", dest="q_high", type=float)
    p.add_argument("--q-center", dest="q_center", type=float)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--density", type=float)
    p.add_argument("--drop-rate", dest="drop_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help=f"worker count (default ${THREADS_ENV} or 1)")
    p.add_argument("--timing", action="store_true", help="print wall-clock time to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=TOOL, description="Sparse reverse-KL checkpoint fusion and baselines.")
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    merge = sub.add_parser("merge", help="merge checkpoints into one")
    merge.add_argument("--method", choices=METHODS)
    _add_merge_flags(merge)
    merge.set_defaults(func=cmd_merge)

    diag = sub.add_parser("diagnose", help="spectral and information diagnostics")
    diag.add_argument("--base", required=True)
    diag.add_argument("--secondary", required=True)
    diag.add_argument("--fused", required=True)
    diag.add_argument("--out", required=True, help="output directory")
    diag.add_argument("--k", type=int, default=DEFAULT_K, help="subspace rank for angles")
    diag.add_argument("--selector", default="*", help="glob over tensor names")
    diag.add_argument("--threads", type=int)
    diag.add_argument("--timing", action="store_true")
    diag.set_defaults(func=cmd_diagnose)

    comp = sub.add_parser("compare", help="run several methods and diagnose each")
    comp.add_argument("--method", action="append",
                      help="repeatable or comma separated; 'all' for every method")
    _add_merge_flags(comp, with_out=False)
    comp.add_argument("--out", required=True, help="output directory")
    comp.add_argument("--k", type=int, default=DEFAULT_K)
    comp.add_argument("--selector", default="*")
    comp.set_defaults(func=cmd_compare)

    gen = sub.add_parser("gen-fixture", help="write a seeded synthetic MLP checkpoint pair")
    defaults = FixtureSpec()
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--layers", type=int, default=defaults.layers)
    gen.add_argument("--width", type=int, default=defaults.width)
    gen.add_argument("--outputs", type=int, default=defaults.outputs)
    gen.add_argument("--seed", type=int, default=defaults.seed)
    gen.add_argument("--scale", type=float, default=defaults.scale)
    gen.add_argument("--sparse-fraction", type=float, default=defaults.sparse_fraction)
    gen.add_argument("--sparse-gain", type=float, default=defaults.sparse_gain)
    gen.add_argument("--drift", type=float, default=defaults.drift)
    gen.add_argument("--dtype", choices=sorted(DTYPES), default=defaults.dtype)
    gen.set_defaults(func=cmd_gen_fixture)
    return parser


def _fail(kind: str, code: int, message) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": " ".join(str(message).split())}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", 2, exc)
    except ShapeMismatchError as exc:
        return _fail("shape_mismatch", 4, exc)
    except (OSError, CheckpointError) as exc:
        return _fail("io", 3, exc)
    except ValueError as exc:
        return _fail("config", 2, exc)


if __name__ == "__main__":
    sys.exit(main())
