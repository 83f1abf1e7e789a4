"""Command-line driver: derive, spectrum, evolve, equiconv, sweep, selftest.

A run is described by a JSON config (every key optional, defaults in
:class:`RunConfig`).  Outputs go to ``--out-dir``, falling back to the
``DIRACSIM_OUT_DIR`` environment variable and then ``./diracsim-out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import blockmat
from .blockmat import build_q, hs_norm
from .evolution import GroupEvaluator, equiconvergence_scan, smooth_state, trace_csv
from .freebasis import tilde_free_diagonal
from .potential import (DEFAULT_BRANCH_TOL, DEFAULT_DELTA_CAP, DEFAULT_GRID, DerivedPotential,
                        PotentialError, derive, load_potential, parse_potential)
from .simop import DEFAULT_MARGIN, DEFAULT_MAX_ITER, DEFAULT_TOL, SimilarityError, SimilarityResult, run_similarity
from .spectrum import build_report, match_multisets, oracle_spectrum, reduced_spectrum, set_distance

log = logging.getLogger("diracsim")

OUT_DIR_ENV = "DIRACSIM_OUT_DIR"
DEFAULT_OUT_DIR = "diracsim-out"
BUNDLED_PREFIX = "bundled:"


def bundled_names() -> list[str]:
    data = resources.files("diracsim") / "data"
    return sorted(p.name[:-4] for p in data.iterdir() if p.name.endswith(".pot"))


def bundled_text(name: str) -> str:
    return (resources.files("diracsim") / "data" / f"{name}.pot").read_text(encoding="utf-8")


@dataclass(frozen=True)
class RunConfig:
    potential: str = BUNDLED_PREFIX + "per_generic"
    bc: str | None = None  # overrides the boundary condition in the potential file
    window: int = 48
    grid: int = DEFAULT_GRID
    branch_tol: float = DEFAULT_BRANCH_TOL
    delta_cap: float = DEFAULT_DELTA_CAP
    k_margin: float = DEFAULT_MARGIN
    fixed_point_tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    residual_tol: float = 1e-8  # similarity residual relative to ||Q||_2
    times: tuple = (0.0, 1.0, 2.0)
    state_width: float = 4.0
    state_seed: int = 0
    compare_window: int | None = None  # second window for the stability table
    sweep: tuple = ()  # list of partial configs for the sweep subcommand
    base_dir: str = "."

    def __post_init__(self):
        for name in ("branch_tol", "delta_cap", "k_margin", "fixed_point_tol", "residual_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.window < 1:
            raise ValueError("window must be at least 1")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".") -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("times", "sweep"):
            if key in data:
                data[key] = tuple(data[key])
        data.setdefault("base_dir", base_dir)
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), base_dir=str(path.parent))

    def load_spec(self):
        if self.potential.startswith(BUNDLED_PREFIX):
            name = self.potential[len(BUNDLED_PREFIX):]
            if name not in bundled_names():
                raise PotentialError(f"no bundled potential named {name!r}; have {bundled_names()}")
            spec = parse_potential(bundled_text(name), source=self.potential)
        else:
            path = Path(self.potential)
            if not path.is_absolute():
                path = Path(self.base_dir) / path
            spec = load_potential(path)
        return spec.with_bc(self.bc) if self.bc else spec


class InvariantViolation(RuntimeError):
    def __init__(self, module: str, name: str, detail: str):
        super().__init__(f"[{module}] {name}: {detail}")
        self.module = module
        self.name = name


@dataclass
class PipelineRun:
    config: RunConfig
    derived: DerivedPotential
    result: SimilarityResult
    violations: list = field(default_factory=list)

    def summary(self) -> dict:
        r = self.result
        w = r.weights
        return {
            "potential": self.config.potential,
            "bc": self.derived.bc.kind,
            "branch": self.derived.branch,
            "window": self.config.window,
            "k": r.k,
            "m": r.m,
            "delta_p": self.derived.delta_p,
            "b_norm": hs_norm(r.b),
            "b_star": w.b_star if w is not None else 0.0,
            "contraction_ratio": r.contraction_ratio,
            "contraction_bound": r.contraction_bound,
            "similarity_residual": r.similarity_residual,
            "q_norm": hs_norm(r.q),
            "truncation_floor": self.derived.truncation_tail(self.config.window) ** 0.5,
            "iterations": r.iterations,
            "correction_nuclear": r.correction_nuclear,
            "violations": [str(v) for v in self.violations],
        }


def run_pipeline(config: RunConfig) -> PipelineRun:
    """derive -> buildQ -> similarity; records named invariant violations instead of raising."""
    spec = config.load_spec()
    derived = derive(spec, grid=config.grid, branch_tol=config.branch_tol, delta_cap=config.delta_cap)
    a0 = tilde_free_diagonal(derived, config.window)
    q = build_q(derived, a0.layout)
    qn = hs_norm(q)
    result = run_similarity(a0, q, margin=config.k_margin, tol=config.fixed_point_tol, max_iter=config.max_iter,
                            delta_p=derived.delta_p, residual_limit=config.residual_tol * max(qn, 1e-300))
    run = PipelineRun(config, derived, result)
    if result.similarity_residual > config.residual_tol * max(qn, 1e-300) and qn > 0:
        run.violations.append(InvariantViolation("simop", "similarity residual",
                                                 f"{result.similarity_residual:.3e} > {config.residual_tol:.1e}*||Q||"))
    if result.contraction_ratio > result.contraction_bound + 1e-10:
        run.violations.append(InvariantViolation("simop", "contraction", f"{result.contraction_ratio:.3e}"))
    if result.min_singular <= 0:
        run.violations.append(InvariantViolation("simop", "I+U invertible", "singular"))
    return run


def compare_windows(config: RunConfig, n1: int, n2: int, interior: int | None = None) -> dict:
    """Per-component eigenvalue drift of the dense oracle between windows n1 < n2."""
    if not n1 < n2:
        raise ValueError("need n1 < n2")
    spec = config.load_spec()
    derived = derive(spec, grid=config.grid, branch_tol=config.branch_tol, delta_cap=config.delta_cap)
    o1 = oracle_spectrum(derived, n1)
    o2 = oracle_spectrum(derived, n2)
    interior = n1 // 2 if interior is None else interior
    rows = [(n, set_distance(o1.components[n], o2.components[n])) for n in range(-n1, n1 + 1)]
    inner = [d for n, d in rows if abs(n) <= interior]
    return {"rows": rows, "interior": interior, "max_interior_drift": max(inner)}


# --- output helpers --------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text, encoding="utf-8")
    return path


# --- subcommands -----------------------------------------------------------


def cmd_derive(config: RunConfig, out: Path, fmt: str) -> int:
    spec = config.load_spec()
    derived = derive(spec, grid=config.grid, branch_tol=config.branch_tol, delta_cap=config.delta_cap)
    write(out, "derived.json", dump_json(derived.summary()))
    if fmt == "csv":
        a0 = tilde_free_diagonal(derived, config.window)
        write(out, "q_matrix.csv", blockmat.to_csv(build_q(derived, a0.layout)))
    print(dump_json(derived.summary()), end="")
    return 0


def _finish(run: PipelineRun, out: Path) -> int:
    write(out, "summary.json", dump_json(run.summary()))
    for v in run.violations:
        print(f"violation: {v}", file=sys.stderr)
    return 1 if run.violations else 0


def cmd_spectrum(config: RunConfig, out: Path, fmt: str) -> int:
    run = run_pipeline(config)
    report = build_report(run.derived, run.result)
    oracle_all = np.concatenate([np.asarray(v, dtype=complex) for v in report.oracle.values()])
    gap = match_multisets(oracle_all, reduced_spectrum(run.result))
    if gap > 10 * max(run.result.similarity_residual, 1e-15):
        run.violations.append(InvariantViolation("spectrum", "multiset match", f"{gap:.3e}"))
    if fmt == "csv":
        write(out, "spectrum.csv", report.to_csv())
    write(out, "spectrum.json", dump_json({**report.summary(), "multiset_gap": gap}))
    return _finish(run, out)


def cmd_evolve(config: RunConfig, out: Path, fmt: str) -> int:
    run = run_pipeline(config)
    ev = GroupEvaluator.build(run.derived, run.result)
    x = smooth_state(run.result.layout, config.state_width, config.state_seed)
    times = [float(t) for t in config.times]
    states = [ev.full_group(t, x) for t in times]
    if fmt == "csv":
        write(out, "evolution.csv", trace_csv(times, states))
    else:
        write(out, "evolution.json", dump_json({"times": times,
                                                "states": [[[v.real, v.imag] for v in s] for s in states]}))
    return _finish(run, out)


def cmd_equiconv(config: RunConfig, out: Path, fmt: str) -> int:
    run = run_pipeline(config)
    ev = GroupEvaluator.build(run.derived, run.result)
    scan = equiconvergence_scan(ev)
    if not scan.nonincreasing():
        run.violations.append(InvariantViolation("evolution", "equiconvergence monotone", "scan increased"))
    if fmt == "csv":
        write(out, "equiconvergence.csv", scan.to_csv())
    write(out, "equiconvergence.json", dump_json({
        "ells": scan.ells, "norms": scan.norms, "floor": scan.floor, "condition": scan.condition,
        "cross_max": scan.cross_max, "sum_defect": scan.sum_defect}))
    return _finish(run, out)


def cmd_sweep(config: RunConfig, out: Path, fmt: str, workers: int = 4) -> int:
    """Run each entry of ``config.sweep`` (partial configs over the base config) in worker threads."""
    entries = list(config.sweep) or [{}]
    configs = [replace(config, sweep=(), **entry) for entry in entries]

    def one(cfg):
        try:
            run = run_pipeline(cfg)
            row = run.summary()
            if cfg.compare_window:
                lo, hi = sorted((cfg.window, cfg.compare_window))
                row["max_interior_drift"] = compare_windows(cfg, lo, hi)["max_interior_drift"]
            return row
        except (PotentialError, SimilarityError, ValueError) as exc:
            return {"potential": cfg.potential, "window": cfg.window, "error": str(exc)}

    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(one, configs))
    write(out, "sweep.json", dump_json(rows))
    if fmt == "csv":
        keys = ["potential", "bc", "window", "k", "m", "delta_p", "similarity_residual", "max_interior_drift", "error"]
        lines = [",".join(keys)]
        for row in rows:
            lines.append(",".join("" if row.get(k) is None else str(row.get(k)) for k in keys))
        write(out, "sweep.csv", "\n".join(lines) + "\n")
    return 1 if any("error" in r or r.get("violations") for r in rows) else 0


def selftest_report(window: int = 24) -> tuple[str, bool]:
    """Invariant suite over the bundled potentials; returns (report text, all passed)."""
    from .blockmat import BlockMatrix, apply_gamma, apply_j, commutator_residual
    from .freebasis import custom_layout

    lines = []
    ok = True

    def check(name, passed, detail):
        nonlocal ok
        ok &= bool(passed)
        lines.append(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")

    lay = custom_layout([1.0, -1.0])
    toy = run_similarity(BlockMatrix(np.diag([1.0, -1.0]).astype(complex), lay),
                         BlockMatrix(np.array([[0, 0.1], [0.1, 0]], dtype=complex), lay), k=1)
    mu = np.sort(np.diag(toy.reduced().data).real)
    check("toy eigenvalues", np.allclose(mu, [-np.sqrt(1.01), np.sqrt(1.01)], atol=1e-12, rtol=0),
          f"{mu[0]:.12f} {mu[1]:.12f}")

    rng = np.random.default_rng(2024)
    for name in bundled_names():
        cfg = RunConfig(potential=BUNDLED_PREFIX + name, window=window)
        run = run_pipeline(cfg)
        r = run.result
        a0 = r.a0
        x = a0.like(rng.standard_normal((a0.layout.dim,) * 2) + 1j * rng.standard_normal((a0.layout.dim,) * 2))
        comm = commutator_residual(a0, x, r.k) / hs_norm(x)
        jg = hs_norm(apply_j(apply_gamma(x, r.k), r.k))
        check(f"{name} transforms", comm < 1e-12 and jg == 0, f"commutator {comm:.1e}")
        qn = hs_norm(r.q)
        check(f"{name} similarity", r.similarity_residual < cfg.residual_tol * qn,
              f"k={r.k} m={r.m} residual/|Q| {r.similarity_residual / qn:.1e}")
        orc = oracle_spectrum(run.derived, window, r.a0, r.q)
        gap = match_multisets(orc.values, reduced_spectrum(r))
        check(f"{name} spectrum match", gap <= 10 * r.similarity_residual, f"gap {gap:.1e}")
        ev = GroupEvaluator.build(run.derived, r)
        xs = smooth_state(r.layout)
        law = np.linalg.norm(ev.full_group(0.7, xs) - ev.full_group(0.3, ev.full_group(0.4, xs)))
        check(f"{name} group law", law < 1e-10, f"{law:.1e}")
        scan = equiconvergence_scan(ev)
        check(f"{name} resolution of identity", scan.cross_max < 1e-8 and scan.sum_defect < 1e-8,
              f"cross {scan.cross_max:.1e} sum {scan.sum_defect:.1e}")
        check(f"{name} equiconvergence monotone", scan.nonincreasing(), f"start {scan.norms[0]:.2e}")
    lines.append(f"{'ALL PASSED' if ok else 'FAILURES PRESENT'}")
    return "\n".join(lines) + "\n", ok


def cmd_selftest(config: RunConfig, out: Path, fmt: str, window: int | None = None) -> int:
    text, ok = selftest_report(window or 24)
    write(out, "selftest.txt", text)
    print(text, end="")
    return 0 if ok else 1


COMMANDS = {
    "derive": cmd_derive,
    "spectrum": cmd_spectrum,
    "evolve": cmd_evolve,
    "equiconv": cmd_equiconv,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diracsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["selftest"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--potential", help=f"potential file or {BUNDLED_PREFIX}<name>")
        p.add_argument("--bc", choices=["per", "ap", "dir"])
        p.add_argument("--window", type=int)
        p.add_argument("--grid", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--format", choices=["csv", "json"], default="csv")
    return parser


def resolve_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.potential:
        overrides["potential"] = args.potential
        overrides["base_dir"] = "."
    if args.bc:
        overrides["bc"] = args.bc
    if args.window is not None and args.command != "selftest":
        overrides["window"] = args.window
    if args.grid is not None:
        overrides["grid"] = args.grid
    return replace(config, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
    try:
        config = resolve_config(args)
        if args.command == "selftest":
            return cmd_selftest(config, out, args.format, args.window)
        return COMMANDS[args.command](config, out, args.format)
    except (PotentialError, ValueError, OSError, json.JSONDecodeError, SimilarityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
