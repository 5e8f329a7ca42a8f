"""Command-line front end: ``tomo phantom|precompute|reconstruct|bench``.

Settings come from built-in defaults, then an optional ``key=value`` config
file, then command-line flags.  Exit codes: 0 success, 2 configuration error,
3 numerical failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import nufft
from .core import generate_shepp_logan, write_image
from .fourier_slice import Geometry, make_angle_set, make_geometry, synthesize_data
from .normal_ops import MemoryCapError, NormalBackend, SurrogateConfig, build_btb, build_surrogate
from .solver import CGDivergenceError, SolverConfig, split_bregman_tv
from .sparse import DimensionMismatchError, SparseFormatError, load_sparse, save_sparse

log = logging.getLogger("tomo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THRESHOLDS = (1e-2, 1e-4, 1e-6, 1e-8)
BACKENDS = ("direct", "fused", "surrogate")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    n: int = 128
    d: int = 1
    preset: str = "digits6"
    backend: str = "fused"
    r: int = 1
    alpha: float = 1.0
    lam: float = 1.0
    iters: int = 200
    cg_steps: int = 5
    tol: float = 1e-8
    noise: float = 0.0
    feedback: int = 0
    stencil_norm: str = "chebyshev"
    stencil_scale: str = "dc"
    cache_dir: str = ".tomo-cache"
    out: str = "tomo-out"
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.n < 4 or self.n % 2:
            raise ConfigError(f"n must be an even integer >= 4, got {self.n}")
        if self.d < 1:
            raise ConfigError(f"d must be positive, got {self.d}")
        if self.preset not in nufft.PRESETS:
            raise ConfigError(f"preset must be one of {sorted(nufft.PRESETS)}, got {self.preset!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if not 1 <= self.r < self.n // 2:
            raise ConfigError(f"r must lie in [1, n/2), got {self.r}")
        if not (self.alpha > 0 and self.lam > 0):
            raise ConfigError("alpha and lambda must be positive")
        if self.iters < 1 or self.cg_steps < 1:
            raise ConfigError("iters and cg-steps must be positive")
        if self.tol < 0 or self.noise < 0:
            raise ConfigError("tol and noise must be nonnegative")
        if self.feedback not in (0, 1):
            raise ConfigError(f"feedback must be 0 or 1, got {self.feedback}")
        if self.stencil_norm not in ("chebyshev", "euclidean"):
            raise ConfigError(f"unknown stencil norm {self.stencil_norm!r}")
        if self.stencil_scale not in ("dc", "raw"):
            raise ConfigError(f"unknown stencil scale {self.stencil_scale!r}")
        try:
            make_angle_set(self.n, self.d)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def digest(self) -> str:
        """Short hash of every field except output locations."""
        body = {k: v for k, v in asdict(self).items() if k not in ("cache_dir", "out")}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]

    def solver_config(self, reference=None, **extra) -> SolverConfig:
        return SolverConfig(alpha=self.alpha, lam=self.lam, max_bregman_iters=self.iters,
                            cg_steps_per_update=self.cg_steps, update_tol_rel=self.tol,
                            record_reference=reference, data_feedback=bool(self.feedback), **extra)


_ALIASES = {"lambda": "lam", "cg-steps": "cg_steps", "cache-dir": "cache_dir",
            "stencil-norm": "stencil_norm", "stencil-scale": "stencil_scale"}


def _coerce(key: str, raw) -> object:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if key not in kinds:
        raise ConfigError(f"unknown config key {key!r}")
    kind = kinds[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return str(raw)


def read_config_file(path) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key.replace("-", "_"))
        values[key] = _coerce(key, value)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return RunConfig(**values).validate()


# -- operator cache -----------------------------------------------------------

def _btb_path(cfg: RunConfig) -> Path:
    return Path(cfg.cache_dir) / f"btb_n{cfg.n}_{cfg.preset}_d{cfg.d}.spm"


def _t_path(cfg: RunConfig) -> Path:
    return Path(cfg.cache_dir) / f"t_n{cfg.n}_{cfg.preset}_d{cfg.d}_r{cfg.r}_{cfg.stencil_norm}_{cfg.stencil_scale}.spm"


def _expected_meta(geometry: Geometry, r: int) -> dict:
    return {"n": geometry.n, "m_sp": geometry.params.m_sp, "tau": geometry.params.tau,
            "n_angles": geometry.grid.n_angles, "d": geometry.grid.angle_set.subsample_d, "r": r}


def _cached(path: Path, expect: dict, build):
    """Load ``path`` if it is valid for ``expect``; otherwise build and save it."""
    if path.exists():
        try:
            op = load_sparse(path, expect=expect)
            log.info("cached %s", path)
            return op, True
        except (SparseFormatError, DimensionMismatchError) as exc:
            log.warning("rebuilding %s: %s", path, exc)
    path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    op = build()
    save_sparse(op, path)
    log.info("built %s (%d stored entries, %.1f s)", path, op.nnz, time.perf_counter() - t0)
    return op, False


def load_or_build(cfg: RunConfig, geometry: Geometry, want_t: bool):
    """Return ``(btb, t, hits)``; ``t`` is None unless ``want_t``."""
    btb, hit_b = _cached(_btb_path(cfg), _expected_meta(geometry, 0), lambda: build_btb(geometry))
    hits = [hit_b]
    t = None
    if want_t:
        sc = SurrogateConfig(cfg.r, norm=cfg.stencil_norm, scale=cfg.stencil_scale)
        t, hit_t = _cached(_t_path(cfg), _expected_meta(geometry, cfg.r), lambda: build_surrogate(geometry, btb, sc))
        hits.append(hit_t)
    return btb, t, hits


def backend_for(cfg: RunConfig, geometry: Geometry) -> NormalBackend:
    if cfg.backend == "direct":
        return NormalBackend("direct", geometry)
    btb, t, _ = load_or_build(cfg, geometry, cfg.backend == "surrogate")
    return NormalBackend(cfg.backend, geometry, btb=btb, t=t)


# -- commands -----------------------------------------------------------------

def cmd_phantom(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"phantom_n{cfg.n}.pgm"
    write_image(generate_shepp_logan(cfg.n), path)
    log.info("wrote %s", path)
    return path


def cmd_precompute(cfg: RunConfig) -> list:
    geometry = make_geometry(cfg.n, cfg.d, cfg.preset)
    _, _, hits = load_or_build(cfg, geometry, cfg.backend == "surrogate")
    return hits


def run_once(cfg: RunConfig, trace_path: Path | None = None) -> dict:
    """Synthesize data, reconstruct, and return a summary row (plus the image)."""
    geometry = make_geometry(cfg.n, cfg.d, cfg.preset)
    phantom = generate_shepp_logan(cfg.n)
    data = synthesize_data(phantom, geometry, noise=cfg.noise, seed=cfg.seed)
    backend = backend_for(cfg, geometry)
    mu, trace = split_bregman_tv(backend, data, cfg.solver_config(reference=phantom))
    if trace_path is not None:
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        trace.to_csv(trace_path)
    row = {
        "config_hash": cfg.digest(),
        **{k: v for k, v in asdict(cfg).items() if k not in ("cache_dir", "out")},
        "n_angles": geometry.grid.n_angles,
        "iterations": trace.iterations,
        "total_s": trace.t_total_s[-1],
        "cg_s": trace.t_cg_s[-1],
        "final_rel_l1": trace.rel_l1_err[-1],
        "stopping_reason": trace.stopping_reason,
    }
    for thr in THRESHOLDS:
        hit = trace.first_crossing(thr)
        row[f"iters_{thr:g}"] = hit[0] if hit else None
        row[f"secs_{thr:g}"] = hit[1] if hit else None
    return {"row": row, "image": mu, "trace": trace}


def cmd_reconstruct(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"recon_{cfg.backend}_n{cfg.n}_d{cfg.d}_{cfg.digest()}"
    result = run_once(cfg, out / f"{stem}_trace.csv")
    write_image(result["image"], out / f"{stem}.pgm")
    with open(out / "summary.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(result["row"]) + "\n")
    row = result["row"]
    log.info("%s: %d iterations, rel L1 error %.6g, %.2f s (%s)", cfg.backend, row["iterations"],
             row["final_rel_l1"], row["total_s"], row["stopping_reason"])
    return row


def time_application(backend: NormalBackend, reps: int = 5, seed: int = 0) -> float:
    """Median wall time of one ``Re N`` application on a random image."""
    u = np.random.default_rng(seed).standard_normal((backend.n, backend.n))
    backend.apply_real(u)
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        backend.apply_real(u)
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def _write_csv(path: Path, rows: list) -> None:
    if not rows:
        return
    keys = list(dict.fromkeys(k for row in rows for k in row))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if row.get(k) is None else row.get(k) for k in keys})


def _bench_row(cfg: RunConfig, out: Path, per_app: bool) -> dict:
    try:
        result = run_once(cfg, out / "traces" / f"{cfg.backend}_n{cfg.n}_{cfg.preset}_d{cfg.d}_r{cfg.r}.csv")
        row = result["row"]
        if per_app:
            geometry = make_geometry(cfg.n, cfg.d, cfg.preset)
            row["per_application_s"] = time_application(backend_for(cfg, geometry), seed=cfg.seed)
        row["status"] = "ok"
    except (ArithmeticError, MemoryCapError, ValueError) as exc:
        log.error("%s n=%d %s failed: %s", cfg.backend, cfg.n, cfg.preset, exc)
        row = {"config_hash": cfg.digest(), **{k: v for k, v in asdict(cfg).items() if k not in ("cache_dir", "out")},
               "status": f"failed: {exc}"}
    return row


def cmd_bench(cfg: RunConfig, suite: str, scale: str) -> list:
    """Run a benchmark suite; returns the rows (each carries a ``status``)."""
    out = Path(cfg.out)
    sizes = (64, 128) if scale == "desk" else (128, 256, 512)
    rows_12, rows_345 = [], []
    if suite in ("table1", "table2", "all"):
        for n in sizes:
            for preset in nufft.PRESETS:
                for backend in BACKENDS:
                    run = replace(cfg, n=n, preset=preset, backend=backend, r=1, d=1, tol=0.0)
                    rows_12.append(_bench_row(run, out, per_app=suite != "table2"))
        cols1 = ("config_hash", "n", "preset", "backend", "r", "iterations", "total_s", "cg_s",
                 "per_application_s", "status")
        cols2 = ("config_hash", "n", "preset", "backend", "r", "iterations", "final_rel_l1", "status")
        if suite in ("table1", "all"):
            _write_csv(out / "table1.csv", [{k: r.get(k) for k in cols1} for r in rows_12])
        if suite in ("table2", "all"):
            _write_csv(out / "table2.csv", [{k: r.get(k) for k in cols2} for r in rows_12])
    if suite in ("tables345", "all"):
        n = sizes[-1] if scale == "paper" else sizes[0]
        for d in (1, 2, 4):
            for backend, r in (("fused", 1), ("surrogate", 3)):
                run = replace(cfg, n=n, d=d, backend=backend, r=r)
                rows_345.append(_bench_row(run, out, per_app=False))
        threshold_rows = []
        for row in rows_345:
            for thr in THRESHOLDS:
                threshold_rows.append({"config_hash": row["config_hash"], "n": row["n"], "d": row["d"],
                                       "backend": row["backend"], "threshold": thr,
                                       "iterations": row.get(f"iters_{thr:g}"),
                                       "seconds": row.get(f"secs_{thr:g}"),
                                       "final_rel_l1": row.get("final_rel_l1"), "status": row["status"]})
        _write_csv(out / "tables345.csv", threshold_rows)
    rows = rows_12 + rows_345
    _write_csv(out / "bench_runs.csv", rows)
    return rows


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file (flags override it)")
    common.add_argument("--n", type=int)
    common.add_argument("--d", type=int)
    common.add_argument("--preset", choices=sorted(nufft.PRESETS))
    common.add_argument("--backend", choices=BACKENDS)
    common.add_argument("--r", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--iters", type=int)
    common.add_argument("--cg-steps", dest="cg_steps", type=int)
    common.add_argument("--tol", type=float)
    common.add_argument("--noise", type=float)
    common.add_argument("--feedback", type=int, choices=(0, 1), help="add the data residual back each iteration")
    common.add_argument("--stencil-norm", dest="stencil_norm", choices=("chebyshev", "euclidean"))
    common.add_argument("--stencil-scale", dest="stencil_scale", choices=("dc", "raw"))
    common.add_argument("--cache-dir", dest="cache_dir")
    common.add_argument("--out")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tomo", description="Fourier-domain TV tomography toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="write the Shepp-Logan phantom")
    sub.add_parser("precompute", parents=[common], help="build and cache sparse operators")
    sub.add_parser("reconstruct", parents=[common], help="reconstruct the phantom from synthetic data")
    bench = sub.add_parser("bench", parents=[common], help="run a benchmark suite")
    bench.add_argument("suite", choices=("table1", "table2", "tables345", "all"))
    bench.add_argument("--scale", choices=("desk", "paper"), default="desk")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "phantom":
            cmd_phantom(cfg)
        elif args.command == "precompute":
            cmd_precompute(cfg)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg)
        else:
            rows = cmd_bench(cfg, args.suite, args.scale)
            if any(row["status"] != "ok" for row in rows):
                return EXIT_NUMERIC
    except (ConfigError, MemoryCapError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (CGDivergenceError, FloatingPointError, ArithmeticError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (OSError, SparseFormatError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
