"""Command-line experiment runner.

Subcommands: ``capacity``, ``dirichlet``, ``study``, ``spectrum`` and
``converge``.  Every run writes one JSON report (``schema_version`` 1) to
``--out`` or stdout.  With ``--csv``, each table also goes to a sibling CSV
file.  Wall-clock timings go to a separate ``*.timings.json`` sidecar, so the
report itself is byte-identical across repeated runs.

Exit status: 0 when every verdict passes, 1 when any verdict fails or a
solver error occurs, 2 on configuration errors (nothing is solved).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import CapsenseError, ConfigurationError
from .geometry import MIN_RESOLUTION, Profile, build_quadrature, make_surface
from .oracle import ellipsoid_capacity, sphere_capacity, sphere_np_eigenvalue
from .sensitivity import DEFAULT_EPS, STUDY_KINDS, np_spectrum_check, run_expansion_study, spectrum_verdict
from .solver import FAR_FIELD_DIRECTIONS, far_field_coefficient, solve_equilibrium, solve_exterior_dirichlet

__all__ = ["ExperimentConfig", "RunReport", "run", "effective_threads", "emit_csv", "convergence_study", "main", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1
COMMANDS = ("capacity", "dirichlet", "study", "spectrum", "converge")
TABLE_COLUMNS = {
    "convergence": ("resolution", "capacity", "rel_error"),
    "study": ("eps", "predicted", "truth", "residual"),
}
# rough peak count of dense N x N float64 arrays alive at once, per command
DENSE_MATRICES = {"capacity": 2, "converge": 2, "dirichlet": 4, "spectrum": 4, "study": 6}
log = logging.getLogger("capsense")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Validated run configuration."""

    command: str
    shape: str = "sphere:1"
    h: str | None = None
    eps: list = field(default_factory=lambda: list(DEFAULT_EPS))
    resolution: list = field(default_factory=lambda: [64])
    radius: float | None = None
    out: str | None = None
    threads: int = 1
    csv: bool = False
    kind: str | None = None
    count: int = 10
    tolerance: float | None = None

    def surface(self):
        return parse_shape(self.shape)

    def profile(self) -> Profile:
        return Profile.parse(self.h)

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("out")
        d.pop("csv")
        return d


def parse_shape(text: str):
    """``name:p1,p2,...``; ``ellipsoid-curvature:a,b,c`` selects the
    lines-of-curvature chart."""
    name, _, arg = str(text).partition(":")
    try:
        vals = [float(v) for v in arg.split(",")] if arg else []
    except ValueError as exc:
        raise ConfigurationError(f"bad shape parameters in {text!r}") from exc
    if name == "ellipsoid-curvature":
        return make_surface("ellipsoid", *vals, chart="curvature")
    return make_surface(name.strip(), *vals)


def _floats(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    if isinstance(text, (int, float)):
        return [float(text)]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"could not parse number list {text!r}") from exc


def _ints(text) -> list:
    vals = _floats(text)
    if any(not math.isfinite(v) or v != int(v) for v in vals):
        raise ConfigurationError("resolutions must be integers")
    return [int(v) for v in vals]


def _available_memory() -> float:
    """Bytes of memory available to this process (inf when unknown)."""
    try:
        with open("/proc/meminfo", encoding="ascii") as fh:
            for line in fh:
                if line.startswith("MemAvailable:"):
                    return float(line.split()[1]) * 1024.0
    except OSError:
        pass
    try:
        return float(os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE"))
    except (ValueError, OSError, AttributeError):  # pragma: no cover - non-POSIX
        return math.inf


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every field before any solve starts (raises ConfigurationError)."""
    if cfg.command not in COMMANDS:
        raise ConfigurationError(f"unknown command {cfg.command!r}")
    surf = cfg.surface()
    if not cfg.resolution:
        raise ConfigurationError("at least one resolution is required")
    for n in cfg.resolution:
        if n < MIN_RESOLUTION or n % 2:
            raise ConfigurationError(f"resolution {n} must be an even integer >= {MIN_RESOLUTION}")
    nodes = len(surf.charts) * max(cfg.resolution) ** 2
    need = DENSE_MATRICES.get(cfg.command, 2) * 8.0 * nodes**2
    avail = _available_memory()
    if need > avail:
        raise ConfigurationError(
            f"resolution {max(cfg.resolution)} gives {nodes} nodes and needs about {need / 2**30:.1f} GiB "
            f"of memory for dense matrices; only {avail / 2**30:.1f} GiB is available"
        )
    if cfg.command == "converge" and len(cfg.resolution) < 3:
        raise ConfigurationError("a convergence study needs at least three resolutions")
    if not cfg.eps or any(not (math.isfinite(e) and e > 0) for e in cfg.eps):
        raise ConfigurationError("eps values must be positive and finite")
    if cfg.radius is not None and not (math.isfinite(cfg.radius) and cfg.radius > 0):
        raise ConfigurationError("radius must be positive")
    if int(cfg.threads) != cfg.threads or cfg.threads < 1:
        raise ConfigurationError("threads must be a positive integer")
    if int(cfg.count) != cfg.count or cfg.count < 1:
        raise ConfigurationError("count must be a positive integer")
    if cfg.tolerance is not None and not (math.isfinite(cfg.tolerance) and cfg.tolerance > 0):
        raise ConfigurationError("tolerance must be positive")
    if cfg.command == "study":
        if cfg.kind not in STUDY_KINDS:
            raise ConfigurationError(f"--kind must be one of {', '.join(STUDY_KINDS)}")
        if cfg.h is None:
            raise ConfigurationError("a study needs --h")
    if cfg.command == "dirichlet" and cfg.h is None:
        raise ConfigurationError("dirichlet needs boundary data via --h")
    if cfg.h is not None:
        cfg.profile()
    if cfg.out is not None:
        parent = Path(cfg.out).resolve().parent
        if not parent.is_dir() or not os.access(parent, os.W_OK):
            raise ConfigurationError(f"cannot write to {cfg.out!r}")
        if Path(cfg.out).is_dir():
            raise ConfigurationError(f"{cfg.out!r} is a directory")
    return cfg


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


@dataclass
class RunReport:
    """Structured result of one run.

    JSON layout (schema_version 1): ``command``, ``config`` (echo, without
    output options), ``results`` (named scalars and lists), ``tables``
    (name -> ``{"columns": [...], "rows": [[...]]}``), ``slopes``,
    ``verdicts`` (name -> ``pass``/``fail``/``floor-limited``/``n/a``),
    ``status``, ``error`` and ``version``.
    """

    command: str
    config: dict
    results: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    error: str | None = None
    version: str = f"capsense {__version__}"

    @property
    def status(self) -> str:
        if self.error is not None or any(v == "fail" for v in self.verdicts.values()):
            return "fail"
        return "pass"

    def add_table(self, name: str, columns: Sequence[str], rows):
        self.tables[name] = {"columns": list(columns), "rows": [list(r) for r in rows]}

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "schema_version": SCHEMA_VERSION,
                "command": self.command,
                "config": self.config,
                "results": self.results,
                "tables": self.tables,
                "slopes": self.slopes,
                "verdicts": self.verdicts,
                "status": self.status,
                "error": self.error,
                "version": self.version,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def emit_csv(report: RunReport, path: str | os.PathLike) -> list:
    """Write one CSV per table next to ``path`` (``<stem>.<table>.csv``).

    Tables without rows are skipped with a warning.  Returns written paths.
    """
    base = Path(path)
    stem = base.with_suffix("") if base.suffix else base
    written = []
    for name, tab in report.tables.items():
        if not tab["rows"]:
            log.warning("table %r is empty; no CSV written", name)
            continue
        target = Path(f"{stem}.{name}.csv")
        with open(target, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
            w.writerow(tab["columns"])
            for row in tab["rows"]:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        written.append(str(target))
    return written


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _reference_capacity(surface) -> float | None:
    if surface.base is not None:
        return None
    if surface.name == "sphere":
        return sphere_capacity(surface.params[0])
    if surface.name == "ellipsoid":
        return ellipsoid_capacity(*surface.params[:3])
    return None


def _cmd_capacity(cfg: ExperimentConfig, rep: RunReport):
    surf = cfg.surface()
    q = build_quadrature(surf, cfg.resolution[0])
    eq = solve_equilibrium(q)
    radius = cfg.radius or 100.0 * q.circumradius
    ff = far_field_coefficient(eq, radius)
    rep.results.update(
        capacity=eq.capacity,
        condition_estimate=eq.condition,
        farfield_coefficient=ff,
        farfield_radius=radius,
        area=q.area,
        nodes=q.size,
    )
    ref = _reference_capacity(surf)
    gap = abs(ff - eq.capacity) / eq.capacity
    rep.verdicts["farfield_consistency"] = "pass" if gap <= 3.0 / radius else "fail"
    if ref is not None:
        rel = abs(eq.capacity - ref) / ref
        tol = cfg.tolerance or (0.005 if surf.name == "sphere" else 0.01)
        rep.results.update(reference_capacity=ref, rel_error=rel, tolerance=tol)
        rep.verdicts["capacity"] = "pass" if rel <= tol else "fail"
    else:
        rep.verdicts["capacity"] = "n/a"


def _sphere_harmonic_extension(surf, profile: Profile, x):
    """Exterior extension of sphere data made of a constant, linear and
    spherical-harmonic terms; None when no closed form applies."""
    if surf.name != "sphere" or surf.base is not None or profile.vector[29] != 0.0:
        return None
    R = surf.params[0]
    v = profile.vector
    r = np.linalg.norm(x, axis=1)
    u = x / r[:, None]
    from .geometry import SH_INDEX, real_sph_harm

    out = v[0] * R / r + R * (u @ v[1:4]) * (R / r) ** 2
    for i, (l, m) in enumerate(SH_INDEX):
        if v[4 + i]:
            out = out + v[4 + i] * (R / r) ** (l + 1) * real_sph_harm(l, m, u)
    return out


def _cmd_dirichlet(cfg: ExperimentConfig, rep: RunReport):
    surf = cfg.surface()
    prof = cfg.profile()
    q = build_quadrature(surf, cfg.resolution[0])
    f = prof(q.points)
    sol = solve_exterior_dirichlet(q, f)
    radius = cfg.radius or 5.0 * q.circumradius
    pts = radius * FAR_FIELD_DIRECTIONS
    w = np.asarray(sol.potential(pts))
    rep.results.update(
        density_norm=q.norm(sol.density),
        sample_radius=radius,
        potential_samples=w,
        condition_estimate=sol.condition,
        nodes=q.size,
    )
    exact = _sphere_harmonic_extension(surf, prof, pts)
    if exact is None:
        rep.verdicts["dirichlet"] = "n/a"
        return
    scale = max(float(np.max(np.abs(exact))), 1e-300)
    err = float(np.max(np.abs(w - exact))) / scale
    tol = cfg.tolerance or 0.01
    rep.results.update(reference_samples=exact, rel_error=err, tolerance=tol)
    rep.verdicts["dirichlet"] = "pass" if err <= tol else "fail"


def _cmd_study(cfg: ExperimentConfig, rep: RunReport):
    kw = {}
    if cfg.tolerance is not None:
        kw["order_tolerance"] = cfg.tolerance
    report = run_expansion_study(
        cfg.kind, cfg.surface(), cfg.profile(), cfg.eps, cfg.resolution[0], radius=cfg.radius, **kw
    )
    cols, rows = report.table
    rep.add_table("study", cols, rows)
    d = report.to_dict()
    rep.results.update({k: d[k] for k in ("floor", "used_in_fit", "intercept", "expected_order", "order_tolerance", "extra")})
    rep.slopes[cfg.kind] = report.slope
    rep.verdicts[cfg.kind] = report.verdict


def _cmd_spectrum(cfg: ExperimentConfig, rep: RunReport):
    surf = cfg.surface()
    q = build_quadrature(surf, cfg.resolution[0])
    vals = np_spectrum_check(q, cfg.count)
    tol = cfg.tolerance or 1e-3
    sv = spectrum_verdict(vals, tol)
    rep.results.update(eigenvalues=vals, **sv)
    rep.verdicts["top_eigenvalue"] = "pass" if sv["top_ok"] else "fail"
    rep.verdicts["interior"] = "pass" if sv["interior_ok"] else "fail"
    if surf.name == "sphere" and surf.base is None:
        ref = [sphere_np_eigenvalue(l) for l in range(10) for _ in range(2 * l + 1)][: len(vals)]
        err = float(np.max(np.abs(np.asarray(ref) - vals)))
        rep.results.update(reference=ref, max_abs_error=err)
        rep.verdicts["sphere_spectrum"] = "pass" if err <= tol else "fail"


def convergence_study(shape, resolutions: Sequence[int], tolerance: float | None = None) -> RunReport:
    """Capacity at several resolutions with an observed convergence rate.

    Errors are measured against the analytic capacity when one exists
    (sphere, ellipsoid), otherwise against the finest resolution.  The rate
    is minus the least-squares slope of ``log(error)`` against ``log(n)``.
    """
    res = sorted(int(n) for n in resolutions)
    if len(res) < 3:
        raise ConfigurationError("a convergence study needs at least three resolutions")
    surf = parse_shape(shape) if isinstance(shape, str) else shape
    rep = RunReport("converge", {"shape": shape if isinstance(shape, str) else surf.name, "resolution": res})
    caps = []
    for n in res:
        q = build_quadrature(surf, n)
        caps.append(solve_equilibrium(q).capacity)
        q._cache.clear()
    ref = _reference_capacity(surf)
    if ref is not None:
        errs = [abs(c - ref) / ref for c in caps]
        ns, es = res, errs
    else:
        errs = [abs(c - caps[-1]) / abs(caps[-1]) for c in caps]
        ns, es = res[:-1], errs[:-1]
    rep.add_table("convergence", TABLE_COLUMNS["convergence"], zip(res, caps, errs))
    pos = [(n, e) for n, e in zip(ns, es) if e > 0]
    rate = -float(np.polyfit(np.log([p[0] for p in pos]), np.log([p[1] for p in pos]), 1)[0]) if len(pos) >= 2 else math.nan
    decreasing = all(b < a for a, b in zip(es, es[1:]))
    rep.results.update(capacities=caps, rel_errors=errs, reference_capacity=ref, rate=rate)
    rep.slopes["rate"] = rate
    min_rate = tolerance or 1.0
    rep.verdicts["convergence"] = "pass" if decreasing and (rate >= min_rate) else "fail"
    return rep


def effective_threads(requested: int) -> int:
    """BLAS thread count actually used: the request capped at the usable cores.

    OpenBLAS can crash when asked for more threads than it initialised with,
    so oversubscription is refused rather than passed through.
    """
    try:
        cores = len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        cores = os.cpu_count() or 1
    if requested > cores:
        log.warning("requested %d threads but only %d cores are usable; using %d", requested, cores, cores)
    return max(1, min(int(requested), cores))


def run(cfg: ExperimentConfig) -> RunReport:
    """Execute a validated configuration and return its report."""
    validate(cfg)
    t0 = time.perf_counter()
    with threadpool_limits(limits=effective_threads(cfg.threads)):
        if cfg.command == "converge":
            rep = RunReport("converge", cfg.echo())
            try:
                sub = convergence_study(cfg.shape, cfg.resolution, cfg.tolerance)
                rep.results, rep.tables, rep.slopes, rep.verdicts = sub.results, sub.tables, sub.slopes, sub.verdicts
            except ConfigurationError:
                raise
            except CapsenseError as exc:
                rep.error = f"{type(exc).__name__}: {exc}"
        else:
            rep = RunReport(cfg.command, cfg.echo())
            handler = {
                "capacity": _cmd_capacity,
                "dirichlet": _cmd_dirichlet,
                "study": _cmd_study,
                "spectrum": _cmd_spectrum,
            }[cfg.command]
            try:
                handler(cfg, rep)
            except ConfigurationError:
                raise
            except CapsenseError as exc:
                rep.error = f"{type(exc).__name__}: {exc}"
    rep.timings["total_seconds"] = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default values for any flag")
    common.add_argument("--shape", help="shape, e.g. sphere:1 or ellipsoid:2,1,0.5")
    common.add_argument("--h", help="perturbation profile or boundary data, e.g. Y20, const:1, z")
    common.add_argument("--eps", help="comma-separated eps values")
    common.add_argument("--resolution", help="nodes per chart direction, comma-separated list")
    common.add_argument("--radius", type=float, help="far-field or sampling radius")
    common.add_argument("--out", help="JSON report path (default stdout)")
    common.add_argument("--threads", type=int, help="BLAS thread count (default $CAPSENSE_THREADS or 1)")
    common.add_argument("--csv", action="store_true", default=None, help="also write tables as CSV files")
    common.add_argument("--tolerance", type=float, help="override the command's pass tolerance")
    p = argparse.ArgumentParser(prog="capsense", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"capsense {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("capacity", parents=[common], help="equilibrium density and capacity")
    sub.add_parser("dirichlet", parents=[common], help="exterior Dirichlet problem with --h as data")
    s = sub.add_parser("study", parents=[common], help="eps-sweep validation of an expansion")
    s.add_argument("--kind", help="|".join(STUDY_KINDS))
    sp = sub.add_parser("spectrum", parents=[common], help="top eigenvalues of K*")
    sp.add_argument("--count", type=int, help="number of eigenvalues (default 10)")
    sub.add_parser("converge", parents=[common], help="capacity convergence over resolutions")
    return p


def config_from_args(ns: argparse.Namespace) -> ExperimentConfig:
    """Merge the optional config file with command-line flags (flags win)."""
    values: dict = {}
    if ns.config:
        try:
            with open(ns.config, encoding="utf-8") as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config file {ns.config!r}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigurationError("config file must hold a JSON object")
    for key in ("shape", "h", "eps", "resolution", "radius", "out", "threads", "csv", "tolerance", "kind", "count"):
        v = getattr(ns, key, None)
        if v is not None:
            values[key] = v
    unknown = set(values) - {f for f in ExperimentConfig.__dataclass_fields__} - {"command"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    values.pop("command", None)
    if "eps" in values:
        values["eps"] = _floats(values["eps"])
    if "resolution" in values:
        values["resolution"] = _ints(values["resolution"])
    if "threads" not in values:
        env = os.environ.get("CAPSENSE_THREADS")
        if env:
            try:
                values["threads"] = int(env)
            except ValueError as exc:
                raise ConfigurationError("CAPSENSE_THREADS must be an integer") from exc
    for key, typ in (("radius", float), ("tolerance", float), ("threads", int), ("count", int)):
        if values.get(key) is not None:
            try:
                values[key] = typ(values[key])
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"bad value for {key}") from exc
    if "h" in values and values["h"] is not None:
        values["h"] = str(values["h"])
    return ExperimentConfig(command=ns.command, **values)


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = _parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = validate(config_from_args(ns))
        rep = run(cfg)
    except ConfigurationError as exc:
        print(f"capsense: configuration error: {exc}", file=sys.stderr)
        return 2
    text = rep.to_json()
    if cfg.out:
        Path(cfg.out).write_text(text, encoding="utf-8")
        Path(f"{cfg.out}.timings.json").write_text(json.dumps(rep.timings, indent=2) + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text)
    if cfg.csv:
        emit_csv(rep, cfg.out or f"capsense-{cfg.command}")
    return 0 if rep.status == "pass" else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
