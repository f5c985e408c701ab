"""Command-line front end: presets, sweeps, and artifact emission.

Four presets cover the standard experiments: a single transport trajectory
(``single-run``), the time-rescaling collapse across Coulomb strengths
(``rescaling-collapse``), the peak-occupancy sweep over particle number
(``occupancy-saturation``), and the plateau-lag analysis with the saturation
fit plus physical-unit conversions (``lag-analysis``).

Every run emits one CSV per (U, N_tot) cell, a versioned summary JSON
("klsim-summary/1"), a gnuplot script, and a canonical resolved copy of the
configuration.  All summary values are recomputed from the CSV files alone,
so ``analyze`` on an output directory reproduces the summary byte for byte.
Identical configurations produce byte-identical CSV/JSON artifacts.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import analysis, evolution
from .errors import ConfigError, IntegrationError, NoCrossingError
from .evolution import BACKENDS, EvolutionConfig, build_lindblad_ops, initial_state, propagate
from .operators import ModelParams

CSV_SCHEMA = "klsim-csv/1"
SUMMARY_SCHEMA = "klsim-summary/1"
PRESETS = ("single-run", "rescaling-collapse", "occupancy-saturation", "lag-analysis")

SUMMARY_FILE = "summary.json"
PLOT_FILE = "plot.gp"
RESOLVED_FILE = "config.resolved.cfg"
DIAGNOSTICS_FILE = "diagnostics.json"

# Early-stop rules for chunked continuation (dimensionless n_SF units).
PEAK_DROP_TOL = 1e-3       # stop once the running max exceeds the chunk max by this
PLATEAU_TOL = 1e-3         # ... or the chunk is flat to within this
CROSSING_STOP_LEVEL = 0.7  # lag runs stop once n_SF ends a chunk below this
CROSSING_PEAK_GUARD = 0.95 # ... provided the chunk stayed clear of the level

# Krylov backend is the default; small stiff sectors go dense instead.
AUTO_DENSE_U = 300.0

# (tau cap, chunk span, stop rule); None tau/chunk entries resolved from here.
_PRESET_WINDOWS = {
    "single-run": (50.0, 25.0, "none"),
    "rescaling-collapse": (50.0, 25.0, "none"),
    "occupancy-saturation": (60.0, 2.5, "peak"),
    "lag-analysis": (900.0, 12.5, "crossing"),
}
_PRESET_AXES = {
    "rescaling-collapse": ((10.0, 100.0, 1000.0), None),
    "occupancy-saturation": ((10.0, 100.0), tuple(range(2, 10))),
    "lag-analysis": ((10.0,), tuple(range(9, 15))),
}


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description (see validate_config)."""

    preset: str = "single-run"
    n_sites: int = 5
    n_tot: int = 2
    u: float = 100.0
    hbar: float = 1.0
    c_hop: float = 1.0
    gamma_s: float = 0.01
    gamma_d: float = 0.01
    gamma_matched: bool = True
    backend: str = "auto"
    rel_tol: float = 1e-9
    abs_tol: float = 1e-12
    krylov_dim: int = 30
    dense_cap: int = evolution.DENSE_DIM_CAP
    tau_max: float = 50.0
    tau_step: float = 0.25
    chunk_tau: float = 25.0
    u_list: tuple = ()
    ntot_list: tuple = ()
    out_dir: str = "runs"
    seed: int | None = None
    threads: int | None = None
    phys_u: float = 1e3
    phys_rate: float = 1e13
    fixture_delta_tau: tuple = ()
    fixture_noise: float = 0.0

    def cells(self) -> list:
        return [(u, n) for u in self.u_list for n in self.ntot_list]


def _parse_float(text, key, line, col):
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"invalid number for {key}: {text!r}",
                          line=line, column=col, field=key) from None
    if not math.isfinite(value):
        raise ConfigError(f"{key} must be finite, got {text!r}",
                          line=line, column=col, field=key)
    return value


def _parse_int(text, key, line, col):
    try:
        return int(text, 10)
    except ValueError:
        raise ConfigError(f"invalid integer for {key}: {text!r}",
                          line=line, column=col, field=key) from None


def _parse_float_list(text, key, line, col):
    items = [tok.strip() for tok in text.split(",")]
    return tuple(_parse_float(tok, key, line, col) for tok in items if tok)


def _parse_int_list(text, key, line, col):
    items = [tok.strip() for tok in text.split(",")]
    return tuple(_parse_int(tok, key, line, col) for tok in items if tok)


def _parse_pairs(text, key, line, col):
    pairs = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        left, sep, right = tok.partition(":")
        if not sep:
            raise ConfigError(f"{key} entries must look like N:value, got {tok!r}",
                              line=line, column=col, field=key)
        pairs.append((_parse_int(left.strip(), key, line, col),
                      _parse_float(right.strip(), key, line, col)))
    return tuple(pairs)


def _parse_str(text, key, line, col):
    return text


# canonical key -> parser for the flat key-value format
_KEY_PARSERS = {
    "preset": _parse_str,
    "n_sites": _parse_int,
    "n_tot": _parse_int,
    "u": _parse_float,
    "hbar": _parse_float,
    "c_hop": _parse_float,
    "gamma_s": _parse_float,
    "gamma_d": _parse_float,
    "backend": _parse_str,
    "rel_tol": _parse_float,
    "abs_tol": _parse_float,
    "krylov_dim": _parse_int,
    "dense_cap": _parse_int,
    "tau_max": _parse_float,
    "tau_step": _parse_float,
    "chunk_tau": _parse_float,
    "u_list": _parse_float_list,
    "ntot_list": _parse_int_list,
    "out_dir": _parse_str,
    "seed": _parse_int,
    "threads": _parse_int,
    "phys_u": _parse_float,
    "phys_rate": _parse_float,
    "fixture_delta_tau": _parse_pairs,
    "fixture_noise": _parse_float,
}

_ALIASES = {"N_tot": "n_tot", "ntot": "n_tot", "U": "u", "N_sites": "n_sites", "nsites": "n_sites"}
# inside a [sweep] section the bare axis names mean the sweep lists
_SWEEP_KEYS = {"u": "u_list", "ntot": "ntot_list", "n_tot": "ntot_list",
               "u_list": "u_list", "ntot_list": "ntot_list"}
_SECTIONS = ("model", "evolution", "sweep", "physical", "output")


def _parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; optional [model]/[evolution]/[sweep]/...
    section headers group keys, and inside [sweep] the bare names ``u`` and
    ``ntot`` denote the sweep axes.  Returns {key: (raw value, line, column)}.
    """
    entries = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        stripped = line.strip()
        indent = line.index(stripped[0]) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError("unterminated section header",
                                  line=lineno, column=indent)
            section = stripped[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise ConfigError(
                    f"unknown section [{section}]; expected one of "
                    + ", ".join(f"[{s}]" for s in _SECTIONS),
                    line=lineno, column=indent)
            continue
        key_part, sep, val_part = line.partition("=")
        if not sep:
            raise ConfigError("expected 'key = value'", line=lineno, column=indent)
        key = key_part.strip()
        if not key:
            raise ConfigError("missing key before '='",
                              line=lineno, column=line.index("=") + 1)
        key_col = line.index(key) + 1
        value = val_part.strip()
        val_col = (line.index(val_part) + (len(val_part) - len(val_part.lstrip())) + 1
                   if val_part.strip() else len(line.rstrip()) + 1)
        canonical = _ALIASES.get(key, key)
        if section == "sweep":
            canonical = _SWEEP_KEYS.get(canonical, canonical)
        if canonical not in _KEY_PARSERS:
            raise ConfigError(
                f"unknown key {key!r}; valid keys: " + ", ".join(sorted(_KEY_PARSERS)),
                line=lineno, column=key_col, field=key)
        if canonical in entries:
            raise ConfigError(f"duplicate key {key!r}", line=lineno,
                              column=key_col, field=canonical)
        entries[canonical] = (value, lineno, val_col, key_col)
    return entries


def _coerce(key, value, line=None, col=None):
    """Coerce an already-typed override (CLI flag / dict input) or parse text."""
    if isinstance(value, str):
        return _KEY_PARSERS[key](value, key, line, col)
    if key in ("u_list",):
        return tuple(float(v) for v in value)
    if key in ("ntot_list",):
        return tuple(int(v) for v in value)
    if key == "fixture_delta_tau":
        return tuple((int(n), float(v)) for n, v in value)
    if _KEY_PARSERS[key] is _parse_int:
        if isinstance(value, bool) or int(value) != value:
            raise ConfigError(f"{key} must be an integer, got {value!r}", field=key)
        return int(value)
    if _KEY_PARSERS[key] is _parse_float:
        return float(value)
    return value


def _require(cond, message, field):
    if not cond:
        raise ConfigError(message, field=field)


def validate_config(raw) -> ExperimentConfig:
    """Parse and validate a configuration, applying preset defaults.

    ``raw`` is either the documented key-value text or a mapping of canonical
    keys to values.  Unknown keys are rejected with the list of valid keys;
    range violations name the offending field.  Supply/leak rates default to
    the matched point gamma_s = gamma_d = c_eff unless either is overridden.
    """
    if isinstance(raw, str):
        entries = _parse_config_text(raw)
        kw = {k: _KEY_PARSERS[k](v, k, line, col)
              for k, (v, line, col, _kc) in entries.items()}
    else:
        kw = {}
        for key, value in dict(raw).items():
            canonical = _ALIASES.get(key, key)
            if canonical not in _KEY_PARSERS:
                raise ConfigError(
                    f"unknown key {key!r}; valid keys: " + ", ".join(sorted(_KEY_PARSERS)),
                    field=key)
            kw[canonical] = _coerce(canonical, value)

    preset = kw.get("preset", "single-run")
    _require(preset in PRESETS,
             f"preset must be one of {', '.join(PRESETS)}; got {preset!r}", "preset")

    backend = kw.get("backend", "auto")
    _require(backend in ("auto",) + BACKENDS,
             f"backend must be one of auto, {', '.join(BACKENDS)}; got {backend!r}",
             "backend")

    n_sites = kw.get("n_sites", 5)
    n_tot = kw.get("n_tot", 2)
    u = kw.get("u", 100.0)
    hbar = kw.get("hbar", 1.0)
    c_hop = kw.get("c_hop", 1.0)
    _require(n_sites >= 1, f"n_sites must be >= 1, got {n_sites}", "n_sites")
    _require(n_tot >= 1, f"n_tot must be >= 1, got {n_tot}", "n_tot")
    _require(u > 0, f"u must be > 0, got {u:g}", "u")
    _require(hbar > 0, f"hbar must be > 0, got {hbar:g}", "hbar")
    _require(c_hop > 0, f"c_hop must be > 0, got {c_hop:g}", "c_hop")

    c_eff = hbar * c_hop * c_hop / u
    gamma_matched = "gamma_s" not in kw and "gamma_d" not in kw
    gamma_s = kw.get("gamma_s", c_eff)
    gamma_d = kw.get("gamma_d", c_eff)
    _require(gamma_s >= 0, f"gamma_s must be >= 0, got {gamma_s:g}", "gamma_s")
    _require(gamma_d >= 0, f"gamma_d must be >= 0, got {gamma_d:g}", "gamma_d")

    rel_tol = kw.get("rel_tol", 1e-9)
    abs_tol = kw.get("abs_tol", 1e-12)
    krylov_dim = kw.get("krylov_dim", 30)
    dense_cap = kw.get("dense_cap", evolution.DENSE_DIM_CAP)
    _require(0 < rel_tol < 1, f"rel_tol must be in (0, 1), got {rel_tol:g}", "rel_tol")
    _require(abs_tol > 0, f"abs_tol must be > 0, got {abs_tol:g}", "abs_tol")
    _require(krylov_dim >= 2, f"krylov_dim must be >= 2, got {krylov_dim}", "krylov_dim")
    _require(dense_cap >= 2, f"dense_cap must be >= 2, got {dense_cap}", "dense_cap")

    cap_default, chunk_default, _rule = _PRESET_WINDOWS[preset]
    tau_max = kw.get("tau_max", cap_default)
    chunk_tau = kw.get("chunk_tau", chunk_default)
    tau_step = kw.get("tau_step", 0.25)
    _require(tau_step > 0, f"tau_step must be > 0, got {tau_step:g}", "tau_step")
    _require(tau_max >= tau_step,
             f"tau_max must be >= tau_step, got {tau_max:g}", "tau_max")
    _require(chunk_tau >= tau_step,
             f"chunk_tau must be >= tau_step, got {chunk_tau:g}", "chunk_tau")

    axes_default = _PRESET_AXES.get(preset, (None, None))
    u_list = kw.get("u_list", axes_default[0] or (u,))
    ntot_list = kw.get("ntot_list", axes_default[1] or (n_tot,))
    _require(len(u_list) > 0, "sweep axis u_list must be nonempty", "u_list")
    _require(len(ntot_list) > 0, "sweep axis ntot_list must be nonempty", "ntot_list")
    for val in u_list:
        _require(val > 0, f"u_list entries must be > 0, got {val:g}", "u_list")
    for val in ntot_list:
        _require(val >= 1, f"ntot_list entries must be >= 1, got {val}", "ntot_list")
    _require(len(set(u_list)) == len(u_list), "u_list has duplicates", "u_list")
    _require(len(set(ntot_list)) == len(ntot_list), "ntot_list has duplicates",
             "ntot_list")

    seed = kw.get("seed")
    threads = kw.get("threads")
    if seed is not None:
        _require(seed >= 0, f"seed must be >= 0, got {seed}", "seed")
    if threads is not None:
        _require(threads >= 1, f"threads must be >= 1, got {threads}", "threads")

    phys_u = kw.get("phys_u", 1e3)
    phys_rate = kw.get("phys_rate", 1e13)
    _require(phys_u > 0, f"phys_u must be > 0, got {phys_u:g}", "phys_u")
    _require(phys_rate > 0, f"phys_rate must be > 0, got {phys_rate:g}", "phys_rate")

    fixture = tuple(sorted(kw.get("fixture_delta_tau", ())))
    seen = set()
    for n, val in fixture:
        _require(n >= 1, f"fixture_delta_tau N values must be >= 1, got {n}",
                 "fixture_delta_tau")
        _require(n not in seen, f"fixture_delta_tau repeats N_tot = {n}",
                 "fixture_delta_tau")
        seen.add(n)
    fixture_noise = kw.get("fixture_noise", 0.0)
    _require(fixture_noise >= 0,
             f"fixture_noise must be >= 0, got {fixture_noise:g}", "fixture_noise")
    if fixture_noise > 0:
        _require(seed is not None, "fixture_noise requires a seed", "seed")

    return ExperimentConfig(
        preset=preset, n_sites=n_sites, n_tot=n_tot, u=u, hbar=hbar, c_hop=c_hop,
        gamma_s=gamma_s, gamma_d=gamma_d, gamma_matched=gamma_matched,
        backend=backend, rel_tol=rel_tol, abs_tol=abs_tol, krylov_dim=krylov_dim,
        dense_cap=dense_cap, tau_max=tau_max, tau_step=tau_step, chunk_tau=chunk_tau,
        u_list=tuple(u_list), ntot_list=tuple(ntot_list),
        out_dir=kw.get("out_dir", "runs"), seed=seed, threads=threads,
        phys_u=phys_u, phys_rate=phys_rate,
        fixture_delta_tau=fixture, fixture_noise=fixture_noise)


def _fmt(value) -> str:
    return "%.17g" % float(value)


def resolved_config_text(cfg: ExperimentConfig) -> str:
    """Canonical key-value serialization; validate_config round-trips it."""
    lines = ["# resolved configuration (canonical form)"]
    items = {
        "preset": cfg.preset,
        "n_sites": str(cfg.n_sites),
        "n_tot": str(cfg.n_tot),
        "u": _fmt(cfg.u),
        "hbar": _fmt(cfg.hbar),
        "c_hop": _fmt(cfg.c_hop),
        "backend": cfg.backend,
        "rel_tol": _fmt(cfg.rel_tol),
        "abs_tol": _fmt(cfg.abs_tol),
        "krylov_dim": str(cfg.krylov_dim),
        "dense_cap": str(cfg.dense_cap),
        "tau_max": _fmt(cfg.tau_max),
        "tau_step": _fmt(cfg.tau_step),
        "chunk_tau": _fmt(cfg.chunk_tau),
        "u_list": ",".join(_fmt(v) for v in cfg.u_list),
        "ntot_list": ",".join(str(v) for v in cfg.ntot_list),
        "out_dir": cfg.out_dir,
        "phys_u": _fmt(cfg.phys_u),
        "phys_rate": _fmt(cfg.phys_rate),
    }
    if not cfg.gamma_matched:
        items["gamma_s"] = _fmt(cfg.gamma_s)
        items["gamma_d"] = _fmt(cfg.gamma_d)
    if cfg.seed is not None:
        items["seed"] = str(cfg.seed)
    if cfg.threads is not None:
        items["threads"] = str(cfg.threads)
    if cfg.fixture_delta_tau:
        items["fixture_delta_tau"] = ",".join(
            f"{n}:{_fmt(v)}" for n, v in cfg.fixture_delta_tau)
        items["fixture_noise"] = _fmt(cfg.fixture_noise)
    lines.extend(f"{key} = {items[key]}" for key in sorted(items))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# cell integration


def _cell_params(cfg: ExperimentConfig, u: float, n_tot: int) -> ModelParams:
    if cfg.gamma_matched:
        return ModelParams.matched_rates(n_tot=n_tot, u=u, n_sites=cfg.n_sites,
                                         hbar=cfg.hbar, c_hop=cfg.c_hop)
    return ModelParams(n_tot=n_tot, u=u, n_sites=cfg.n_sites, hbar=cfg.hbar,
                       c_hop=cfg.c_hop, gamma_s=cfg.gamma_s, gamma_d=cfg.gamma_d)


def _resolve_backend(cfg: ExperimentConfig, u: float, dim: int) -> str:
    if cfg.backend != "auto":
        return cfg.backend
    if u >= AUTO_DENSE_U and dim <= cfg.dense_cap:
        return "dense-exponential"
    return "krylov-exponential"


def run_cell(cfg: ExperimentConfig, u: float, n_tot: int, log=None):
    """Integrate one (U, N_tot) cell with chunked continuation.

    The trajectory is advanced chunk by chunk, reusing the final state of the
    previous chunk; a preset-specific rule stops early once the running
    maximum of n_SF is safely past (peak presets) or the occupancy has fallen
    well below the crossing level (lag preset).  Returns (params, backend,
    rows, diagnostics) with rows a list of per-sample observable vectors.
    """
    params = _cell_params(cfg, u, n_tot)
    ops = build_lindblad_ops(params)
    backend = _resolve_backend(cfg, u, ops.basis.dim)
    rule = _PRESET_WINDOWS[cfg.preset][2]
    c_eff = params.c_eff

    rho = initial_state(ops.basis)
    rows = []
    diag = {"chunks": 0, "steps_accepted": 0, "steps_rejected": 0, "matvecs": 0}
    tau0 = 0.0
    run_max = -math.inf
    while True:
        span = min(cfg.chunk_tau, cfg.tau_max - tau0)
        n_samp = max(1, int(round(span / cfg.tau_step)))
        grid_tau = np.linspace(0.0, span, n_samp + 1)
        if tau0 > 0.0:
            grid_tau = grid_tau[1:]
        evo = EvolutionConfig(t_max=span / c_eff, backend=backend,
                              rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol,
                              output_grid=grid_tau / c_eff,
                              krylov_dim=cfg.krylov_dim, dense_cap=cfg.dense_cap,
                              eigen_every=1)
        ts = propagate(rho, params, evo, ops=ops)
        t0 = tau0 / c_eff
        rows.extend(replace(o, t=o.t + t0, tau=o.tau + tau0) for o in ts.observables)
        diag["chunks"] += 1
        for key in ("steps_accepted", "steps_rejected", "matvecs"):
            diag[key] += int(ts.diagnostics.get(key, 0))
        chunk_n = ts.n_sf
        chunk_max = float(chunk_n.max())
        chunk_min = float(chunk_n.min())
        run_max = max(run_max, chunk_max)
        rho = ts.final_state
        tau0 += span
        if log is not None:
            log(f"    tau<={tau0:g} n_SF={chunk_n[-1]:.4f} (max {run_max:.4f})")
        if tau0 >= cfg.tau_max - 1e-9:
            break
        if rule == "peak" and (run_max - chunk_max > PEAK_DROP_TOL
                               or chunk_max - chunk_min < PLATEAU_TOL):
            break
        if rule == "crossing" and run_max > 1.0 \
                and chunk_n[-1] < CROSSING_STOP_LEVEL \
                and chunk_max < CROSSING_PEAK_GUARD:
            break
    return params, backend, rows, diag


# --------------------------------------------------------------------------
# artifacts


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def cell_csv_name(u: float, n_tot: int) -> str:
    return f"run_U{u:g}_N{n_tot:02d}.csv"


def _csv_columns(n_sites: int) -> list:
    return (["t", "tau", "n_source"]
            + [f"n_site_{j}" for j in range(1, n_sites + 1)]
            + ["n_SF", "n_drain", "trace_residual", "min_eigenvalue"])


def run_csv_text(cfg: ExperimentConfig, params: ModelParams, backend: str,
                 rows) -> str:
    cols = _csv_columns(params.n_sites)
    meta = (f"preset={cfg.preset} u={_fmt(params.u)} n_tot={params.n_tot} "
            f"n_sites={params.n_sites} hbar={_fmt(params.hbar)} "
            f"c_hop={_fmt(params.c_hop)} gamma_s={_fmt(params.gamma_s)} "
            f"gamma_d={_fmt(params.gamma_d)} backend={backend} "
            f"rel_tol={_fmt(cfg.rel_tol)} abs_tol={_fmt(cfg.abs_tol)} "
            f"krylov_dim={cfg.krylov_dim}")
    lines = [f"# {CSV_SCHEMA} " + " ".join(cols), f"# meta {meta}", ",".join(cols)]
    for o in rows:
        values = [o.t, o.tau, o.n_source, *o.site_populations, o.n_sf,
                  o.n_drain, o.trace_residual, o.min_eigenvalue]
        lines.append(",".join(_fmt(v) for v in values))
    return "\n".join(lines) + "\n"


def read_run_csv(path) -> tuple:
    """Return (meta dict, column names, data array) for one cell CSV."""
    with open(path, encoding="utf-8") as fh:
        schema_line = fh.readline().strip()
        meta_line = fh.readline().strip()
        header = fh.readline().strip()
        body = fh.read()
    if not schema_line.startswith(f"# {CSV_SCHEMA} "):
        raise ConfigError(f"{path} does not carry the {CSV_SCHEMA} schema line")
    if not meta_line.startswith("# meta "):
        raise ConfigError(f"{path} is missing the meta comment line")
    meta = {}
    for tok in meta_line[len("# meta "):].split():
        key, _, value = tok.partition("=")
        meta[key] = value
    cols = header.split(",")
    data = np.array([[float(v) for v in line.split(",")]
                     for line in body.splitlines() if line])
    return meta, cols, data


def _cell_record(meta, cols, data):
    """RunRecord plus named columns, rebuilt from parsed CSV content."""
    params = ModelParams(n_tot=int(meta["n_tot"]), u=float(meta["u"]),
                         n_sites=int(meta["n_sites"]), hbar=float(meta["hbar"]),
                         c_hop=float(meta["c_hop"]), gamma_s=float(meta["gamma_s"]),
                         gamma_d=float(meta["gamma_d"]))
    tau = data[:, cols.index("tau")]
    n_sf = data[:, cols.index("n_SF")]
    series = tuple(SimpleNamespace(tau=float(a), n_sf=float(b))
                   for a, b in zip(tau, n_sf))
    return analysis.RunRecord(params=params, series=series)


# --------------------------------------------------------------------------
# summary


def _json_text(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _cell_summary(u, n_tot, csv_name, record):
    try:
        tau_star = analysis.crossing_time(record)
    except NoCrossingError:
        tau_star = None
    return {
        "u": float(u),
        "n_tot": int(n_tot),
        "csv": csv_name,
        "samples": len(record.series),
        "tau_end": float(record.tau[-1]),
        "n_sf_max": analysis.max_occupancy(record),
        "tau_star": tau_star,
    }


def _collapse_block(cells, records):
    pairs = []
    by_n = {}
    for (u, n_tot), rec in records.items():
        by_n.setdefault(n_tot, []).append((u, rec))
    for n_tot in sorted(by_n):
        group = sorted(by_n[n_tot])
        for (u_lo, rec_lo), (u_hi, rec_hi) in zip(group, group[1:]):
            entry = {"n_tot": int(n_tot), "u_low": float(u_lo), "u_high": float(u_hi)}
            if (len(rec_lo.tau) == len(rec_hi.tau)
                    and np.max(np.abs(rec_lo.tau - rec_hi.tau)) < 1e-9):
                entry["sup_distance"] = float(np.max(np.abs(rec_lo.n_sf - rec_hi.n_sf)))
            else:
                entry["sup_distance"] = None
                entry["error"] = "sample grids differ"
            pairs.append(entry)
    return pairs


def _saturation_block(cells, records):
    grid = {}
    for (u, n_tot), rec in records.items():
        grid.setdefault("%g" % u, {})[str(n_tot)] = analysis.max_occupancy(rec)
    nondecr = {}
    for u_key, by_n in grid.items():
        vals = [by_n[k] for k in sorted(by_n, key=int)]
        nondecr[u_key] = bool(np.all(np.diff(vals) >= 0))
    noninc = {}
    n_keys = sorted({str(n) for _, n in records}, key=int)
    u_sorted = sorted(grid, key=float)
    for n_key in n_keys:
        vals = [grid[u_key][n_key] for u_key in u_sorted if n_key in grid[u_key]]
        noninc[n_key] = bool(np.all(np.diff(vals) <= 0))
    return {"n_sf_max": grid, "nondecreasing_in_ntot": nondecr,
            "nonincreasing_in_u": noninc}


def _fit_dict(fit) -> dict:
    return {"a": fit.a, "b": fit.b, "c_sat": fit.c_sat,
            "residual_norm": fit.residual_norm, "converged": fit.converged,
            "iterations": fit.iterations, "asymptote": fit.asymptote}


def _lag_block(cfg: ExperimentConfig, delta_tau: dict, tau_star: dict | None,
               fixture: bool) -> dict:
    block = {
        "level": 1.0,
        "fixture": fixture,
        "tau_star": {str(n): tau_star[n] for n in sorted(tau_star)} if tau_star else None,
        "delta_tau": {str(n): float(delta_tau[n]) for n in sorted(delta_tau)},
        "fit": None,
        "fit_error": None,
        "physical": None,
    }
    if fixture:
        block["noise"] = cfg.fixture_noise
        block["seed"] = cfg.seed
    try:
        fit = analysis.fit_saturation(delta_tau)
    except Exception as exc:  # degraded analysis is reported, not fatal
        block["fit_error"] = f"{type(exc).__name__}: {exc}"
        return block
    block["fit"] = _fit_dict(fit)
    block["physical"] = {
        "phys_u": cfg.phys_u,
        "attempt_rate_hz": cfg.phys_rate,
        "lag_seconds": analysis.physical_time(fit.asymptote, cfg.phys_u,
                                              cfg.phys_rate),
    }
    return block


def _fixture_delta_tau(cfg: ExperimentConfig) -> dict:
    delta = {n: v for n, v in cfg.fixture_delta_tau}
    if cfg.fixture_noise > 0:
        rng = np.random.default_rng(cfg.seed)
        keys = sorted(delta)
        factors = 1.0 + cfg.fixture_noise * rng.standard_normal(len(keys))
        delta = {n: float(delta[n] * f) for n, f in zip(keys, factors)}
    return delta


def build_summary(cfg: ExperimentConfig, records: dict, failures: list) -> dict:
    """Assemble the versioned summary from per-cell RunRecords.

    ``records`` maps (u, n_tot) -> RunRecord parsed back from the emitted
    CSVs, which keeps every summary value recomputable from the artifacts.
    """
    cells = sorted(records)
    summary = {
        "schema": SUMMARY_SCHEMA,
        "preset": cfg.preset,
        "status": "partial" if failures else "ok",
        "model": {"n_sites": cfg.n_sites, "hbar": cfg.hbar, "c_hop": cfg.c_hop,
                  "gamma_mode": "matched" if cfg.gamma_matched else "explicit"},
        "cells": [_cell_summary(u, n, cell_csv_name(u, n), records[(u, n)])
                  for u, n in cells],
        "failed": sorted(failures, key=lambda f: (f["u"], f["n_tot"])),
    }
    if cfg.preset == "rescaling-collapse":
        summary["collapse"] = _collapse_block(cells, records)
    elif cfg.preset == "occupancy-saturation":
        summary["saturation"] = _saturation_block(cells, records)
    elif cfg.preset == "lag-analysis":
        if cfg.fixture_delta_tau:
            summary["lag"] = _lag_block(cfg, _fixture_delta_tau(cfg), None, True)
        else:
            tau_star = {}
            for (u, n_tot), rec in records.items():
                try:
                    tau_star[n_tot] = analysis.crossing_time(rec)
                except NoCrossingError:
                    pass
            try:
                delta = analysis.lag_increments(tau_star)
            except ValueError as exc:
                summary["lag"] = {"level": 1.0, "fixture": False,
                                  "tau_star": {str(n): tau_star[n]
                                               for n in sorted(tau_star)},
                                  "delta_tau": None, "fit": None,
                                  "fit_error": f"{type(exc).__name__}: {exc}",
                                  "physical": None}
            else:
                summary["lag"] = _lag_block(cfg, delta, tau_star, False)
    elif cfg.preset == "single-run" and cells:
        first = summary["cells"][0]
        summary["single"] = {"n_sf_max": first["n_sf_max"],
                             "tau_star": first["tau_star"]}
    return summary


# --------------------------------------------------------------------------
# plot script


def plot_script_text(cfg: ExperimentConfig, summary: dict) -> str:
    """Gnuplot commands consuming the emitted CSVs (log tau axis)."""
    n_sf_col = 3 + cfg.n_sites + 1
    lines = [
        "# gnuplot script generated by klsim",
        'set datafile separator ","',
        "set ylabel 'occupancy'",
        "set key left top",
        "set grid",
    ]
    cells = summary["cells"]
    if cfg.preset == "occupancy-saturation":
        lines += ["set xlabel 'N_tot'"]
        sat = summary["saturation"]["n_sf_max"]
        blocks = []
        plots = []
        for i, u_key in enumerate(sorted(sat, key=float)):
            name = f"$sat_{i}"
            rows = "\n".join(f"{n} {_fmt(sat[u_key][n])}"
                             for n in sorted(sat[u_key], key=int))
            blocks.append(f"{name} << EOD\n{rows}\nEOD")
            plots.append(f"{name} using 1:2 with linespoints title 'U={u_key}'")
        lines += blocks
        lines.append("plot " + ", \\\n     ".join(plots))
    else:
        lines += ["set logscale x", "set xlabel 'tau'"]
        plots = [
            f"'{c['csv']}' skip 3 using 2:{n_sf_col} with lines "
            f"title 'U={c['u']:g} N={c['n_tot']}'"
            for c in cells
        ]
        if cfg.preset == "lag-analysis":
            plots.append("1.0 with lines dashtype 2 title 'n_{SF} = 1'")
        if plots:
            lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# orchestration


def _worker_count(cfg: ExperimentConfig, n_cells: int) -> int:
    limit = cfg.threads or (os.cpu_count() or 1)
    env = os.environ.get("KLSIM_THREADS")
    if env is not None:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"KLSIM_THREADS must be an integer, got {env!r}",
                              field="KLSIM_THREADS") from None
        if cap >= 1:
            limit = min(limit, cap)
    return max(1, min(limit, n_cells))


def run_preset(cfg: ExperimentConfig, *, resume: bool = False,
               parallel: bool = False, log=None) -> int:
    """Execute a preset and write all artifacts into cfg.out_dir.

    ``resume`` skips cells whose CSV already exists (sweep semantics);
    ``parallel`` dispatches cells to a thread pool capped by KLSIM_THREADS.
    Returns the process exit code: 0 on success, 3 if any cell failed to
    integrate (partial outputs are still written and flagged).
    """
    log = log or (lambda msg: None)
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".klsim-write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {cfg.out_dir!r} is not writable: {exc}",
                          field="out_dir") from None

    failures = []
    if cfg.preset == "lag-analysis" and cfg.fixture_delta_tau:
        records = {}
    else:
        cells = cfg.cells()

        def worker(cell):
            u, n_tot = cell
            path = out / cell_csv_name(u, n_tot)
            if resume and path.exists():
                log(f"[klsim] cell U={u:g} N={n_tot}: kept existing {path.name}")
                return None
            log(f"[klsim] cell U={u:g} N={n_tot}: integrating")
            params, backend, rows, diag = run_cell(cfg, u, n_tot, log=log)
            _atomic_write(path, run_csv_text(cfg, params, backend, rows))
            diag.update(u=float(u), n_tot=int(n_tot), backend=backend)
            return diag

        diagnostics = []
        if parallel and len(cells) > 1:
            with ThreadPoolExecutor(max_workers=_worker_count(cfg, len(cells))) as ex:
                futures = {ex.submit(worker, cell): cell for cell in cells}
                for future, cell in futures.items():
                    try:
                        diag = future.result()
                    except IntegrationError as exc:
                        failures.append({"u": float(cell[0]), "n_tot": int(cell[1]),
                                         "error": str(exc)})
                    else:
                        if diag:
                            diagnostics.append(diag)
        else:
            for cell in cells:
                try:
                    diag = worker(cell)
                except IntegrationError as exc:
                    failures.append({"u": float(cell[0]), "n_tot": int(cell[1]),
                                     "error": str(exc)})
                else:
                    if diag:
                        diagnostics.append(diag)

        if diagnostics:
            diagnostics.sort(key=lambda d: (d["u"], d["n_tot"]))
            _atomic_write(out / DIAGNOSTICS_FILE, _json_text({"cells": diagnostics}))

        records = {}
        for u, n_tot in cells:
            path = out / cell_csv_name(u, n_tot)
            if path.exists():
                records[(u, n_tot)] = _cell_record(*read_run_csv(path))

    summary = build_summary(cfg, records, failures)
    _atomic_write(out / SUMMARY_FILE, _json_text(summary))
    _atomic_write(out / PLOT_FILE, plot_script_text(cfg, summary))
    _atomic_write(out / RESOLVED_FILE, resolved_config_text(cfg))
    return 3 if failures else 0


def analyze_dir(out_dir: str) -> int:
    """Recompute summary.json and plot.gp from the CSVs in an output directory."""
    out = Path(out_dir)
    resolved = out / RESOLVED_FILE
    if not resolved.exists():
        raise ConfigError(f"{resolved} not found; run a preset first",
                          field="out_dir")
    cfg = validate_config(resolved.read_text(encoding="utf-8"))
    records = {}
    for u, n_tot in cfg.cells():
        path = out / cell_csv_name(u, n_tot)
        if path.exists():
            records[(u, n_tot)] = _cell_record(*read_run_csv(path))
    if cfg.preset == "lag-analysis" and cfg.fixture_delta_tau:
        records = {}
    summary = build_summary(cfg, records, [])
    _atomic_write(out / SUMMARY_FILE, _json_text(summary))
    _atomic_write(out / PLOT_FILE, plot_script_text(cfg, summary))
    return 0


def estimate_rates(args) -> dict:
    """Physical-unit estimates: attempt/tunneling rates and lag-time conversion."""
    params = analysis.PhysicalParams(
        barrier_height=args.barrier, kinetic_energy=args.kinetic,
        barrier_width_nm=args.width_nm, mass_kg=args.mass_kg,
        temperature=args.temperature)
    rate = analysis.tunneling_rate(params, use_hbar=args.use_hbar)
    payload = {
        "barrier_height_kbt": params.barrier_height,
        "kinetic_energy_kbt": params.kinetic_energy,
        "barrier_width_nm": params.barrier_width_nm,
        "temperature_k": params.temperature,
        "attempt_rate_hz": rate.nu,
        "transmission": rate.p_tun,
        "tunneling_rate_hz": rate.rate,
        "physical_time_s": (analysis.physical_time(args.tau, args.phys_u,
                                                   args.phys_rate)
                            if args.tau is not None else None),
    }
    return payload


# --------------------------------------------------------------------------
# CLI


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2) with plain text
        raise _UsageError(message)


def _error_json(kind: str, message: str, **extra) -> str:
    payload = {"error": {"type": kind, "message": message}}
    for key in ("field", "line", "column"):
        payload["error"][key] = extra.get(key)
    payload["error"].update({k: v for k, v in extra.items()
                             if k not in ("field", "line", "column")})
    return json.dumps(payload, sort_keys=True)


def _build_parser() -> _Parser:
    parser = _Parser(prog="klsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", metavar="PATH", help="key-value configuration file")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--preset", metavar="NAME", help=f"one of {', '.join(PRESETS)}")
        p.add_argument("--u", metavar="LIST", help="comma-separated Coulomb strengths")
        p.add_argument("--ntot", metavar="LIST", help="comma-separated particle numbers")
        p.add_argument("--backend", metavar="NAME",
                       help=f"auto, {', '.join(BACKENDS)}")
        p.add_argument("--tol", metavar="X", help="relative tolerance")
        p.add_argument("--quiet", action="store_true", help="suppress progress lines")

    run_p = sub.add_parser("run", help="execute a preset (recomputes every cell)")
    add_run_flags(run_p)
    sweep_p = sub.add_parser("sweep", help="execute a preset across (U, N_tot) "
                             "cells in parallel, resuming past finished cells")
    add_run_flags(sweep_p)

    ana_p = sub.add_parser("analyze", help="recompute summary and plot from CSVs")
    ana_p.add_argument("--out", metavar="DIR", required=True)

    est_p = sub.add_parser("estimate-rates", help="physical-unit rate estimates")
    est_p.add_argument("--barrier", type=float, default=1.7,
                       help="barrier height in units of k_B T (default 1.7)")
    est_p.add_argument("--kinetic", type=float, default=1.7,
                       help="kinetic energy in units of k_B T (default 1.7)")
    est_p.add_argument("--width-nm", type=float, default=0.24,
                       help="barrier width in nm (default 0.24)")
    est_p.add_argument("--mass-kg", type=float, default=analysis.POTASSIUM_MASS,
                       help="tunneling mass in kg (default: potassium ion)")
    est_p.add_argument("--temperature", type=float, default=analysis.BODY_TEMPERATURE,
                       help="temperature in K (default 310)")
    est_p.add_argument("--use-hbar", action="store_true",
                       help="use hbar instead of h in the tunneling exponent")
    est_p.add_argument("--tau", type=float, default=None,
                       help="dimensionless lag to convert to seconds")
    est_p.add_argument("--phys-u", type=float, default=1e3,
                       help="dimensionless Coulomb strength for the conversion")
    est_p.add_argument("--phys-rate", type=float, default=1e13,
                       help="physical hopping attempt rate in Hz")
    return parser


def _merge_flags(args) -> dict:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {args.config}", field="config")
        raw = {key: value for key, (value, *_pos) in
               _parse_config_text(path.read_text(encoding="utf-8")).items()}
    preset = args.preset or raw.get("preset", "single-run")
    if args.preset:
        raw["preset"] = args.preset
    if args.out:
        raw["out_dir"] = args.out
    if args.backend:
        raw["backend"] = args.backend
    if args.tol:
        raw["rel_tol"] = args.tol
    if args.u:
        values = args.u
        if preset == "single-run" and "," not in values:
            raw["u"] = values
        else:
            raw["u_list"] = values
    if args.ntot:
        values = args.ntot
        if preset == "single-run" and "," not in values:
            raw["n_tot"] = values
        else:
            raw["ntot_list"] = values
    return raw


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(_error_json("usage", str(exc)))
        return 2

    try:
        if args.command in ("run", "sweep"):
            cfg = validate_config(_merge_flags(args))
            log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr,
                                                             flush=True))
            code = run_preset(cfg, resume=(args.command == "sweep"),
                              parallel=(args.command == "sweep"), log=log)
            if code != 0:
                summary = json.loads((Path(cfg.out_dir) / SUMMARY_FILE).read_text())
                print(_error_json("integration",
                                  "one or more cells failed to integrate; "
                                  "partial outputs written",
                                  failed=summary["failed"]))
            return code
        if args.command == "analyze":
            return analyze_dir(args.out)
        if args.command == "estimate-rates":
            print(_json_text(estimate_rates(args)), end="")
            return 0
    except ConfigError as exc:
        print(_error_json("config", str(exc), field=exc.field, line=exc.line,
                          column=exc.column))
        return 2
    except ValueError as exc:
        print(_error_json("usage", str(exc)))
        return 2
    except IntegrationError as exc:
        print(_error_json("integration", str(exc)))
        return 3
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
