"""Run-configuration ingestion (TOML) and resolution to explicit values.

Every field except the model section has a default; ``resolve_config``
returns a plain dict with all defaults materialized so the manifest can echo
exactly what the run used.  Frequencies in config files are given as
<name>_khz meaning the value of (angular frequency)/2pi in kHz.
"""

from __future__ import annotations

import math
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from . import crystal as crystal_mod
from .errors import ConfigError
from .model import KHZ, ModelParams, SiteCoupling

PAPER_SCALE_THRESHOLD = 60

_DEFAULTS = {
    "seed": 0,
    "subensemble": {"m_groups": [2]},
    "evolution": {
        "t_max_ms": 4.0,
        "dt_ms": 0.25,
        "echo": True,
        "initial_spin": "+x",
        "boson": "vacuum",
        "thermal_nbar": 0.0,
        "trajectories": 32,
        "krylov_dim": 30,
        "step_tolerance": 1e-10,
        "representation": "subensemble",
    },
    "measurement": {
        "axes": ["x", "y", "z"],
        "exact": True,
        "sampled": False,
        "samples_per_time": 200,
        "directions": 25,
        "shots_per_direction": 50,
        "sites": "auto",
    },
    "tomography": {
        "method": "both",
        "k_max": 4,
        "fit_time_ms": 4.5,
    },
    "engineered": {
        "pairs": "auto",
        "mode_index": 2,
    },
    "run": {
        "allow_paper_scale": False,
        "dimension_cap": 2 ** 22,
        "truncation_tolerance": 1e-8,
        "save_shots": False,
    },
}

_SPIN_DIRS = {"+x", "-x", "+y", "-y", "+z", "-z"}


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _merge_defaults(section, defaults):
    out = dict(defaults)
    out.update(section or {})
    return out


def resolve_config(raw, base_dir="."):
    """Validate and fill in defaults; returns a fully explicit dict."""
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a table")
    cfg = {
        "seed": int(raw.get("seed", _DEFAULTS["seed"])),
        "subensemble": _merge_defaults(raw.get("subensemble"), _DEFAULTS["subensemble"]),
        "evolution": _merge_defaults(raw.get("evolution"), _DEFAULTS["evolution"]),
        "measurement": _merge_defaults(raw.get("measurement"), _DEFAULTS["measurement"]),
        "tomography": _merge_defaults(raw.get("tomography"), _DEFAULTS["tomography"]),
        "engineered": _merge_defaults(raw.get("engineered"), _DEFAULTS["engineered"]),
        "run": _merge_defaults(raw.get("run"), _DEFAULTS["run"]),
        "model": raw.get("model"),
        "crystal": raw.get("crystal"),
        "base_dir": str(base_dir),
    }
    m = cfg["subensemble"]["m_groups"]
    cfg["subensemble"]["m_groups"] = [int(x) for x in (m if isinstance(m, list) else [m])]
    ev = cfg["evolution"]
    if ev["initial_spin"] not in _SPIN_DIRS:
        raise ConfigError(f"evolution.initial_spin must be one of {sorted(_SPIN_DIRS)}")
    if ev["representation"] not in ("subensemble", "full", "both"):
        raise ConfigError("evolution.representation must be subensemble|full|both")
    if ev["boson"] not in ("vacuum", "thermal"):
        raise ConfigError("evolution.boson must be vacuum|thermal")
    if ev["dt_ms"] <= 0 or ev["t_max_ms"] < 0:
        raise ConfigError("evolution times must be positive")
    meth = cfg["tomography"]["method"]
    if meth not in ("dicke", "full", "both"):
        raise ConfigError("tomography.method must be dicke|full|both")
    return cfg


def trap_from_config(cfg):
    section = cfg.get("crystal")
    if not section:
        raise ConfigError("this command needs a [crystal] section")
    try:
        return crystal_mod.TrapConfig(
            omega_x=float(section["omega_x_khz"]) * KHZ,
            omega_y=float(section["omega_y_khz"]) * KHZ,
            omega_z=float(section["omega_z_khz"]) * KHZ,
            n_ions=int(section["n_ions"]),
        ), int(section.get("seed", 0))
    except KeyError as exc:
        raise ConfigError(f"[crystal] is missing {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad [crystal] values: {exc}") from exc


def _gaussian_profile(positions_um, laser):
    peak = float(laser["peak_omega_khz"]) * KHZ
    center = laser.get("center_um", [0.0, 0.0])
    waist = laser.get("waist_um", "uniform")
    if waist == "uniform":
        return np.full(len(positions_um), peak)
    wx, wz = (float(waist[0]), float(waist[1])) if isinstance(waist, list) \
        else (float(waist), float(waist))
    dx = positions_um[:, 0] - float(center[0])
    dz = positions_um[:, 1] - float(center[1])
    return peak * np.exp(-2.0 * ((dx / wx) ** 2 + (dz / wz) ** 2))


def resolve_model(cfg):
    """Build ModelParams from the model section.

    Returns (params, info) where info records how sites were synthesized
    (selected mode frequency, positions file, ...).  n_max may come back as
    -1 meaning "size automatically from the truncation heuristic".
    """
    section = cfg.get("model")
    if not section:
        raise ConfigError("config needs a [model] section")
    for key in ("eta", "delta_khz", "b_khz"):
        if key not in section:
            raise ConfigError(f"[model] is missing {key}")
    eta = float(section["eta"])
    delta = float(section["delta_khz"]) * KHZ
    b_field = float(section["b_khz"]) * KHZ
    n_max = int(section.get("n_max", -1))
    info = {}

    if "sites" in section:
        sites = []
        for i, row in enumerate(section["sites"]):
            try:
                sites.append(SiteCoupling(
                    omega_i=float(row["omega_khz"]) * KHZ,
                    b_i=float(row["b_i"]),
                    phi_i=float(row["phi_rad"]) % (2 * math.pi),
                ))
            except KeyError as exc:
                raise ConfigError(f"site {i} is missing {exc}") from exc
        info["source"] = "explicit"
    elif "modes" in section:
        sites, info = _sites_from_modes(cfg, section)
    else:
        raise ConfigError("[model] needs either a sites table or a modes reference")

    n = len(sites)
    if n > PAPER_SCALE_THRESHOLD and not cfg["run"]["allow_paper_scale"]:
        raise ConfigError(
            f"N={n} exceeds the desk-scale threshold {PAPER_SCALE_THRESHOLD}; "
            "set run.allow_paper_scale=true to proceed (resource heavy)")
    params = ModelParams(eta=eta, delta=delta, b_field=b_field,
                         sites=tuple(sites), n_max=max(n_max, 0))
    info["auto_n_max"] = n_max < 0
    return params, info


def _sites_from_modes(cfg, section):
    modes_cfg = section["modes"]
    base = Path(cfg["base_dir"])
    info = {"source": "modes"}
    if "file" in modes_cfg:
        n_ions, table = crystal_mod.read_mode_table(base / modes_cfg["file"])
        if "positions_file" not in modes_cfg:
            raise ConfigError("[model.modes] with a file also needs positions_file")
        positions_um = crystal_mod.read_positions(base / modes_cfg["positions_file"])
        info["modes_file"] = str(modes_cfg["file"])
    else:
        trap, crystal_seed = trap_from_config(cfg)
        solution = crystal_mod.solve_equilibrium(trap, seed=crystal_seed)
        table = crystal_mod.transverse_modes(trap, solution)
        n_ions = trap.n_ions
        positions_um = solution.positions * trap.length_scale_m * 1e6
        info["crystal_seed"] = crystal_seed
    which = modes_cfg.get("mode", "com")
    freq, vector = crystal_mod.select_mode(table, which)
    info["mode"] = which
    info["mode_freq_khz"] = freq / KHZ

    laser = section.get("laser")
    if not laser or "peak_omega_khz" not in laser:
        raise ConfigError("[model.laser] with peak_omega_khz is required "
                          "when synthesizing couplings from a mode table")
    omegas = _gaussian_profile(positions_um, laser)

    phase = section.get("phase", {})
    curvature = float(phase.get("curvature_rad_per_um2", 0.0))
    center = np.mean(positions_um, axis=0)
    r2 = np.sum((positions_um - center) ** 2, axis=1)
    phis = np.mod(curvature * r2, 2 * math.pi)

    sites = [SiteCoupling(omega_i=float(om), b_i=float(bv), phi_i=float(ph))
             for om, bv, ph in zip(omegas, vector, phis)]
    info["n_ions"] = n_ions
    info["positions_um"] = positions_um.tolist()
    return sites, info
