"""TOML experiment configuration with strict, key-path-aware validation."""

from __future__ import annotations

import math
import sys
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..control.mpc import MpcConfig
from ..control.pure_pursuit import PurePursuitGains
from ..gp import NU_GRID, GpSearchConfig
from ..models import DriveParams, Limits, TireParams, Vehicle, VehicleParams
from ..track import SpeedLimits, TrackGenConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


_REAL = (int, float)

# section -> key -> (type, default or REQUIRED, check)
REQUIRED = object()


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _frac(v):
    return 0 <= v < 1


SCHEMA = {
    "vehicle": {
        "name": (str, REQUIRED, None),
        "m": (_REAL, REQUIRED, _pos),
        "Iz": (_REAL, REQUIRED, _pos),
        "lf": (_REAL, REQUIRED, _pos),
        "lr": (_REAL, REQUIRED, _pos),
        "width": (_REAL, REQUIRED, _pos),
    },
    "tires": {
        "Bf": (_REAL, REQUIRED, _pos), "Cf": (_REAL, REQUIRED, _pos), "Df": (_REAL, REQUIRED, _pos),
        "Br": (_REAL, REQUIRED, _pos), "Cr": (_REAL, REQUIRED, _pos), "Dr": (_REAL, REQUIRED, _pos),
    },
    "drivetrain": {
        "Cm1": (_REAL, REQUIRED, _pos), "Cm2": (_REAL, REQUIRED, _nonneg),
        "Croll": (_REAL, REQUIRED, _nonneg), "Cd": (_REAL, REQUIRED, _nonneg),
    },
    "limits": {
        "d_min": (_REAL, REQUIRED, None), "d_max": (_REAL, REQUIRED, None),
        "delta_min": (_REAL, REQUIRED, None), "delta_max": (_REAL, REQUIRED, None),
        "ddelta_min": (_REAL, REQUIRED, None), "ddelta_max": (_REAL, REQUIRED, None),
    },
    "track": {
        "n_checkpoints": (int, 8, lambda v: v >= 6),
        "radius": (_REAL, REQUIRED, _pos),
        "radius_jitter": (_REAL, 0.3, _frac),
        "angle_jitter": (_REAL, 0.3, lambda v: 0 <= v < 0.5),
        "spacing": (_REAL, REQUIRED, _pos),
        "min_radius": (_REAL, REQUIRED, _pos),
        "width": (_REAL, REQUIRED, _pos),
        "samples_per_segment": (int, 60, lambda v: v >= 4),
        "max_retries": (int, 200, lambda v: v >= 1),
    },
    "racingline": {
        "v_max": (_REAL, REQUIRED, _pos),
        "a_lat_max": (_REAL, REQUIRED, _pos),
        "a_lon_max": (_REAL, REQUIRED, _pos),
        "a_brake_max": (_REAL, REQUIRED, _pos),
    },
    "purepursuit": {
        "lookahead": (_REAL, REQUIRED, _pos),
        "speed_gain": (_REAL, REQUIRED, _nonneg),
        "lookahead_detune": (_REAL, 1.5, _pos),
        "speed_gain_detune": (_REAL, 0.6, _pos),
        "speed_scale": (_REAL, 1.0, _pos),
        "gain_jitter": (_REAL, 0.0, _frac),
        "laps": (int, 2, lambda v: v >= 1),
    },
    "mpc": {
        "N": (int, 20, lambda v: v >= 2),
        "Ts": (_REAL, 0.02, _pos),
        "Q": (list, [1.0, 1.0], None),
        "R": (list, [0.01, 0.01], None),
        "S": (_REAL, 100.0, _pos),
        "boundary_margin": (_REAL, 0.0, _nonneg),
    },
    "solver": {
        "max_iter": (int, 8, lambda v: v >= 1),
        "tol": (_REAL, 1e-4, _pos),
        "lm_init": (_REAL, 1e-3, _pos),
    },
    "gp": {
        "n_restarts": (int, 8, _nonneg),
        "n_sweeps": (int, 2, lambda v: v >= 1),
        "nu_grid": (list, ["0.5", "1.5", "2.5", "inf"], None),
        "xatol": (_REAL, 0.05, _pos),
        "maxiter": (int, 20, lambda v: v >= 1),
        "n_max": (int, 400, lambda v: v >= 50),
    },
    "experiment": {
        "seed": (int, 0, _nonneg),
        "n_validation_tracks": (int, 3, lambda v: v >= 1),
        "v0": (_REAL, 0.5, _nonneg),
        "race_laps": (int, 1, lambda v: v >= 1),
        "update_laps": (int, 1, lambda v: v >= 1),
        "sigma_threshold": (_REAL, 0.25, _pos),
        "max_lap_time": (_REAL, 60.0, _pos),
        "replay_every": (int, 25, lambda v: v >= 1),
    },
}

_CHECK_TEXT = {_pos: "must be > 0", _nonneg: "must be >= 0", _frac: "must be in [0, 1)"}


def _validate_section(name, raw):
    schema = SCHEMA[name]
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be a table")
    for key in raw:
        if key not in schema:
            raise ConfigError(f"{name}.{key}", "unknown key")
    out = {}
    for key, (typ, default, check) in schema.items():
        path = f"{name}.{key}"
        if key not in raw:
            if default is REQUIRED:
                raise ConfigError(path, "missing required key")
            out[key] = default
            continue
        value = raw[key]
        if isinstance(value, bool) or not isinstance(value, typ):
            raise ConfigError(path, f"expected {getattr(typ, '__name__', 'number')}, got {type(value).__name__}")
        if typ is _REAL:
            value = float(value)
            if not math.isfinite(value):
                raise ConfigError(path, "must be finite")
        if check is not None and not check(value):
            raise ConfigError(path, _CHECK_TEXT.get(check, "out of range"))
        out[key] = value
    return out


def _nu_value(path, v):
    if isinstance(v, str) and v.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        nu = float(v)
    except (TypeError, ValueError):
        raise ConfigError(path, f"invalid smoothness {v!r}") from None
    if nu not in NU_GRID:
        raise ConfigError(path, f"smoothness must be one of 0.5, 1.5, 2.5, inf; got {v!r}")
    return nu


def _weights(path, values, n):
    if len(values) != n or not all(isinstance(v, _REAL) and not isinstance(v, bool) for v in values):
        raise ConfigError(path, f"expected a list of {n} numbers")
    if not all(v > 0 for v in values):
        raise ConfigError(path, "weights must be > 0 (positive definite)")
    return np.diag([float(v) for v in values])


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    path: str
    raw: dict
    vehicle: Vehicle
    track_gen: TrackGenConfig
    speed_limits: SpeedLimits
    pp: dict
    mpc: MpcConfig
    gp_search: GpSearchConfig
    gp_n_max: int
    experiment: dict

    @property
    def Ts(self) -> float:
        return self.mpc.Ts

    @property
    def seed(self) -> int:
        return self.experiment["seed"]

    def pp_gains(self, rng: np.random.Generator | None = None) -> PurePursuitGains:
        """Detuned pure-pursuit gains, optionally jittered by ``rng``."""
        pp = self.pp
        look = pp["lookahead"] * pp["lookahead_detune"]
        gain = pp["speed_gain"] * pp["speed_gain_detune"]
        if rng is not None and pp["gain_jitter"] > 0:
            j = pp["gain_jitter"]
            look *= 1.0 + rng.uniform(-j, j)
            gain *= 1.0 + rng.uniform(-j, j)
        return PurePursuitGains(look, gain, pp["speed_scale"])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = {k: dict(v) for k, v in self.raw.items()}
        raw["experiment"]["seed"] = int(seed)
        return parse_config(raw, self.path)


def parse_config(data: dict, path: str = "<memory>") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "configuration must be a table")
    for section in data:
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
    sec = {}
    for name in SCHEMA:
        if name not in data:
            # sections whose keys all have defaults may be omitted
            if any(spec[1] is REQUIRED for spec in SCHEMA[name].values()):
                raise ConfigError(name, "missing required section")
        sec[name] = _validate_section(name, data.get(name, {}))

    v, t, dr, lm = sec["vehicle"], sec["tires"], sec["drivetrain"], sec["limits"]
    for lo, hi in (("d_min", "d_max"), ("delta_min", "delta_max"), ("ddelta_min", "ddelta_max")):
        if not lm[lo] < lm[hi]:
            raise ConfigError(f"limits.{lo}", f"must be < limits.{hi}")
    limits = Limits(lm["d_min"], lm["d_max"], lm["delta_min"], lm["delta_max"],
                    lm["ddelta_min"], lm["ddelta_max"], v["width"])
    vehicle = Vehicle(v["name"], VehicleParams(v["m"], v["Iz"], v["lf"], v["lr"]),
                      TireParams(t["Bf"], t["Cf"], t["Df"], t["Br"], t["Cr"], t["Dr"]),
                      DriveParams(dr["Cm1"], dr["Cm2"], dr["Croll"], dr["Cd"]), limits)
    tk = sec["track"]
    track_gen = TrackGenConfig(tk["n_checkpoints"], tk["radius"], tk["radius_jitter"], tk["angle_jitter"],
                               tk["spacing"], tk["min_radius"], tk["width"], tk["samples_per_segment"],
                               tk["max_retries"])
    rl = sec["racingline"]
    speed_limits = SpeedLimits(rl["v_max"], rl["a_lat_max"], rl["a_lon_max"], rl["a_brake_max"])
    m, so = sec["mpc"], sec["solver"]
    mpc = MpcConfig(limits, N=m["N"], Ts=m["Ts"], Q=_weights("mpc.Q", m["Q"], 2), R=_weights("mpc.R", m["R"], 2),
                    S=m["S"], max_iter=so["max_iter"], tol=so["tol"], boundary_margin=m["boundary_margin"],
                    lm_init=so["lm_init"])
    g = sec["gp"]
    nu_grid = tuple(_nu_value(f"gp.nu_grid[{i}]", x) for i, x in enumerate(g["nu_grid"]))
    if not nu_grid:
        raise ConfigError("gp.nu_grid", "must not be empty")
    gp_search = GpSearchConfig(n_restarts=g["n_restarts"], n_sweeps=g["n_sweeps"], nu_grid=nu_grid,
                               xatol=g["xatol"], maxiter=g["maxiter"])
    return ExperimentConfig(str(path), {k: dict(x) for k, x in sec.items()}, vehicle, track_gen,
                            speed_limits, sec["purepursuit"], mpc, gp_search, g["n_max"], sec["experiment"])


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file not found: {path}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"invalid TOML: {exc}") from None
    return parse_config(data, str(path))


BUILTIN_CONFIGS = ("scale143", "f1tenth")


def builtin_config_path(name: str) -> Path:
    if name not in BUILTIN_CONFIGS:
        raise ConfigError("<file>", f"unknown builtin config {name!r}")
    return Path(str(resources.files("racegp") / "configs" / f"{name}.toml"))


def resolve_config(spec: str) -> ExperimentConfig:
    """Load a config from a path, or from a builtin name such as ``scale143``."""
    if spec in BUILTIN_CONFIGS and not Path(spec).exists():
        return load_config(builtin_config_path(spec))
    return load_config(spec)


def derive_seed(master: int, stage: str) -> np.random.SeedSequence:
    """Independent stream per pipeline stage: ``SeedSequence([master, crc32(stage)])``."""
    return np.random.SeedSequence([int(master), zlib.crc32(stage.encode())])


def derive_int_seed(master: int, stage: str) -> int:
    return int(derive_seed(master, stage).generate_state(1, dtype=np.uint32)[0])
