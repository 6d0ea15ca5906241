"""Plain-text run configuration: one ``[section]`` of ``key = value`` lines per module.

Missing keys fall back to the published defaults; unknown keys are errors so
that typos do not silently change an experiment.  The config hash covers
every section except ``[run]`` (seed and output location are recorded
separately in each artifact).
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

from .beam_model import PAPER_WEIGHTS, BeamModelParams
from .localizer import FilterConfig
from .particle_filter import InitRegion, KldConfig
from .se2 import MotionNoiseParams


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


# section -> allowed keys; ``None`` allows any key (name -> path tables)
SCHEMA: dict[str, set[str] | None] = {
    "run": {"seed", "output"},
    "map": {"image", "metadata"},
    "log": {"path", "fov_deg", "z_max"},
    "init": {"center_x", "center_y", "size", "x0", "y0", "x1", "y1",
             "theta_min", "theta_max", "scale_min", "scale_max"},
    "motion": {"sigma_q", "sigma_theta", "sigma_s", "s_min", "s_max"},
    "beam": {"sigma_z", "lambda", "delta", "z_max", "w_hit", "w_dyn", "w_max", "w_rnd",
             "beams_per_scan", "scale_jacobian", "calibrate", "calibration_seed"},
    "filter": {"n_particles", "resample_mode", "ess_threshold", "use_kld", "recovery",
               "recovery_size", "estimate_mode"},
    "kld": {"bin_x", "bin_y", "bin_theta", "bin_scale", "epsilon", "z_quantile", "n_min", "n_max"},
    "simulate": {"scenario", "route", "speed", "turn_rate", "scan_period", "beams", "fov_deg",
                 "z_max", "odom_var_q", "odom_sigma_theta", "range_noise", "stretch_x", "stretch_y"},
    "experiment": {"scenario", "routes", "seeds", "init_size", "scale_min", "scale_max", "stretch_x", "stretch_y"},
    "learn": {"calibration_csv", "grid_min", "grid_max", "grid_step", "fit_sigma"},
    "sketches": None,
    "eval": {"results", "reference", "route", "sketch", "target_room"},
}


@dataclass
class RunConfig:
    parser: configparser.ConfigParser
    base_dir: Path

    # ---------------------------------------------------------------- loading
    @classmethod
    def from_text(cls, text: str, base_dir: str | Path = ".") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str  # keep key case (sketch ids)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            allowed = SCHEMA[sec]
            if allowed is not None:
                bad = sorted(set(cp[sec]) - allowed)
                if bad:
                    raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(bad)}")
        return cls(cp, Path(base_dir))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc}") from exc
        return cls.from_text(text, p.parent)

    # ---------------------------------------------------------------- access
    def has(self, section: str, key: str) -> bool:
        return self.parser.has_option(section, key)

    def get(self, section: str, key: str, default=None) -> str | None:
        if self.has(section, key):
            return self.parser.get(section, key).strip()
        return default

    def require(self, section: str, key: str) -> str:
        v = self.get(section, key)
        if v is None or v == "":
            raise ConfigError(f"missing required setting [{section}] {key}")
        return v

    def _typed(self, section, key, default, conv, what):
        v = self.get(section, key)
        if v is None or v == "":
            return default
        try:
            return conv(v)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be {what}, got {v!r}") from exc

    def float(self, section: str, key: str, default=None):
        return self._typed(section, key, default, float, "a number")

    def int(self, section: str, key: str, default=None):
        return self._typed(section, key, default, int, "an integer")

    def bool(self, section: str, key: str, default=False):
        def conv(v):
            low = v.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        return self._typed(section, key, default, conv, "a boolean")

    def floats(self, section: str, key: str, default=None):
        return self._typed(section, key, default,
                           lambda v: tuple(float(t) for t in v.replace(",", " ").split()), "a number list")

    def path(self, section: str, key: str, required: bool = True) -> Path | None:
        v = self.require(section, key) if required else self.get(section, key)
        if not v:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def items(self, section: str) -> dict[str, str]:
        if not self.parser.has_section(section):
            return {}
        return {k: v.strip() for k, v in self.parser[section].items()}

    # ---------------------------------------------------------------- identity
    def canonical_text(self, include_run: bool = False) -> str:
        lines = []
        for sec in sorted(self.parser.sections()):
            if sec == "run" and not include_run:
                continue
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in sorted(self.items(sec).items())]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    # ---------------------------------------------------------------- builders
    def motion(self) -> MotionNoiseParams:
        d = MotionNoiseParams()
        q = self.floats("motion", "sigma_q")
        if q is None:
            sigma_q = d.sigma_q
        elif len(q) == 1:
            sigma_q = ((q[0], 0.0), (0.0, q[0]))
        elif len(q) == 4:
            sigma_q = ((q[0], q[1]), (q[2], q[3]))
        else:
            raise ConfigError("[motion] sigma_q takes 1 (isotropic variance) or 4 values")
        try:
            return MotionNoiseParams(
                sigma_q, self.float("motion", "sigma_theta", d.sigma_theta),
                self.float("motion", "sigma_s", d.sigma_s),
                self.float("motion", "s_min", d.s_min), self.float("motion", "s_max", d.s_max))
        except ValueError as exc:
            raise ConfigError(f"[motion] {exc}") from exc

    def beam(self) -> BeamModelParams:
        d = BeamModelParams()
        try:
            return BeamModelParams(
                sigma_z=self.float("beam", "sigma_z", d.sigma_z), lam=self.float("beam", "lambda", d.lam),
                delta=self.float("beam", "delta", d.delta), z_max=self.float("beam", "z_max", d.z_max),
                w_hit=self.float("beam", "w_hit", PAPER_WEIGHTS[0]),
                w_dyn=self.float("beam", "w_dyn", PAPER_WEIGHTS[1]),
                w_max=self.float("beam", "w_max", PAPER_WEIGHTS[2]),
                w_rnd=self.float("beam", "w_rnd", PAPER_WEIGHTS[3]),
                beams_per_scan=self.int("beam", "beams_per_scan", d.beams_per_scan),
                scale_jacobian=self.bool("beam", "scale_jacobian", False))
        except ValueError as exc:
            raise ConfigError(f"[beam] {exc}") from exc

    def kld(self) -> KldConfig:
        d = KldConfig()
        try:
            return KldConfig(
                (self.float("kld", "bin_x", d.bin_size[0]), self.float("kld", "bin_y", d.bin_size[1]),
                 self.float("kld", "bin_theta", d.bin_size[2]), self.float("kld", "bin_scale", d.bin_size[3])),
                self.float("kld", "epsilon", d.epsilon), self.float("kld", "z_quantile", d.z_quantile),
                self.int("kld", "n_min", d.n_min), self.int("kld", "n_max", d.n_max))
        except ValueError as exc:
            raise ConfigError(f"[kld] {exc}") from exc

    def filter(self) -> FilterConfig:
        d = FilterConfig()
        try:
            return FilterConfig(
                self.int("filter", "n_particles", d.n_particles),
                self.get("filter", "resample_mode", d.resample_mode),
                self.float("filter", "ess_threshold", d.ess_threshold),
                self.bool("filter", "use_kld", d.use_kld), self.kld(),
                self.get("filter", "recovery", d.recovery),
                self.float("filter", "recovery_size", d.recovery_size),
                self.get("filter", "estimate_mode", d.estimate_mode))
        except ValueError as exc:
            raise ConfigError(f"[filter] {exc}") from exc

    def init_region(self) -> InitRegion:
        theta = (self.float("init", "theta_min", -math.pi), self.float("init", "theta_max", math.pi))
        scale = (self.float("init", "scale_min", 0.01), self.float("init", "scale_max", 1.0))
        try:
            if self.has("init", "center_x"):
                return InitRegion.centered(float(self.require("init", "center_x")),
                                           float(self.require("init", "center_y")),
                                           self.float("init", "size", 150.0),
                                           theta_range=theta, scale_range=scale)
            return InitRegion(float(self.require("init", "x0")), float(self.require("init", "y0")),
                              float(self.require("init", "x1")), float(self.require("init", "y1")),
                              theta, scale)
        except ValueError as exc:
            raise ConfigError(f"[init] {exc}") from exc

    def seed(self, override: int | None = None) -> int:
        if override is not None:
            return int(override)
        return self.int("run", "seed", 0)


def default_config_text() -> str:
    """Config dump with the published parameter values and the filter defaults."""
    b = BeamModelParams()
    m = MotionNoiseParams()
    f = FilterConfig()
    k = f.kld
    raw = ", ".join(str(w) for w in PAPER_WEIGHTS)
    return f"""# sketchloc configuration (published parameter values)

[run]
seed = 0

[motion]
sigma_q = {m.sigma_q[0][0]}, {m.sigma_q[0][1]}, {m.sigma_q[1][0]}, {m.sigma_q[1][1]}
sigma_theta = {m.sigma_theta}
sigma_s = {m.sigma_s}
s_min = {m.s_min}
s_max = {m.s_max}

[beam]
sigma_z = {b.sigma_z}
lambda = {b.lam}
delta = {b.delta}
z_max = {b.z_max}
# mixture weights normalized from the published ({raw}), which sum to {sum(PAPER_WEIGHTS):g}
w_hit = {b.w_hit!r}
w_dyn = {b.w_dyn!r}
w_max = {b.w_max!r}
w_rnd = {b.w_rnd!r}
beams_per_scan = {b.beams_per_scan}
scale_jacobian = false

[init]
size = 150
theta_min = {-math.pi!r}
theta_max = {math.pi!r}
scale_min = 0.01
scale_max = 1.0

[filter]
n_particles = {f.n_particles}
resample_mode = {f.resample_mode}
ess_threshold = {f.ess_threshold}
use_kld = {str(f.use_kld).lower()}
recovery = {f.recovery}
recovery_size = {f.recovery_size}
estimate_mode = {f.estimate_mode}

[kld]
bin_x = {k.bin_size[0]}
bin_y = {k.bin_size[1]}
bin_theta = {k.bin_size[2]}
bin_scale = {k.bin_size[3]}
epsilon = {k.epsilon}
z_quantile = {k.z_quantile}
n_min = {k.n_min}
n_max = {k.n_max}
"""
