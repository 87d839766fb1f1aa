"""Run configuration: one INI file with sections, overridable from the command line."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .model import McmcConfig, ModelSpec, PriorSpec

SECTIONS = ("data", "model", "priors", "mcmc", "simulate", "irf", "report", "output")

# keys accepted per section
_MODEL_KEYS = {"variables", "climate", "P", "K", "country_effects", "time_effects", "region_by_year", "extras",
               "theta_diagonal", "recursive_gamma"}
KNOWN_KEYS = {
    "data": {"panel", "metadata", "variables", "units", "country_column", "year_column", "subsample"},
    "model": _MODEL_KEYS,
    "priors": {f.name for f in fields(PriorSpec)},
    "mcmc": {f.name for f in fields(McmcConfig)},
    "simulate": {"countries", "years", "first_year", "burn_in", "seed", "parameters", "theta", "Q", "gamma0",
                 "regions"},
    "irf": {"draws", "shocks", "horizon", "baseline", "country"},
    "report": {"draws", "variable"},
    "output": {"directory"},
}

EXAMPLE = """\
# Example configuration. Paths are relative to this file.

[data]
panel = panel.csv
# optional: country, region, poor, hot, agricultural
metadata = metadata.csv
variables = temperature, gdp_growth
units = temperature:C, gdp_growth:pp
# poor | rich | hot | agricultural | non-agricultural | preYYYY | postYYYY
subsample =

[model]
P = 2
K = 1
time_effects = yes
extras =

[mcmc]
iterations = 55000
burn_in = 5000
thin = 10
particle_count = 30
# multinomial | systematic
resampling = multinomial
seed = 0
workers = 1
checkpoint_every = 1000

[simulate]
countries = 50
years = 60
seed = 1

[irf]
shocks = +1C h_temperature; +1pp h_gdp_growth; +1C e_temperature
horizon = 10
baseline = posterior

[output]
directory = out
"""


class ConfigError(ValueError):
    pass


def _bool(value: str, where: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ConfigError(f"{where}: expected yes/no, got {value!r}")


def _list(value: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in value.split(",") if x.strip())


def parse_matrix(text: str, where: str) -> np.ndarray:
    """Rows separated by ';', entries by whitespace or ','."""
    try:
        rows = [[float(x) for x in r.replace(",", " ").split()] for r in text.split(";") if r.strip()]
        out = np.array(rows, dtype=float)
    except ValueError:
        raise ConfigError(f"{where}: cannot read matrix {text!r}") from None
    if out.ndim != 2 or out.shape[0] != out.shape[1]:
        raise ConfigError(f"{where}: expected a square matrix, got {text!r}")
    return out


class RunConfig:
    """Parsed configuration; ``base`` is the directory relative paths refer to."""

    def __init__(self, parser: configparser.ConfigParser, base: Path, source: str | None = None):
        self.parser = parser
        self.base = base
        self.source = source
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            unknown = set(parser[section]) - KNOWN_KEYS[section]
            if unknown:
                raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")

    # ------------------------------------------------------------ construction

    @classmethod
    def from_text(cls, text: str, base=".", source=None) -> "RunConfig":
        p = _parser()
        try:
            p.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        return cls(p, Path(base), source)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"configuration file {path} not found")
        return cls.from_text(path.read_text(), path.parent, str(path))

    def override(self, assignments) -> "RunConfig":
        """Apply ``section.key=value`` strings."""
        for a in assignments:
            if "=" not in a or "." not in a.split("=", 1)[0]:
                raise ConfigError(f"override {a!r} must look like section.key=value")
            lhs, value = a.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}] in override {a!r}")
            if key.strip() not in KNOWN_KEYS[section]:
                raise ConfigError(f"[{section}]: unknown key {key.strip()!r}")
            if not self.parser.has_section(section):
                self.parser.add_section(section)
            self.parser[section][key.strip()] = value.strip()
        return self

    # ------------------------------------------------------------------ access

    def get(self, section: str, key: str, default=None):
        if self.parser.has_option(section, key):
            v = self.parser[section][key].strip()
            return v if v != "" else default
        return default

    def getint(self, section, key, default=None):
        v = self.get(section, key)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected an integer, got {v!r}") from None

    def path(self, section, key, default=None, must_exist=False) -> Path | None:
        v = self.get(section, key, default)
        if v is None:
            return None
        p = Path(v)
        p = p if p.is_absolute() else self.base / p
        if must_exist and not p.exists():
            raise ConfigError(f"[{section}] {key}: {p} does not exist")
        return p

    @property
    def output_dir(self) -> Path:
        return self.path("output", "directory", "out")

    def variables(self) -> tuple[str, ...]:
        v = self.get("data", "variables") or self.get("model", "variables")
        if not v:
            raise ConfigError("[data] variables is required")
        return _list(v)

    # --------------------------------------------------------------- the model

    def model_spec(self) -> ModelSpec:
        priors = _typed(PriorSpec, self.parser["priors"] if self.parser.has_section("priors") else {}, "priors")
        mcmc = _typed(McmcConfig, self.parser["mcmc"] if self.parser.has_section("mcmc") else {}, "mcmc")
        m = self.parser["model"] if self.parser.has_section("model") else {}
        kw = {}
        for key in ("P", "K"):
            if key in m and m[key].strip():
                kw[key] = self._int(m[key], f"[model] {key}")
        for key in ("country_effects", "time_effects", "region_by_year", "theta_diagonal", "recursive_gamma"):
            if key in m and m[key].strip():
                kw[key] = _bool(m[key], f"[model] {key}")
        if "climate" in m and m["climate"].strip():
            kw["climate"] = _list(m["climate"])
        if "extras" in m:
            kw["extras"] = _list(m["extras"])
        try:
            return ModelSpec(variables=self.variables(), priors=priors, mcmc=mcmc, **kw)
        except ValueError as exc:
            raise ConfigError(f"invalid model: {exc}") from None

    @staticmethod
    def _int(v, where):
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {v!r}") from None

    def units(self) -> dict[str, str]:
        out = {}
        for item in _list(self.get("data", "units", "")):
            if ":" not in item:
                raise ConfigError(f"[data] units: expected name:unit, got {item!r}")
            k, v = item.split(":", 1)
            out[k.strip()] = v.strip()
        return out

    # ------------------------------------------------------------- provenance

    def canonical(self) -> str:
        """Sorted, whitespace-normalized text; equal for equivalent configurations."""
        lines = []
        for section in sorted(self.parser.sections()):
            items = sorted((k, " ".join(v.split())) for k, v in self.parser[section].items())
            items = [(k, v) for k, v in items if v != ""]
            if not items:
                continue
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in items]
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def provenance(self, seed=None) -> dict:
        if seed is None:
            seed = self.getint("mcmc", "seed", 0)
        return {"config_hash": self.hash, "seed": seed, "version": __version__}

    def dump(self, path):
        """Write the effective configuration, provenance first."""
        head = "".join(f"# {k}: {v}\n" for k, v in self.provenance().items())
        Path(path).write_text(head + self.canonical())

    def to_text(self) -> str:
        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=None)
    p.optionxform = str  # keys are case sensitive (P, K, Q)
    return p


def _typed(cls, section, name):
    kw = {}
    types = {f.name: f.type for f in fields(cls)}
    for key, raw in dict(section).items():
        raw = raw.strip()
        if raw == "":
            continue
        t = str(types[key])
        where = f"[{name}] {key}"
        try:
            if "bool" in t:
                kw[key] = _bool(raw, where)
            elif "int" in t:
                kw[key] = int(raw)
            elif "float" in t:
                kw[key] = None if raw.lower() == "none" else float(raw)
            else:
                kw[key] = raw
        except ValueError:
            raise ConfigError(f"{where}: cannot read {raw!r}") from None
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None
