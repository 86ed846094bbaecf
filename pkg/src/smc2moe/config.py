"""Run configuration: INI file sections plus command-line overrides.

The file is flat key = value text with one section per concern::

    [data]
    generator = synth2
    N = 150
    data_seed = 0

    [model]
    K = 7
    alpha = 1.0

    [smc2]
    J = 100
    M = 30

Every key is also a command-line flag (``--alpha 0.1``); flags win.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError

SECTIONS = {
    "data": ("generator", "N", "data_seed", "csv", "D", "normalization"),
    "model": ("K", "alpha"),
    "smc2": ("J", "M", "eta", "delta", "max_mcmc_steps", "proposal_scale"),
    "is": ("is_J", "is_budget", "map_starts", "map_iter"),
    "predictive": ("nx", "ny", "x_dim"),
    "run": ("method", "seed", "workers", "out"),
}


@dataclass
class RunConfig:
    generator: str | None = None
    N: int = 300
    data_seed: int | None = None
    csv: str | None = None
    D: int = 1
    normalization: str | None = None
    K: int = 7
    alpha: float = 1.0
    J: int = 100
    M: int = 30
    eta: float = 0.9
    delta: float = 0.05
    max_mcmc_steps: int = 10
    proposal_scale: float = 1.0
    is_J: int = 1000
    is_budget: int | None = None
    map_starts: int = 5
    map_iter: int = 200
    nx: int = 200
    ny: int = 4000
    x_dim: int = 0
    method: str = "smc2"
    seed: int = 0
    workers: int = 1
    out: str = "out"

    def validate(self) -> "RunConfig":
        positive = ("N", "D", "K", "J", "M", "max_mcmc_steps", "is_J", "map_starts", "map_iter", "nx", "ny", "workers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.ny < 2 or self.nx < 1:
            raise ConfigError("grid sizes must be at least 2 (y) and 1 (x)")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not 0 < self.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")
        if not self.delta > 0 or not self.proposal_scale > 0:
            raise ConfigError("delta and proposal_scale must be positive")
        if self.method not in ("smc2", "is"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method == "smc2" and (self.J < 2 or self.M < 2):
            raise ConfigError("smc2 needs J >= 2 and M >= 2")
        if self.method == "is" and self.is_budget is None and self.is_J < 2:
            raise ConfigError("is needs at least 2 particles")
        if self.seed < 0 or (self.data_seed is not None and self.data_seed < 0):
            raise ConfigError("seeds must be non-negative")
        if not 0 <= self.x_dim < self.D:
            raise ConfigError("x_dim must index an input dimension")
        return self

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def echo(self) -> dict:
        return asdict(self)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    t = str(_TYPES[name])
    if raw.strip().lower() in ("", "none") and "None" in t:
        return None
    try:
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw.strip()


def read_ini(path) -> dict:
    """Key/value overrides from an INI file, validated against the known sections."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep N, K, J, M, D upper case
    cp.read(path)
    out = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            out[key] = _coerce(key, raw)
    return out


def build_config(ini_path=None, **overrides) -> RunConfig:
    values = read_ini(ini_path) if ini_path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown settings: {sorted(unknown)}")
    return RunConfig(**values).validate()
