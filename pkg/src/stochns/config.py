"""Sectioned key-value run configuration.

Sections: [truncation] [integrator] [noise] [certify] [experiment] [output].
Every key has a default, so an empty file is a valid configuration.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .integrator import SCHEMES, IntegratorConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "ESTIMATORS", "DEFAULT_ZETA"]

ESTIMATORS = ("moments", "bootstrap", "decay", "continuity", "occupation")

DEFAULT_ZETA = """
1,0,0 : 0,1,0 : 0.15
0,1,0 : 0,0,1 : 0.15
0,0,1 : 1,0,0 : 0.15
1,0,0 : 0,0,1 : 0.15"""

SCHEMA = {
    "truncation": {"n_max": "2"},
    "integrator": {
        "dt": "1e-3", "t_end": "1.0", "scheme": "exponential_geometric_em", "snapshot_stride": "10",
        "r_threshold": "inf", "seed": "7", "backend": "direct",
    },
    "noise": {
        "zeta": DEFAULT_ZETA, "alphas": "auto", "channels": "4", "gamma": "1.5", "rho_factor": "1.05",
    },
    "certify": {
        "samples": "1000", "fit_samples": "1000", "margin": "0.1", "n_ascent": "4",
        "slack_constant": "1.0", "g3_constant": "rho",
    },
    "experiment": {
        "estimator": "decay", "paths": "200", "x0_norm": "1.0", "x0_seed": "11", "x0_decay": "1.5",
        "check_times": "0.5, 1, 2, 4", "horizons": "2, 4, 8", "sizes": "0.1, 0.05, 0.025", "eps": "0.1",
        "p": "auto", "s": "0.5", "bins": "0, 0.05, 0.1, 0.25, 0.5, 1, 2, inf", "second_start_norm": "1.0",
        "direction_seed": "5",
    },
    "output": {"dir": "out", "snapshots": "false", "binary_snapshots": "false"},
}


class ConfigError(ValueError):
    """Malformed configuration; the message names the section, key and line."""


@dataclass
class RunConfig:
    n_max: int
    integrator: IntegratorConfig
    zeta: list
    alphas: list | None  # None means derive from the fitted constants
    channels: int
    gamma: float
    rho_factor: float
    cert_samples: int
    fit_samples: int
    margin: float
    n_ascent: int
    slack_constant: float
    g3_constant: float | None
    estimator: str
    paths: int
    x0_norm: float
    x0_seed: int
    x0_decay: float
    check_times: list
    horizons: list
    sizes: list
    eps: float
    p: float | None
    s: float
    bins: list
    second_start_norm: float
    direction_seed: int
    out_dir: str
    snapshots: bool
    binary_snapshots: bool
    echo: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.integrator.seed


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
        elif current == section and stripped.split("=", 1)[0].strip() == key:
            return n
    return None


class _Reader:
    def __init__(self, parser, text):
        self.p = parser
        self.text = text

    def fail(self, section, key, msg):
        line = _line_of(self.text, section, key)
        where = f"line {line}: " if line else ""
        raise ConfigError(f"{where}[{section}] {key}: {msg}")

    def raw(self, section, key):
        return self.p.get(section, key, fallback=SCHEMA[section][key]).strip()

    def number(self, section, key, kind=float, low=None, strict_low=False):
        value = self.raw(section, key)
        try:
            out = kind(float(value)) if kind is int else kind(value)
        except ValueError:
            self.fail(section, key, f"expected {kind.__name__}, got {value!r}")
        if kind is int and float(value) != int(float(value)):
            self.fail(section, key, f"expected an integer, got {value!r}")
        if low is not None and (out <= low if strict_low else out < low):
            self.fail(section, key, f"must be {'>' if strict_low else '>='} {low}, got {value!r}")
        return out

    def floats(self, section, key):
        value = self.raw(section, key)
        try:
            return [float(v) for v in value.replace("\n", ",").split(",") if v.strip()]
        except ValueError:
            self.fail(section, key, f"expected a comma-separated list of numbers, got {value!r}")

    def boolean(self, section, key):
        value = self.raw(section, key).lower()
        if value in ("1", "true", "yes", "on"):
            return True
        if value in ("0", "false", "no", "off"):
            return False
        self.fail(section, key, f"expected true/false, got {value!r}")

    def zeta(self):
        out = []
        if self.raw("noise", "zeta").lower() == "none":
            return out
        for row in self.raw("noise", "zeta").splitlines():
            row = row.strip()
            if not row:
                continue
            parts = [p.strip() for p in row.split(":")]
            try:
                k = tuple(int(v) for v in parts[0].split(","))
                theta = tuple(float(v) for v in parts[1].split(","))
                c = float(parts[2])
                if len(parts) != 3 or len(k) != 3 or len(theta) != 3:
                    raise ValueError
            except (ValueError, IndexError):
                self.fail("noise", "zeta", f"expected 'kx,ky,kz : tx,ty,tz : c', got {row!r}")
            out.append((k, theta, c))
        return out


def parse_config(text: str, seed: int | None = None, paths: int | None = None,
                 out_dir: str | None = None) -> RunConfig:
    """Parse configuration text; ``seed``, ``paths`` and ``out_dir`` override the file."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"line {_line_of(text, section, '') or '?'}: unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"line {_line_of(text, section, key) or '?'}: [{section}] unknown key {key!r}")
    r = _Reader(parser, text)

    scheme = r.raw("integrator", "scheme")
    if scheme not in SCHEMES:
        r.fail("integrator", "scheme", f"expected one of {SCHEMES}, got {scheme!r}")
    r_threshold = r.number("integrator", "r_threshold", float, 0.0, strict_low=True)
    integ = IntegratorConfig(
        dt=r.number("integrator", "dt", float, 0.0, strict_low=True),
        t_end=r.number("integrator", "t_end", float, 0.0),
        scheme=scheme,
        snapshot_stride=r.number("integrator", "snapshot_stride", int, 1),
        r_threshold=r_threshold,
        seed=int(seed) if seed is not None else r.number("integrator", "seed", int, 0),
        backend=r.raw("integrator", "backend"),
    )
    if integ.backend not in ("direct", "fft"):
        r.fail("integrator", "backend", f"expected direct or fft, got {integ.backend!r}")

    alphas_raw = r.raw("noise", "alphas")
    if alphas_raw.lower() == "auto":
        alphas = None
    elif alphas_raw.lower() == "none":
        alphas = []
    else:
        alphas = r.floats("noise", "alphas")
    gamma = r.number("noise", "gamma")
    if not 1.0 < gamma < 2.0:
        r.fail("noise", "gamma", f"must lie in (1, 2), got {gamma!r}")
    g3_raw = r.raw("certify", "g3_constant")
    g3 = None if g3_raw.lower() == "rho" else r.number("certify", "g3_constant", float, 0.0)
    p_raw = r.raw("experiment", "p")
    p = None if p_raw.lower() == "auto" else r.number("experiment", "p", float, 0.0, strict_low=True)
    estimator = r.raw("experiment", "estimator")
    if estimator not in ESTIMATORS:
        r.fail("experiment", "estimator", f"expected one of {ESTIMATORS}, got {estimator!r}")

    cfg = RunConfig(
        n_max=r.number("truncation", "n_max", int, 1),
        integrator=integ,
        zeta=r.zeta(),
        alphas=alphas,
        channels=r.number("noise", "channels", int, 1),
        gamma=gamma,
        rho_factor=r.number("noise", "rho_factor", float, 0.0),
        cert_samples=r.number("certify", "samples", int, 1),
        fit_samples=r.number("certify", "fit_samples", int, 1),
        margin=r.number("certify", "margin", float, 0.0),
        n_ascent=r.number("certify", "n_ascent", int, 0),
        slack_constant=r.number("certify", "slack_constant", float, 0.0),
        g3_constant=g3,
        estimator=estimator,
        paths=int(paths) if paths is not None else r.number("experiment", "paths", int, 2),
        x0_norm=r.number("experiment", "x0_norm", float, 0.0),
        x0_seed=r.number("experiment", "x0_seed", int, 0),
        x0_decay=r.number("experiment", "x0_decay", float),
        check_times=r.floats("experiment", "check_times"),
        horizons=r.floats("experiment", "horizons"),
        sizes=r.floats("experiment", "sizes"),
        eps=r.number("experiment", "eps", float, 0.0, strict_low=True),
        p=p,
        s=r.number("experiment", "s"),
        bins=r.floats("experiment", "bins"),
        second_start_norm=r.number("experiment", "second_start_norm", float, 0.0),
        direction_seed=r.number("experiment", "direction_seed", int, 0),
        out_dir=out_dir if out_dir is not None else r.raw("output", "dir"),
        snapshots=r.boolean("output", "snapshots"),
        binary_snapshots=r.boolean("output", "binary_snapshots"),
    )
    if cfg.paths < 1:
        raise ConfigError("paths must be >= 1")
    cfg.echo = _echo(parser, cfg)
    return cfg


def _echo(parser, cfg: RunConfig) -> list[str]:
    """Resolved key-value lines for every section, overrides applied.

    The output directory is left out: it does not affect any result, and
    leaving it out lets runs into different directories compare byte for byte.
    """
    lines = []
    overrides = {("integrator", "seed"): str(cfg.seed), ("experiment", "paths"): str(cfg.paths)}
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, default in keys.items():
            if (section, key) == ("output", "dir"):
                continue
            value = overrides.get((section, key), parser.get(section, key, fallback=default))
            value = " | ".join(v.strip() for v in value.strip().splitlines() if v.strip())
            lines.append(f"{key} = {value}")
    return lines


def load_config(path, **overrides) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    return parse_config(text, **overrides)

