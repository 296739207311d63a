"""Flat ``key = value`` run configuration, seed derivation and run manifests.

Config files hold one ``key = value`` per line; ``#`` starts a comment.
Any key can be overridden from the environment as ``NMFRISK_<KEY>`` with
dots replaced by double underscores (``synth.n_diagnosed`` ->
``NMFRISK_SYNTH__N_DIAGNOSED``).

Stage seeds are derived from the single master seed as the first 32-bit
word of ``numpy.random.SeedSequence([seed, crc32(stage)])``, masked to 31
bits.
"""
from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidParameterError

ENV_PREFIX = "NMFRISK_"

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "events": "",
    "labels": "",
    "synth": "false",
    "k": "9",
    "k_min": "2",
    "k_max": "15",
    "sweep_seeds": "1",
    "runs": "40",
    "max_iter": "200",
    "tol": "1e-4",
    "min_nnz": "5",
    "n_validation": "",
    "validation_fraction": "0.01",
    "epsilon": "1e-8",
    "prevalence_cohort": "all",
    "percentile_bounds": "50,90",
    "thresholds": "0.1,0.5,1.0",
    "repeats": "10",
    "folds": "5",
    "jaccard_k": "10,25,50,100",
    "high_band": "0.9",
    "low_band": "0.1",
    "threads": "0",
}

STAGES = ("synth", "split", "sweep", "rwc", "validate")


def derive_seed(seed: int, stage: str) -> int:
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParameterError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidParameterError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            out[name[len(ENV_PREFIX):].lower().replace("__", ".")] = value
    return out


def resolve_config(path=None, overrides=None, environ=None) -> dict[str, str]:
    """Defaults, then the file, then the environment, then explicit overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    cfg.update(env_overrides(environ))
    cfg.update(overrides or {})
    unknown = [k for k in cfg if k not in DEFAULTS and not k.startswith("synth.")]
    if unknown:
        raise InvalidParameterError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cfg


def get_int(cfg, key) -> int:
    try:
        return int(cfg[key])
    except ValueError:
        raise InvalidParameterError(f"{key}={cfg[key]!r} is not an integer") from None


def get_float(cfg, key) -> float:
    try:
        return float(cfg[key])
    except ValueError:
        raise InvalidParameterError(f"{key}={cfg[key]!r} is not a number") from None


def get_bool(cfg, key) -> bool:
    v = cfg[key].strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise InvalidParameterError(f"{key}={cfg[key]!r} is not a boolean")


def get_floats(cfg, key) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in cfg[key].split(",") if x.strip())
    except ValueError:
        raise InvalidParameterError(f"{key}={cfg[key]!r} is not a comma-separated number list") from None


def get_ints(cfg, key) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in cfg[key].split(",") if x.strip())
    except ValueError:
        raise InvalidParameterError(f"{key}={cfg[key]!r} is not a comma-separated integer list") from None


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    tool_version: str
    subcommand: str
    config: dict[str, str]
    seeds: dict[str, int] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    status: str = "incomplete"
    failed_stage: str | None = None
    message: str | None = None
    duration_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))
