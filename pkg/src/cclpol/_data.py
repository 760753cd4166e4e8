"""Locating shipped assets and reading TOML configs."""
from __future__ import annotations

import os
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DATA_DIR = Path(__file__).resolve().parent / "data"
DEFAULT_MODEL = DATA_DIR / "models" / "b300_nvlink8.toml"


def resolve(path: str | os.PathLike, suffix: str | None = None) -> Path:
    """Find ``path`` as given, then under the shipped data directory.

    ``suffix`` is appended when the bare name does not exist, so
    ``models/b300_nvlink8`` finds ``models/b300_nvlink8.toml``.
    """
    p = Path(path)
    candidates = [p]
    if not p.is_absolute():
        candidates.append(DATA_DIR / p)
    if suffix and p.suffix != suffix:
        candidates += [c.with_name(c.name + suffix) for c in list(candidates)]
    for c in candidates:
        if c.is_file():
            return c
    raise FileNotFoundError(f"no such file: {path}")


def load_toml(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)
