"""Bundled scenario files."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files(__name__).iterdir()
                  if p.name.endswith(".toml"))


def path(name: str) -> Path:
    p = resources.files(__name__) / f"{name}.toml"
    if not p.is_file():
        raise KeyError(f"no bundled scenario {name!r}; have {', '.join(names())}")
    return Path(str(p))
