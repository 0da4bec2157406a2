"""Bundled transmission test cases in MATPOWER case-file format."""

from importlib import resources
from pathlib import Path

_NAMES = ("case9", "case14", "case30", "case57")


def available() -> tuple[str, ...]:
    """Names of the bundled cases."""
    return _NAMES


def case_path(name: str) -> Path:
    """Filesystem path of a bundled case file, e.g. ``case_path("case9")``."""
    stem = name[:-2] if name.endswith(".m") else name
    if stem not in _NAMES:
        raise KeyError(f"no bundled case named {name!r}; available: {', '.join(_NAMES)}")
    return Path(str(resources.files(__package__).joinpath(f"{stem}.m")))


def case_text(name: str) -> str:
    """Raw text of a bundled case file."""
    return case_path(name).read_text()
