"""Bundled benchmark fixtures (see README.md in this directory)."""

from importlib.resources import files

FIXTURES = ("ieee300", "gaslib40", "gaslib134", "path3", "star4")


def fixture_path(name: str):
    """Path of a bundled network fixture, e.g. ``fixture_path("ieee300")``."""
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; choose from {FIXTURES}")
    return files(__name__) / f"{name}.json"
