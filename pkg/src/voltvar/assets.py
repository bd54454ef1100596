"""Access to the bundled case, profile, and scenario configuration."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def data_path(name: str) -> Path:
    """Filesystem path of a bundled data file."""
    return Path(resources.files("voltvar").joinpath("data", name))


def bundled_case_path() -> Path:
    return data_path("ieee33_3ph.json")


def bundled_profile_path() -> Path:
    return data_path("day_fragment.csv")


def bundled_config_path() -> Path:
    return data_path("scenario_fragment.json")
