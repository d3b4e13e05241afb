"""Access to the data files shipped inside the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def data_path(name: str) -> Path:
    return Path(resources.files("scenebench") / "data" / name)


def schema_path(name: str) -> Path:
    return Path(resources.files("scenebench") / "schemas" / name)


def default_templates_path() -> Path:
    return data_path("templates.json")


def default_vocab_path() -> Path:
    return data_path("base_vocab_freq.tsv")
