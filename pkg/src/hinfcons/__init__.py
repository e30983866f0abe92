"""Synthesis and validation of distributed H-infinity consensus observers over Markov-switching networks."""

from pathlib import Path

__version__ = "0.1.0"

DATA_DIR = Path(__file__).parent / "data"


def example_config_path(name: str = "chua5.json") -> Path:
    return DATA_DIR / name
