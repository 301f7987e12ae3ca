import json
from enum import Enum
from pathlib import Path
from typing import Any, Union

import numpy as np
from pydantic import BaseModel

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
SCENARIO_DIR = DATA_DIR / "scenarios"


class JSONEncoder(json.JSONEncoder):
    """Custom JSON encoder for numpy scalars and arrays, enums, paths and pydantic models."""

    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, Enum):
            return obj.value
        if isinstance(obj, Path):
            return str(obj)
        if isinstance(obj, BaseModel):
            return obj.model_dump(mode="json")
        return super().default(obj)


def ensure_dir(path: Path):
    """Ensure a directory exists."""
    path.mkdir(parents=True, exist_ok=True)


def read_json(path: Union[str, Path]) -> Any:
    """Read data from a JSON file."""
    with open(path, "r") as f:
        return json.load(f)


def write_json(path: Union[str, Path], data: Any):
    """Write data to a JSON file, creating the parent directory."""
    path = Path(path)
    ensure_dir(path.parent)
    with open(path, "w") as f:
        json.dump(data, f, cls=JSONEncoder, indent=2)
        f.write("\n")
