import csv
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

from errors import ConfigError


def get_output_path(output_dir, file_name: str) -> Path:
    """Path of ``file_name`` inside ``output_dir``, creating the folder."""
    folder = Path(output_dir)
    folder.mkdir(parents=True, exist_ok=True)
    return folder / file_name


def dumps(doc) -> str:
    # sorted keys and a fixed indent keep reruns byte-identical
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc))
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e


def write_csv(path, header: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=list(header), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def resolve_path(value: str, base_dir) -> str:
    """Keep ``value`` if it exists as given, else look next to ``base_dir``."""
    if os.path.exists(value) or base_dir is None:
        return value
    candidate = Path(base_dir) / value
    return str(candidate) if candidate.exists() else value


def format_ms(t: float) -> str:
    return f"{t:.3f} ms"
