"""
Plot-ready CSV and JSON artifacts.

Every CSV gets a ``<name>.csv.meta.json`` sidecar holding the hash of the
configuration that produced it and the tool version. Nothing time-dependent is
written, so reruns with the same configuration are byte-identical.
"""

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .exceptions import InvalidArgumentError
from .tomography import PovmMatrix

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def tool_version() -> str:
    from . import __version__

    return __version__


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(config: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _format(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_json(path: PathLike, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    logger.debug(f"Wrote {path}")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise InvalidArgumentError(f"{path} is empty")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(f"{path} is not valid JSON: {e}") from e


def write_csv(
    path: PathLike,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    config: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write a headed CSV and its provenance sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(v) for v in row])
    meta = {
        "config_hash": config_hash(config or {}),
        "tool_version": tool_version(),
        "columns": list(header),
    }
    write_json(path.with_name(path.name + ".meta.json"), meta)
    logger.debug(f"Wrote {path}")
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    path = Path(path)
    with path.open(newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise InvalidArgumentError(f"{path} has no data rows")
    return rows


def write_matrix(
    path: PathLike,
    values: NDArray[np.float64],
    row_label: str,
    column_prefix: str,
    config: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Matrix as CSV: one labelled row per first index, one column per second."""
    values = np.asarray(values, dtype=float)
    header = [row_label] + [f"{column_prefix}{j}" for j in range(values.shape[1])]
    rows = ([i, *row] for i, row in enumerate(values))
    return write_csv(path, header, rows, config)


def read_matrix(path: PathLike) -> NDArray[np.float64]:
    """Inverse of :func:`write_matrix`; the first column is the row label."""
    rows = read_csv(path)
    columns = list(rows[0].keys())[1:]
    if not columns:
        raise InvalidArgumentError(f"{path} has no value columns")
    try:
        return np.array([[float(row[c]) for c in columns] for row in rows])
    except (TypeError, ValueError) as e:
        raise InvalidArgumentError(f"{path} contains a non-numeric entry: {e}") from e


def write_povm(
    stem: PathLike,
    povm: PovmMatrix,
    metadata: Mapping[str, Any],
    config: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write ``<stem>.csv`` (rows k, columns n) and ``<stem>.json`` with metadata."""
    stem = Path(stem)
    csv_path = write_matrix(
        stem.with_suffix(".csv"), povm.values, "k", "n", config=config
    )
    write_json(
        stem.with_suffix(".json"),
        {
            "n_pixels": povm.n_pixels,
            "truncation": povm.truncation,
            "values": povm.values.tolist(),
            **metadata,
        },
    )
    return csv_path


def read_povm(path: PathLike) -> PovmMatrix:
    """Load a POVM from its CSV or JSON form."""
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"POVM file {path} does not exist")
    if path.suffix == ".json":
        data = read_json(path)
        if "values" not in data:
            raise InvalidArgumentError(f"{path} carries no POVM values")
        return PovmMatrix(np.asarray(data["values"], dtype=float))
    return PovmMatrix(read_matrix(path))
