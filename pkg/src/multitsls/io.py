"""JSON and CSV serialisation for designs, populations and datasets."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

from .design import Dataset, InstrumentDesign, Population, TreatmentCoding
from .errors import ValidationError

Z_PREFIX = "z_"
RESERVED = {"y", "t", "weight"}


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def load_population(path) -> Population:
    return Population.from_dict(read_json(path))


def load_design(path) -> InstrumentDesign:
    return InstrumentDesign.from_dict(read_json(path))


def load_coding(path_or_dict) -> TreatmentCoding:
    data = read_json(path_or_dict) if not isinstance(path_or_dict, dict) else path_or_dict
    return TreatmentCoding.from_dict(data.get("coding", data))


def dataset_to_frame(data: Dataset, cell_column: str = "cell") -> pd.DataFrame:
    cols = {"y": data.y, "t": data.t}
    for j in range(data.m):
        cols[f"{Z_PREFIX}{j + 1}"] = data.z[:, j]
    if data.x_cell is not None:
        cols[cell_column] = data.x_cell
    for name, flag in data.flags.items():
        cols[name] = flag.astype(np.int64)
    if data.weights is not None:
        cols["weight"] = data.weights
    return pd.DataFrame(cols)


def write_dataset(data: Dataset, path, cell_column: str = "cell") -> None:
    dataset_to_frame(data, cell_column).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_dataset(path, cell_column: str | None = None) -> Dataset:
    """Read a CSV with columns y, t, z_* and optional cell, flag and weight columns.

    Every other column is treated as a 0/1 flag.
    """
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    missing = {"y", "t"} - set(frame.columns)
    if missing:
        raise ValidationError(f"{path}: missing columns {sorted(missing)}")
    zcols = sorted((c for c in frame.columns if c.startswith(Z_PREFIX)), key=_z_order)
    if not zcols:
        raise ValidationError(f"{path}: no instrument columns (prefix {Z_PREFIX!r})")
    if cell_column is not None and cell_column not in frame.columns:
        raise ValidationError(f"{path}: no cell column {cell_column!r}")
    cells = frame[cell_column].to_numpy() if cell_column else None
    flags = {}
    for col in frame.columns:
        if col in RESERVED or col in zcols or col == cell_column:
            continue
        vals = frame[col].to_numpy()
        if not np.all(np.isin(vals, (0, 1))):
            continue
        flags[col] = vals.astype(bool)
    weights = frame["weight"].to_numpy() if "weight" in frame.columns else None
    return Dataset(frame["y"].to_numpy(), frame["t"].to_numpy(), frame[zcols].to_numpy(), cells, flags, weights)


def _z_order(name: str):
    tail = name[len(Z_PREFIX) :]
    return (0, int(tail), "") if tail.isdigit() else (1, 0, tail)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(payload: dict) -> str:
    return hashlib.sha256(dumps(payload).encode()).hexdigest()


def write_text(path: Path, text: str, force: bool) -> None:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
