"""Versioned checkpoint container shared by the field and the refiner.

One ``.npz`` file per checkpoint. A JSON header (stored as a zero-d string
array under ``__header__``) records the format version, the section kind
("field" or "refiner"), the architecture config, and the RNG seed; every
other entry is a float64 weight array. Round-trip equality is exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError", "FORMAT_VERSION"]


class CheckpointError(ValueError):
    """Unreadable, unversioned, or wrong-kind checkpoint file."""


def save_checkpoint(path, kind: str, config: dict, arrays: dict[str, np.ndarray],
                    seed: int) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "seed": int(seed),
    }
    payload = {"__header__": np.asarray(json.dumps(header))}
    for name, arr in arrays.items():
        if name == "__header__":
            raise CheckpointError("array name '__header__' is reserved")
        payload[name] = np.asarray(arr, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path, expect_kind: str | None = None
                    ) -> tuple[dict, dict[str, np.ndarray], int]:
    """Returns (config, arrays, seed); validates version and kind."""
    try:
        with np.load(path, allow_pickle=False) as data:
            if "__header__" not in data:
                raise CheckpointError(f"{path}: missing checkpoint header")
            header = json.loads(str(data["__header__"]))
            arrays = {k: data[k] for k in data.files if k != "__header__"}
    except (OSError, ValueError, json.JSONDecodeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path}: expected a '{expect_kind}' checkpoint, got '{kind}'")
    return header["config"], arrays, int(header.get("seed", 0))
