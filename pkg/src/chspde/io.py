"""Output writers.  Every file is written to a temporary sibling and renamed into place."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

__all__ = [
    "atomic_write",
    "provenance",
    "write_error_csv",
    "read_error_csv",
    "write_plot",
    "write_json",
    "write_snapshots",
    "read_snapshots",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("path_index", "N", "dt", "norm", "error", "seed")
FIELD_HEADER = struct.Struct("<4sIQQIIQdd32s")
SNAPSHOT_MAGIC = b"CHXS"


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temp file and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def provenance(config_hash, seed, command):
    from . import __version__

    return {"tool": "chspde", "version": __version__, "config_sha256": config_hash, "seed": int(seed),
            "command": command}


def _header_line(prov):
    return "# " + " ".join(f"{k}={v}" for k, v in prov.items()) + "\n"


def write_error_csv(path, rows, prov):
    """Raw per-path errors, one row per (path, rung, norm); floats in shortest round-trip form."""
    lines = [_header_line(prov), ",".join(CSV_COLUMNS) + "\n"]
    for i, N, dt, norm, err, seed in rows:
        lines.append(f"{int(i)},{int(N)},{float(dt)!r},{norm},{float(err)!r},{int(seed)}\n")
    return atomic_write(path, "".join(lines))


def read_error_csv(path):
    """Rows of a file written by :func:`write_error_csv` as tuples with typed fields."""
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("path_index"):
                continue
            i, N, dt, norm, err, seed = line.strip().split(",")
            rows.append((int(i), int(N), float(dt), norm, float(err), int(seed)))
    return rows


def write_plot(path, data, prov, note=""):
    """Two whitespace-separated columns ``log10_scale log10_error``."""
    lines = [_header_line(prov)]
    if note:
        lines.append(f"# {note}\n")
    lines.append("# log10_scale log10_error\n")
    for x, y in np.asarray(data, dtype=float).tolist():
        lines.append(f"{x!r} {y!r}\n")
    return atomic_write(path, "".join(lines))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, payload, prov):
    body = {"provenance": prov, **payload}
    return atomic_write(path, json.dumps(_jsonable(body), indent=2, sort_keys=False) + "\n")


def write_snapshots(path, X, times, meta):
    """Binary field file: fixed header, float64 times, then float64 coefficients mode-major.

    ``meta`` supplies seed, path_index, N, d, dt, L and config_sha256 (hex).
    """
    X = np.asarray(X, dtype=float)
    header = FIELD_HEADER.pack(
        SNAPSHOT_MAGIC, 1, int(meta["seed"]) & 0xFFFFFFFFFFFFFFFF, int(meta["path_index"]), int(meta["N"]),
        int(meta["d"]), X.shape[0], float(meta["dt"]), float(meta["L"]), bytes.fromhex(meta["config_sha256"]),
    )
    body = np.asarray(times, dtype="<f8").tobytes() + np.ascontiguousarray(X.T, dtype="<f8").tobytes()
    return atomic_write(path, header + body)


def read_snapshots(path):
    """Inverse of :func:`write_snapshots`: ``(header dict, times, X)``."""
    raw = Path(path).read_bytes()
    magic, version, seed, path_index, N, d, n, dt, L, digest = FIELD_HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError("not a snapshot file")
    off = FIELD_HEADER.size
    times = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
    n_modes = (N + 1) ** d
    X = np.frombuffer(raw, dtype="<f8", offset=off + 8 * n).reshape(n_modes, n).T
    header = dict(version=version, seed=seed, path_index=path_index, N=N, d=d, n_snapshots=n, dt=dt, L=L,
                  config_sha256=digest.hex())
    return header, times, X
