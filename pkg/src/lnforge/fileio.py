"""Header-line + raw little-endian payload container shared by every on-disk artifact.

Layout: one UTF-8 JSON object terminated by ``\\n``, immediately followed by the
raw payload bytes. Volumes, codecs and network checkpoints all use it.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class FormatError(ValueError):
    """A file does not conform to the expected header/payload layout.

    ``field`` names the offending header key (or ``"payload"``).
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def write_record(path: str | Path, header: dict, payload: np.ndarray, dtype: str = "f32") -> None:
    header = dict(header)
    header.setdefault("dtype", dtype)
    line = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")
    data = np.ascontiguousarray(payload, dtype=DTYPES[header["dtype"]]).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(line + b"\n")
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_record(path: str | Path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("header", "missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("header", f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header", "header is not a JSON object")
    dtype = header.get("dtype")
    if dtype not in DTYPES:
        raise FormatError("dtype", f"unsupported dtype {dtype!r}")
    body = raw[nl + 1:]
    itemsize = DTYPES[dtype].itemsize
    if len(body) % itemsize:
        raise FormatError("payload", "payload length mismatch")
    return header, np.frombuffer(body, dtype=DTYPES[dtype]).copy()


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def json_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
