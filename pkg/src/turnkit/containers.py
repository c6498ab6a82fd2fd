"""Binary feature containers.

One-line UTF-8 header followed by row-major little-endian float32 payload:

    TKFD1 rows=<T> cols=<C> rate_hz=<R> fields=<name[,name...]>\\n

``fields`` either names every column or gives a single block name for
homogeneous matrices (e.g. 768-D external speech features).
"""

from __future__ import annotations

import numpy as np

MAGIC = "TKFD1"


class ContainerFormatError(ValueError):
    pass


def write_feature_dump(path, data: np.ndarray, fields: list[str] | str,
                       rate_hz: float = 100.0) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("feature dump payload must be [rows, cols]")
    if isinstance(fields, str):
        fields = [fields]
    if len(fields) not in (1, data.shape[1]):
        raise ValueError("fields must name each column or give one block name")
    header = (
        f"{MAGIC} rows={data.shape[0]} cols={data.shape[1]} "
        f"rate_hz={rate_hz:g} fields={','.join(fields)}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(data.tobytes())


def read_feature_dump(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8").strip()
        parts = header.split(" ")
        if not parts or parts[0] != MAGIC:
            raise ContainerFormatError(f"{path}: bad magic in header {header!r}")
        meta = {}
        for token in parts[1:]:
            key, _, value = token.partition("=")
            meta[key] = value
        try:
            rows, cols = int(meta["rows"]), int(meta["cols"])
            rate = float(meta["rate_hz"])
        except (KeyError, ValueError) as exc:
            raise ContainerFormatError(f"{path}: malformed header {header!r}") from exc
        payload = fh.read()
    expected = rows * cols * 4
    if len(payload) != expected:
        raise ContainerFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    return data, {"rows": rows, "cols": cols, "rate_hz": rate,
                  "fields": meta.get("fields", "").split(",")}
