"""Report serialization: canonical JSON and CSV with 17-digit numbers.

Reports must be byte-for-byte reproducible for a given config, so floats
are rendered with a fixed 17-significant-digit format, keys are sorted,
and nothing time- or environment-dependent is written.
"""

from __future__ import annotations

import numpy as np

__all__ = ["format_number", "canonical_json", "write_json", "write_csv", "check_entry"]


def format_number(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    f = float(v)
    if f != f or f in (float("inf"), float("-inf")):
        return f'"{f}"'
    return f"{f:.17g}"


def canonical_json(obj, indent: int = 0) -> str:
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        parts = [
            f'{inner}"{k}": {canonical_json(obj[k], indent + 1)}'
            for k in sorted(obj, key=str)
        ]
        return "{\n" + ",\n".join(parts) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(np.asarray(obj).tolist()) if isinstance(obj, np.ndarray) else list(obj)
        if not seq:
            return "[]"
        parts = [f"{inner}{canonical_json(v, indent + 1)}" for v in seq]
        return "[\n" + ",\n".join(parts) + f"\n{pad}]"
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return '"' + obj.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return format_number(obj)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(obj) + "\n")


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(
                format_number(v) if not isinstance(v, str) else v for v in row
            ) + "\n")


def check_entry(name: str, value: float, tolerance: float, passed: bool) -> dict:
    """One quantitative claim: the value, the tolerance it was judged
    against, and the verdict."""
    return {"check": name, "value": value, "tolerance": tolerance, "passed": bool(passed)}
