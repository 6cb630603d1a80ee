"""CSV helpers shared by the module-level writers.

All floats are written with 17 significant digits so that a re-run with the
same configuration reproduces byte-identical files.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError

FLOAT_FMT = "%.17g"


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT % float(v)


def write_csv(path, header: list[str], columns: list[np.ndarray]) -> None:
    """Write columns of equal length under a comma-separated header."""
    n = len(columns[0])
    for c in columns:
        if len(c) != n:
            raise InvalidArgumentError("csv columns must have equal length")
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            fh.write(",".join(format_value(c[i]) for c in columns) + "\n")


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a CSV written by :func:`write_csv`; returns (header, values)."""
    with open(path, "r") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size and data.shape[1] != len(header):
        raise InvalidArgumentError(
            f"{path}: {data.shape[1]} columns but {len(header)} header fields"
        )
    return header, data
