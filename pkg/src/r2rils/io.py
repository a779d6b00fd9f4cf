"""Text formats: observation triplets, factor files, key=value configs, CSV."""

from __future__ import annotations

import csv
import math
import os
import re

import numpy as np

from .model import ObservedMatrix


class FormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, msg, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {msg}" if where else msg)


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            s = raw.strip()
            if not s or s.startswith("%"):
                continue
            yield lineno, s.split()


def read_triplets(path) -> ObservedMatrix:
    """Read ``m n nnz`` followed by ``nnz`` lines ``i j value`` (1-based)."""
    lines = _data_lines(path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise FormatError("empty file, expected header 'm n nnz'", path) from None
    if len(head) != 3:
        raise FormatError("header must be 'm n nnz'", path, lineno)
    try:
        m, n, nnz = (int(tok) for tok in head)
    except ValueError:
        raise FormatError(f"header must contain three integers, got {' '.join(head)!r}", path, lineno) from None
    if m < 1 or n < 1 or nnz < 0:
        raise FormatError("dimensions must be positive and nnz nonnegative", path, lineno)

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz)
    seen = {}
    count = 0
    for lineno, tok in lines:
        if count == nnz:
            raise FormatError(f"more than {nnz} entries", path, lineno)
        if len(tok) != 3:
            raise FormatError("entry must be 'i j value'", path, lineno)
        try:
            i, j = int(tok[0]), int(tok[1])
        except ValueError:
            raise FormatError(f"malformed index in {' '.join(tok)!r}", path, lineno) from None
        try:
            x = float(tok[2])
        except ValueError:
            raise FormatError(f"malformed number {tok[2]!r}", path, lineno) from None
        if not math.isfinite(x):
            raise FormatError(f"non-finite value {tok[2]!r}", path, lineno)
        if not (1 <= i <= m and 1 <= j <= n):
            raise FormatError(f"index ({i}, {j}) out of range for {m}x{n}", path, lineno)
        if (i, j) in seen:
            raise FormatError(f"duplicate entry ({i}, {j}), first seen on line {seen[i, j]}", path, lineno)
        seen[i, j] = lineno
        rows[count], cols[count], vals[count] = i - 1, j - 1, x
        count += 1
    if count != nnz:
        raise FormatError(f"header announces {nnz} entries, found {count}", path)
    return ObservedMatrix(m, n, rows, cols, vals)


def write_triplets(obs: ObservedMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{obs.m} {obs.n} {obs.nnz}\n")
        for i, j, x in zip(obs.rows.tolist(), obs.cols.tolist(), obs.values.tolist()):
            fh.write(f"{i + 1} {j + 1} {x!r}\n")


def write_factors(path, left, s, right, comment=None) -> None:
    """Factored matrix ``left diag(s) right^T``: header ``m n r``, then s, left rows, right rows."""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    s = np.asarray(s, dtype=float).ravel()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if comment:
            fh.write(f"% {comment}\n")
        fh.write(f"{left.shape[0]} {right.shape[0]} {s.size}\n")
        fh.write(" ".join(repr(x) for x in s.tolist()) + "\n")
        for row in left.tolist():
            fh.write(" ".join(repr(x) for x in row) + "\n")
        for row in right.tolist():
            fh.write(" ".join(repr(x) for x in row) + "\n")


def read_factors(path):
    lines = list(_data_lines(path))
    if not lines:
        raise FormatError("empty factor file", path)
    try:
        m, n, r = (int(t) for t in lines[0][1])
        body = [[float(t) for t in tok] for _, tok in lines[1:]]
    except ValueError as exc:
        raise FormatError(f"malformed factor file ({exc})", path) from None
    if len(body) != 1 + m + n or any(len(row) != r for row in body):
        raise FormatError(f"expected 1 + {m} + {n} rows of {r} values", path)
    return np.array(body[1 : 1 + m]).reshape(m, r), np.array(body[0]), np.array(body[1 + m :]).reshape(n, r)


_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def parse_config_lines(lines, source="<config>") -> dict:
    """Flat ``key = value`` pairs; ``#`` starts a comment; later keys win."""
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        s = raw.split("#", 1)[0].strip()
        if not s:
            continue
        key, sep, value = s.partition("=")
        key = key.strip()
        if not sep or not _KEY.match(key):
            raise FormatError(f"expected 'key = value', got {raw.strip()!r}", source, lineno)
        out[key] = value.strip()
    return out


def read_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_lines(fh, source=str(path))


def format_number(x) -> str:
    """CSV number format: integers verbatim, scientific notation below 1e-3 in magnitude."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x != 0 and abs(x) < 1e-3:
        return f"{x:.16e}"
    return repr(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else format_number(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
