"""Readers and writers for the on-disk formats exchanged between stages.

* PFM: single-channel ``Pf`` float maps, little-endian (scale -1.0), rows
  stored bottom-up, invalid cells as NaN.
* PGM: binary ``P5`` 8-bit masks, nonzero means set.
* key=value text configs, ``#`` comments allowed.
* Floats in text files are written with ``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np


def fmt(x: float) -> str:
    """Shortest text form of ``x`` that round-trips as a 64-bit float."""
    return repr(float(x))


def write_pfm(path, values) -> None:
    data = np.asarray(values, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("PFM writer only supports single-channel 2D maps")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 3 if header == b"PF" else 1
        dims = fh.readline().split()
        while not dims:
            dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_pgm(path, mask) -> None:
    """Write a boolean (or 8-bit) grid as a binary PGM; booleans become 0/255."""
    arr = np.asarray(mask)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit PGM (P5 or P2) into a uint8 array."""
    raw = Path(path).read_bytes()
    # header tokens may be separated by arbitrary whitespace and comments
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    if magic == b"P5":
        data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    elif magic == b"P2":
        data = np.array(raw[pos:].split()[: w * h], dtype=np.uint8)
    else:
        raise ValueError(f"{path}: not a PGM file")
    return data.reshape(h, w).copy()


def read_mask(path) -> np.ndarray:
    return read_pgm(path) != 0


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_keyvalue(path, items: dict) -> None:
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_json(path, payload) -> None:
    # json uses repr for floats, which already round-trips
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_matrix(path, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    Path(path).write_text("\n".join(" ".join(fmt(v) for v in row) for row in M) + "\n")


def read_matrix(path) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array(rows, dtype=float)


def write_sparse(path, pixels, values, valid) -> None:
    """CSV of per-match values at their target pixels, full precision."""
    lines = ["u,v,value,valid"]
    for (u, v), val, ok in zip(np.asarray(pixels), np.asarray(values), np.asarray(valid)):
        lines.append(f"{fmt(u)},{fmt(v)},{fmt(val)},{int(bool(ok))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_sparse(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    pixels = np.array([[float(r["u"]), float(r["v"])] for r in rows]).reshape(-1, 2)
    values = np.array([float(r["value"]) for r in rows])
    valid = np.array([r["valid"] == "1" for r in rows], dtype=bool)
    return pixels, values, valid
