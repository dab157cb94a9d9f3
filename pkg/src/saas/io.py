"""File formats: PGM maps and masks, raw f64 matrices, attention traces, CSV curves, manifests."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

from .backbone import AttentionTrace


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write(path, canonical_json(obj))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# -- PGM ---------------------------------------------------------------------


def quantize(grid: np.ndarray, maxval: int = 65535) -> np.ndarray:
    """Values in [0, 1] to integers ``round(v * maxval)``, halves rounded up."""
    v = np.clip(np.asarray(grid, dtype=float), 0.0, 1.0)
    return np.floor(v * maxval + 0.5).astype(np.int64)


def encode_pgm(pixels: np.ndarray, maxval: int, binary: bool = True) -> bytes:
    pixels = np.asarray(pixels, dtype=np.int64)
    if pixels.ndim != 2:
        raise ValueError("PGM needs a 2-D grid")
    if not 1 <= maxval <= 65535:
        raise ValueError("maxval must lie in [1, 65535]")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise ValueError("pixel values outside [0, maxval]")
    h, w = pixels.shape
    if binary:
        header = f"P5\n{w} {h}\n{maxval}\n".encode()
        dtype = ">u2" if maxval > 255 else "u1"
        return header + pixels.astype(dtype).tobytes()
    lines = [f"P2\n{w} {h}\n{maxval}"]
    lines += [" ".join(str(int(p)) for p in row) for row in pixels]
    return ("\n".join(lines) + "\n").encode()


def decode_pgm(data: bytes) -> tuple[np.ndarray, int]:
    """Parse P2 or P5 (8- or 16-bit). Returns ``(pixels, maxval)``."""
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"not a PGM file (magic {magic!r})")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    if magic == b"P5":
        pos += 1  # single whitespace byte ends the header
        dtype = ">u2" if maxval > 255 else "u1"
        n = w * h * np.dtype(dtype).itemsize
        pixels = np.frombuffer(data[pos : pos + n], dtype=dtype).astype(np.int64)
    else:
        body = [ln.split(b"#")[0] for ln in data[pos:].splitlines()]
        pixels = np.array([int(t) for ln in body for t in ln.split()], dtype=np.int64)
    if pixels.size != w * h:
        raise ValueError(f"PGM payload has {pixels.size} values, expected {w * h}")
    return pixels.reshape(h, w), maxval


def write_map_pgm(path, normalized: np.ndarray, binary: bool = True) -> None:
    """A [0, 1] map as a 16-bit PGM."""
    atomic_write(path, encode_pgm(quantize(normalized, 65535), 65535, binary))


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """A boolean mask as an ASCII PGM with maxval 1."""
    atomic_write(path, encode_pgm(np.asarray(mask, dtype=np.int64), 1, binary=False))


def read_pgm(path) -> np.ndarray:
    """Pixels scaled back to [0, 1]."""
    pixels, maxval = decode_pgm(Path(path).read_bytes())
    return pixels / maxval


# -- raw matrices and traces ---------------------------------------------------


def encode_matrix(m: np.ndarray) -> bytes:
    m = np.asarray(m, dtype="<f8")
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    return struct.pack("<QQ", *m.shape) + np.ascontiguousarray(m).tobytes()


def decode_matrix(data: bytes) -> np.ndarray:
    rows, cols = struct.unpack_from("<QQ", data)
    body = np.frombuffer(data, dtype="<f8", offset=16)
    if body.size != rows * cols:
        raise ValueError(f"matrix payload has {body.size} values, header says {rows}x{cols}")
    return body.reshape(rows, cols).astype(float)


def write_matrix(path, m: np.ndarray) -> None:
    atomic_write(path, encode_matrix(m))


def read_matrix(path) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())


def save_trace(trace: AttentionTrace, directory) -> list[dict]:
    """One matrix file per (step, layer, head) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in trace.records():
        name = f"s{rec.step:03d}_l{rec.layer:02d}_h{rec.head:02d}.f64"
        write_matrix(directory / name, rec.matrix)
        rows, cols = rec.matrix.shape
        entries.append(
            {"step": rec.step, "layer": rec.layer, "head": rec.head,
             "rows": rows, "cols": cols, "dtype": "f64", "file": name}
        )
    write_json(directory / "manifest.json", entries)
    return entries


def load_trace(directory, steps: Iterable[int] | None = None) -> AttentionTrace:
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no attention trace in {directory}")
    wanted = None if steps is None else set(steps)
    heads: dict[tuple[int, int], dict[int, np.ndarray]] = {}
    for e in read_json(manifest):
        if wanted is not None and e["step"] not in wanted:
            continue
        m = read_matrix(directory / e["file"])
        if m.shape != (e["rows"], e["cols"]):
            raise ValueError(f"{e['file']}: shape {m.shape} disagrees with manifest")
        heads.setdefault((e["step"], e["layer"]), {})[e["head"]] = m
    trace = AttentionTrace()
    for (step, layer), by_head in sorted(heads.items()):
        trace.add(step, layer, np.stack([by_head[h] for h in sorted(by_head)]))
    return trace


# -- CSV -----------------------------------------------------------------------


def curve_csv(rows: Iterable[tuple[int, float]], header=("parameter", "similarity")) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for p, s in rows:
        writer.writerow([p, repr(float(s))])
    return buf.getvalue()


def read_curve_csv(path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(int(p), float(s)) for p, s in reader]
