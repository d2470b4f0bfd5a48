"""Minimal 8-bit Netpbm codec (P5 greyscale, P6 RGB, P7 arbitrary depth)."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write(path, array):
    """Write a uint8 array of shape (H, W) or (H, W, C)."""
    a = np.ascontiguousarray(array)
    if a.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {a.dtype}")
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 2:
        header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = f"P6\n{a.shape[1]} {a.shape[0]}\n255\n"
    elif a.ndim == 3:
        header = (
            f"P7\nWIDTH {a.shape[1]}\nHEIGHT {a.shape[0]}\nDEPTH {a.shape[2]}\n"
            "MAXVAL 255\nTUPLTYPE GRAYSCALE\nENDHDR\n"
        )
    else:
        raise ValueError(f"cannot store array of shape {a.shape}")
    Path(path).write_bytes(header.encode("ascii") + a.tobytes())


def _tokens(data, start, n):
    """Read ``n`` whitespace-separated header tokens, skipping comments."""
    out, i = [], start
    while len(out) < n:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated pixmap header")
        out.append(data[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte precedes the raster


def read(path):
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic in (b"P5", b"P6"):
        (w, h, maxval), pos = _tokens(data, 2, 3)
        w, h = int(w), int(h)
        if int(maxval) != 255:
            raise ValueError("only 8-bit pixmaps are supported")
        depth = 1 if magic == b"P5" else 3
    elif magic == b"P7":
        end = data.index(b"ENDHDR\n") + len(b"ENDHDR\n")
        fields = dict(
            line.split(None, 1) for line in data[3:end].decode("ascii").splitlines() if " " in line
        )
        w, h, depth = int(fields["WIDTH"]), int(fields["HEIGHT"]), int(fields["DEPTH"])
        pos = end
    else:
        raise ValueError(f"{path}: not a binary Netpbm file")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * depth, offset=pos)
    return raster.reshape(h, w) if depth == 1 else raster.reshape(h, w, depth)
