"""File formats: BFG1 feature grids, radar CSV, key=value configs, checkpoints, PGM/PPM.

All binary formats are little-endian. Feature values are 32-bit IEEE-754
floats regardless of the in-memory dtype used during computation.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

BFG_MAGIC = b"BFG1"
SECTIONS_MAGIC = b"NSC1"


# ---------------------------------------------------------------------------
# BFG1: dense feature grid / volume container
# ---------------------------------------------------------------------------

def write_bfg(path: str | Path, array: np.ndarray) -> None:
    """Write a C x Z x H x W float array as a BFG1 file.

    Layout: magic 'BFG1', u32 C, Z, H, W, then C*Z*H*W float32 values in
    C-major, then Z, then row, then column order.
    """
    arr = np.asarray(array)
    if arr.ndim != 4:
        raise ValueError(f"BFG1 array must be 4-d (C,Z,H,W), got shape {arr.shape}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(BFG_MAGIC)
        fh.write(struct.pack("<4I", *arr.shape))
        fh.write(data.tobytes())


def read_bfg(path: str | Path) -> np.ndarray:
    """Read a BFG1 file into a float32 array of shape (C, Z, H, W)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != BFG_MAGIC:
        raise ValueError(f"{path}: not a BFG1 file (bad magic)")
    c, z, h, w = struct.unpack_from("<4I", blob, 4)
    count = c * z * h * w
    expected = 20 + 4 * count
    if len(blob) != expected:
        raise ValueError(
            f"{path}: truncated BFG1 payload (expected {expected} bytes, got {len(blob)})"
        )
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=20)
    return flat.reshape(c, z, h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# Radar point CSV
# ---------------------------------------------------------------------------

CSV_HEADER = "x,y,z,rcs,vx,vy"
_CSV_FIELDS = CSV_HEADER.split(",")


def save_points_csv(path: str | Path, rows) -> None:
    """Write radar points (iterable of 6-tuples or RadarPoint) as CSV."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in tuple(row)) + "\n")


def load_points_csv(path: str | Path) -> list[tuple[float, ...]]:
    """Parse a radar CSV into a list of (x, y, z, rcs, vx, vy) tuples.

    Errors carry the offending 1-based line number.
    """
    out: list[tuple[float, ...]] = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}:1: expected header '{CSV_HEADER}', got '{header}'")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(_CSV_FIELDS):
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                values = tuple(float(p) for p in parts)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed float ({exc})") from None
            if not all(np.isfinite(v) for v in values):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            out.append(values)
    return out


# ---------------------------------------------------------------------------
# Flat key=value text files
# ---------------------------------------------------------------------------

def save_kv(path: str | Path, mapping: dict) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for key in sorted(mapping):
            fh.write(f"{key}={mapping[key]}\n")


def load_kv(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# Named-section parameter container (checkpoints)
# ---------------------------------------------------------------------------

def write_sections(path: str | Path, sections: dict[str, np.ndarray]) -> None:
    """Write named float arrays: per section a u32-length utf8 name, u32 rank,
    u32 dims, then float32 little-endian payload."""
    with open(path, "wb") as fh:
        fh.write(SECTIONS_MAGIC)
        for name in sections:
            arr = np.ascontiguousarray(sections[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_sections(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SECTIONS_MAGIC:
        raise ValueError(f"{path}: not a checkpoint container (bad magic)")
    sections: dict[str, np.ndarray] = {}
    offset = 4
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank > 0 else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        sections[name] = arr.reshape(shape).astype(np.float32)
    return sections


# ---------------------------------------------------------------------------
# PGM / PPM image export
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a single-channel map as binary PGM, min-max normalized to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM image must be 2-d, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.astype(np.uint8).tobytes())


# Fixed class-id palette; index i colours class id i (mod palette size).
PALETTE: tuple[tuple[int, int, int], ...] = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 190),
    (0, 128, 128),
    (170, 110, 40),
    (128, 0, 0),
    (170, 255, 195),
    (128, 128, 0),
    (255, 215, 180),
    (0, 0, 128),
)


def write_ppm(path: str | Path, class_ids: np.ndarray) -> None:
    """Write a 2-d class-id map as a binary PPM using the fixed palette."""
    ids = np.asarray(class_ids)
    if ids.ndim != 2:
        raise ValueError(f"PPM class map must be 2-d, got shape {ids.shape}")
    palette = np.asarray(PALETTE, dtype=np.uint8)
    rgb = palette[ids.astype(np.int64) % len(PALETTE)]
    h, w = ids.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
