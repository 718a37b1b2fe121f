"""Depth and latent file formats.

Depth: 8- or 16-bit single-channel PNG (linearly mapped to [0, 1]) or a raw
``SNPD`` file: 16-byte header (b"SNPD", u32 height, u32 width, u32 reserved)
followed by little-endian float32 values in row-major order.

Latents (``.lat``): b"SNPL", u32 ndim, ndim x u32 dims, then little-endian
float64 values.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractViolation
from .wcm import DepthCondition

DEPTH_MAGIC = b"SNPD"
LATENT_MAGIC = b"SNPL"


def read_depth(path) -> DepthCondition:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == DEPTH_MAGIC:
        if len(data) < 16:
            raise ContractViolation(f"{path}: truncated SNPD header")
        h, w, _ = struct.unpack("<III", data[4:16])
        body = data[16:]
        if len(body) != 4 * h * w:
            raise ContractViolation(f"{path}: expected {h}x{w} float32 values, got {len(body)} bytes")
        return DepthCondition(np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64))
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        with Image.open(path) as img:
            arr = np.asarray(img)
            mode = img.mode
        if arr.ndim != 2:
            raise ContractViolation(f"{path}: depth PNG must be single-channel, got mode {mode}")
        if arr.dtype == np.uint8:
            scale = 255.0
        elif mode.startswith("I;16") or arr.dtype == np.uint16 or arr.max(initial=0) > 255:
            scale = 65535.0
        else:
            scale = 255.0
        return DepthCondition(arr.astype(np.float64) / scale)
    raise ContractViolation(f"{path}: not a PNG or SNPD depth file")


def write_depth(path, depth) -> None:
    d = np.asarray(getattr(depth, "depth", depth), dtype="<f4")
    h, w = d.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<III", h, w, 0) + d.tobytes())


def write_depth_png(path, depth, bits: int = 16) -> None:
    d = np.asarray(getattr(depth, "depth", depth), dtype=np.float64)
    if bits == 8:
        Image.fromarray(np.round(d * 255).astype(np.uint8)).save(path)
    else:
        Image.fromarray(np.round(d * 65535).astype(np.uint16)).save(path)


def write_latent(path, z) -> None:
    z = np.ascontiguousarray(z, dtype="<f8")
    header = LATENT_MAGIC + struct.pack("<I", z.ndim) + struct.pack(f"<{z.ndim}I", *z.shape)
    Path(path).write_bytes(header + z.tobytes())


def read_latent(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != LATENT_MAGIC:
        raise ContractViolation(f"{path}: not a latent file")
    (ndim,) = struct.unpack("<I", data[4:8])
    shape = struct.unpack(f"<{ndim}I", data[8:8 + 4 * ndim])
    return np.frombuffer(data[8 + 4 * ndim:], dtype="<f8").reshape(shape).copy()
