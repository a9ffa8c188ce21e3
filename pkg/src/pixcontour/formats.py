"""On-disk formats: weight blobs, binary PPM/PGM images, edge maps and key=value configs."""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .classifier import LinearSvm
from .convnet import ConvParams, NetParams

MAGIC = b"CSCN"
VERSION = 1


class FormatError(ValueError):
    pass


# -- weight files ----------------------------------------------------------------


def save_blobs(path, blobs: dict) -> None:
    """Write named arrays as little-endian float32 blobs."""
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(blobs))
    for name, arr in blobs.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"blob {name!r} contains non-finite values")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_blobs(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a weight file")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 10
    blobs = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            blobs[name] = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated weight file") from exc
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return blobs


def params_to_blobs(params: NetParams) -> dict:
    blobs = {}
    for i, p in enumerate(params, start=1):
        blobs[f"conv{i}.weight"] = p.weight
        blobs[f"conv{i}.bias"] = p.bias
    return blobs


def blobs_to_params(blobs: dict) -> NetParams:
    params = []
    i = 1
    while f"conv{i}.weight" in blobs:
        params.append(ConvParams(blobs[f"conv{i}.weight"], blobs[f"conv{i}.bias"]))
        i += 1
    if not params:
        raise FormatError("no convolution blobs found")
    return params


def save_params(path, params: NetParams) -> None:
    save_blobs(path, params_to_blobs(params))


def load_params(path) -> NetParams:
    return blobs_to_params(load_blobs(path))


def save_svm(path, svm: LinearSvm) -> None:
    save_blobs(path, {
        "svm.weights": svm.weights,
        "svm.bias": np.array([svm.bias]),
        "svm.lambda": np.array([svm.lam]),
    })


def load_svm(path) -> LinearSvm:
    b = load_blobs(path)
    try:
        return LinearSvm(b["svm.weights"], float(b["svm.bias"][0]), float(b["svm.lambda"][0]))
    except KeyError as exc:
        raise FormatError(f"{path}: missing SVM blob {exc}") from exc


# -- PNM images -------------------------------------------------------------------


def _read_pnm(path, magic: bytes):
    data = Path(path).read_bytes()
    if data[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace before the raster
    width, height, maxval = fields
    dtype = ">u2" if maxval > 255 else "u1"
    return data[pos:], width, height, maxval, np.dtype(dtype)


def read_ppm(path) -> np.ndarray:
    """Binary P6 image as a (3, H, W) float array in [0, 1]."""
    raw, w, h, maxval, dtype = _read_pnm(path, b"P6")
    px = np.frombuffer(raw, dtype=dtype, count=w * h * 3).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb, dtype=np.float64)
    _, h, w = rgb.shape
    px = np.floor(np.clip(rgb, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + px.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary P5 image as raw integer samples (uint8 or uint16)."""
    raw, w, h, maxval, dtype = _read_pnm(path, b"P5")
    px = np.frombuffer(raw, dtype=dtype, count=w * h).reshape(h, w)
    return px.astype(np.uint16 if dtype.itemsize == 2 else np.uint8)


def write_pgm(path, samples, maxval: int) -> None:
    samples = np.asarray(samples)
    h, w = samples.shape
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + samples.astype(dtype).tobytes())


def read_boundary(path) -> np.ndarray:
    return read_pgm(path) > 0


def write_boundary(path, mask) -> None:
    write_pgm(path, np.where(np.asarray(mask, bool), 255, 0), 255)


def encode_edge_map(strength) -> np.ndarray:
    """Strengths in [0, 1] to 16-bit samples, round half up."""
    s = np.clip(np.asarray(strength, dtype=np.float64), 0.0, 1.0)
    return np.floor(s * 65535 + 0.5).astype(np.uint16)


def decode_edge_map(samples) -> np.ndarray:
    return np.asarray(samples, dtype=np.float64) / 65535.0


def write_edge_map(path, strength) -> None:
    write_pgm(path, encode_edge_map(strength), 65535)


def read_edge_map(path) -> np.ndarray:
    px = read_pgm(path)
    if px.dtype != np.uint16:
        return px.astype(np.float64) / 255.0
    return decode_edge_map(px)


# -- config files -------------------------------------------------------------------


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def write_config(path, values: dict) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
