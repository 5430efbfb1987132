"""File formats: key = value configs, PFM maps, PNG rasters and zip archives."""

from __future__ import annotations

import ast
import hashlib
import io
import zipfile
from pathlib import Path

import cv2
import numpy as np

from .errors import ConfigError, DatasetError

ARCHIVE_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


# -- key = value configs ----------------------------------------------------

def _parse_value(text):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if text.lower() in ("true", "yes", "on"):
            return True
        if text.lower() in ("false", "no", "off"):
            return False
        return text


def parse_kv(text: str) -> dict:
    """Parse ``key = value`` lines. ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = _parse_value(value)
    return out


def read_kv(path) -> dict:
    try:
        return parse_kv(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def format_kv(values: dict) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, (str, Path)):
            v = str(v)
        else:
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def write_kv(path, values: dict):
    Path(path).write_text(format_kv(values))


# -- PFM -------------------------------------------------------------------

def write_pfm(path, data):
    """Write a single-channel (H, W) or RGB (H, W, 3) float map, little-endian."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        # PFM stores rows bottom-to-top
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise DatasetError(f"{path}: not a PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 1 if tag == b"Pf" else 3
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float32)


# -- PNG -------------------------------------------------------------------

def write_png(path, image, bits=16):
    """Write an (H, W) or (H, W, C) image in [0, 1] as 8- or 16-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        q = np.round(arr * 65535.0).astype(np.uint16)
    elif bits == 8:
        q = np.round(arr * 255.0).astype(np.uint8)
    else:
        raise ValueError("bits must be 8 or 16")
    if q.ndim == 3 and q.shape[2] == 3:
        q = q[..., ::-1]
    elif q.ndim == 3 and q.shape[2] == 1:
        q = q[..., 0]
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"failed to write {path}")


def read_png(path) -> np.ndarray:
    """Read an 8/16-bit PNG into float32 (H, W, C) in [0, 1]."""
    q = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if q is None:
        raise DatasetError(f"cannot decode image {path}")
    if q.dtype == np.uint16:
        arr = q.astype(np.float32) / 65535.0
    elif q.dtype == np.uint8:
        arr = q.astype(np.float32) / 255.0
    else:
        raise DatasetError(f"{path}: unsupported dtype {q.dtype}")
    if arr.ndim == 2:
        arr = arr[..., None]
    elif arr.shape[2] == 3:
        arr = arr[..., ::-1]
    elif arr.shape[2] == 4:
        arr = arr[..., 2::-1]
    return np.ascontiguousarray(arr)


def read_map(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path)[..., 0]


# -- archives --------------------------------------------------------------

def write_archive(path, header: dict, arrays: dict):
    """Zip archive with a plain-text header and little-endian float32 arrays.

    Entry timestamps are pinned so identical content gives identical bytes.
    """
    header = {"format_version": ARCHIVE_VERSION, **header}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("header.txt", date_time=_ZIP_EPOCH)
        zf.writestr(info, format_kv(header))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name], dtype="<f4"), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def read_archive(path) -> tuple[dict, dict]:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise DatasetError(f"cannot open archive {path}: {exc}") from exc
    with zf:
        header = parse_kv(zf.read("header.txt").decode())
        if header.get("format_version") != ARCHIVE_VERSION:
            raise DatasetError(f"{path}: unsupported archive version {header.get('format_version')}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return header, arrays


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
