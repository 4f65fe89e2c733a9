"""On-disk formats: ``.ivct`` arrays, ``IVCK`` checkpoints and 16-bit PNG/PGM exports.

``.ivct`` layout (little endian)::

    b"IVCT" | u16 version | u8 dtype tag | u8 ndim | u32 shape[ndim]
    | u32 header length | JSON header | float32 payload

The JSON header carries provenance (geometry, sampling vector, view indices).

``IVCK`` checkpoint layout::

    b"IVCK" | u16 version | u32 len + config text | u32 len + JSON meta
    | u32 n_tensors | per tensor: u16 len + name, u8 ndim, u32 shape[ndim], float32 data
    | 32-byte SHA-256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL.PngImagePlugin import PngInfo

from .physics import Image, ScanGeometry, Sinogram
from .sampling import SamplingVector

IVCT_MAGIC = b"IVCT"
IVCT_VERSION = 1
CKPT_MAGIC = b"IVCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class FormatError(ValueError):
    """A file is not in the expected format."""


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


# -- .ivct arrays -------------------------------------------------------------
def write_array(path, array: np.ndarray, header: dict | None = None) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    meta = json.dumps(header or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(IVCT_MAGIC + struct.pack("<HBB", IVCT_VERSION, 0, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(struct.pack("<I", len(meta)) + meta)
        fh.write(arr.tobytes())


def read_array(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != IVCT_MAGIC:
        raise FormatError(f"{path}: not an .ivct file")
    version, tag, ndim = struct.unpack_from("<HBB", raw, 4)
    if version != IVCT_VERSION:
        raise VersionError(f"{path}: .ivct version {version}, expected {IVCT_VERSION}")
    if tag not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    pos = 8
    shape = struct.unpack_from(f"<{ndim}I", raw, pos)
    pos += 4 * ndim
    (hlen,) = struct.unpack_from("<I", raw, pos)
    header = json.loads(raw[pos + 4 : pos + 4 + hlen])
    pos += 4 + hlen
    count = int(np.prod(shape))
    if len(raw) - pos != count * 4:
        raise FormatError(f"{path}: payload has {len(raw) - pos} bytes, expected {count * 4}")
    data = np.frombuffer(raw, dtype=_DTYPES[tag], count=count, offset=pos).reshape(shape)
    return data.astype(np.float64), header


def geometry_from_dict(d: dict) -> ScanGeometry:
    return ScanGeometry(**d)


def save_sinogram(path, sino: Sinogram, sampling: SamplingVector | None = None) -> None:
    header = {
        "kind": "sinogram",
        "geometry": sino.geometry.summary(),
        "view_indices": sino.view_indices.tolist(),
    }
    if sampling is not None:
        header["sampling"] = sampling.to_text()
    write_array(path, sino.data, header)


def load_sinogram(path) -> tuple[Sinogram, SamplingVector | None]:
    data, header = read_array(path)
    if header.get("kind") != "sinogram":
        raise FormatError(f"{path}: holds a {header.get('kind')!r}, not a sinogram")
    geom = geometry_from_dict(header["geometry"])
    sampling = SamplingVector.from_text(header["sampling"]) if "sampling" in header else None
    return Sinogram(data, geom, np.asarray(header["view_indices"])), sampling


def save_image(path, image, geometry: ScanGeometry | None = None, sampling: SamplingVector | None = None, **extra) -> None:
    data = image.data if isinstance(image, Image) else np.asarray(image)
    header = {"kind": "image", **extra}
    if geometry is not None:
        header["geometry"] = geometry.summary()
    if sampling is not None:
        header["sampling"] = sampling.to_text()
    write_array(path, data, header)


def load_image(path) -> tuple[np.ndarray, dict]:
    data, header = read_array(path)
    if header.get("kind") != "image":
        raise FormatError(f"{path}: holds a {header.get('kind')!r}, not an image")
    return data, header


# -- raster exports -----------------------------------------------------------
def to_uint16(array: np.ndarray, vmin: float = 0.0, vmax: float = 1.0) -> np.ndarray:
    scaled = (np.asarray(array, dtype=np.float64) - vmin) / (vmax - vmin)
    return np.round(np.clip(scaled, 0.0, 1.0) * 65535).astype(np.uint16)


def write_png(path, array: np.ndarray, vmin: float = 0.0, vmax: float = 1.0, meta: dict | None = None) -> None:
    """16-bit grayscale PNG (``.png``) or binary PGM (``.pgm``) with provenance text chunks."""
    img = PILImage.fromarray(to_uint16(array, vmin, vmax))
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        img.save(path)
        return
    info = PngInfo()
    for key, value in (meta or {}).items():
        info.add_text(str(key), value if isinstance(value, str) else json.dumps(value, sort_keys=True))
    img.save(path, pnginfo=info)


def write_rgb_png(path, rgb: np.ndarray) -> None:
    PILImage.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(path)


def read_grayscale(path, size: int | None = None) -> np.ndarray:
    """Load a grayscale raster as float64 in [0, 1], optionally resized to ``size``."""
    with PILImage.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
            if size is not None and arr.shape != (size, size):
                arr = np.asarray(PILImage.fromarray(arr.astype(np.float32), "F").resize((size, size), PILImage.BILINEAR))
        else:
            gray = img.convert("L")
            if size is not None and gray.size != (size, size):
                gray = gray.resize((size, size), PILImage.BILINEAR)
            arr = np.asarray(gray, dtype=np.float64) / 255.0
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def png_text(path) -> dict:
    with PILImage.open(path) as img:
        return dict(getattr(img, "text", {}))


# -- checkpoints ----------------------------------------------------------------
def _pack_str(text: str, width: str = "I") -> bytes:
    raw = text.encode()
    return struct.pack(f"<{width}", len(raw)) + raw


def dump_checkpoint(path, config_text: str, meta: dict, tensors: dict[str, np.ndarray]) -> str:
    """Write a checkpoint and return its hex checksum."""
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), _pack_str(config_text), _pack_str(json.dumps(meta, sort_keys=True))]
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(_pack_str(name, "H") + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return digest.hex()


def load_checkpoint_file(path) -> tuple[str, dict, dict[str, np.ndarray], str]:
    """Return ``(config_text, meta, tensors, checksum)``; nothing is returned on any error."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an IVCK checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads version {CKPT_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if len(raw) < 38 or hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (file corrupted or truncated)")
    pos = 6

    def take_str(width="I", size=4):
        nonlocal pos
        (n,) = struct.unpack_from(f"<{width}", body, pos)
        pos += size
        text = body[pos : pos + n].decode()
        pos += n
        return text

    config_text = take_str()
    meta = json.loads(take_str())
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        name = take_str("H", 2)
        (ndim,) = struct.unpack_from("<B", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
        pos += 1 + 4 * ndim
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    return config_text, meta, tensors, digest.hex()
