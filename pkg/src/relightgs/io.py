"""File formats: assets, rasters, environment maps, SH lighting, cameras, and configs.

Asset files (``.rgsa``) are little-endian::

    b"RGSA"  u32 version  u32 count
    u32 n_fields, then per field: u8 name length, name (ascii), u8 width
    48 x f32 SH coefficients (16 rows of RGB)
    count x 21 x f32 primitive records, fields in schema order

LDR rasters are 8-bit PNG holding ``linear ** (1/2.2)``; the transfer is undone on
read, so arrays in memory are always linear. Float rasters are float32 ``.npy``.
"""
from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, GaussianCloud, RelightGSError, SceneAsset, SHLighting
from .optim import FitConfig, LossWeights
from .shading import EnvironmentMap

MAGIC = b"RGSA"
VERSION = 1
SCHEMA = (
    ("position", 3),
    ("log_scale", 3),
    ("rotation", 4),
    ("opacity_raw", 1),
    ("color", 3),
    ("normal_raw", 3),
    ("albedo", 3),
    ("roughness", 1),
    ("metallic", 1),
)
_SCHEMA_TO_CLOUD = dict(zip((n for n, _ in SCHEMA), (
    "positions", "log_scales", "rotations", "opacity_raw", "colors",
    "normal_raw", "albedo", "roughness", "metallic")))
RECORD_FLOATS = sum(w for _, w in SCHEMA)
GAMMA = 2.2


class AssetFormatError(RelightGSError, ValueError):
    """File is not a well-formed asset (bad magic, inconsistent length, ...)."""


class AssetVersionError(AssetFormatError):
    """Asset written by an unknown format version or with an unknown schema."""


class AssetTruncatedError(AssetFormatError):
    """Asset file shorter than its header says."""


class RasterFormatError(RelightGSError, ValueError):
    pass


# --------------------------------------------------------------------------- assets


def _schema_bytes() -> bytes:
    out = [struct.pack("<I", len(SCHEMA))]
    for name, width in SCHEMA:
        raw = name.encode("ascii")
        out.append(struct.pack("<B", len(raw)) + raw + struct.pack("<B", width))
    return b"".join(out)


def asset_to_bytes(asset: SceneAsset) -> bytes:
    cloud = asset.cloud
    K = len(cloud)
    cols = [np.asarray(getattr(cloud, _SCHEMA_TO_CLOUD[n])).reshape(K, w) for n, w in SCHEMA]
    records = np.concatenate(cols, axis=1).astype("<f4") if K else np.zeros((0, RECORD_FLOATS), "<f4")
    sh = asset.lighting.coefficients.astype("<f4")
    header = MAGIC + struct.pack("<II", VERSION, K) + _schema_bytes()
    return header + sh.tobytes() + records.tobytes()


def asset_from_bytes(data: bytes) -> SceneAsset:
    if len(data) < 12:
        raise AssetTruncatedError(f"expected at least 12 header bytes, got {len(data)}")
    if data[:4] != MAGIC:
        raise AssetFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise AssetVersionError(f"unsupported asset version {version} (this build reads {VERSION})")
    pos = 12
    try:
        (n_fields,) = struct.unpack_from("<I", data, pos)
        pos += 4
        schema = []
        for _ in range(n_fields):
            (ln,) = struct.unpack_from("<B", data, pos)
            name = data[pos + 1:pos + 1 + ln].decode("ascii")
            (width,) = struct.unpack_from("<B", data, pos + 1 + ln)
            schema.append((name, width))
            pos += 2 + ln
    except struct.error as exc:
        raise AssetTruncatedError(f"header cut short at byte {len(data)}") from exc
    if tuple(schema) != SCHEMA:
        raise AssetVersionError(f"unknown attribute schema {schema}")
    expected = pos + 4 * (48 + RECORD_FLOATS * count)
    if len(data) < expected:
        raise AssetTruncatedError(f"truncated asset: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise AssetFormatError(f"trailing data: expected {expected} bytes, got {len(data)}")
    sh = np.frombuffer(data, "<f4", 48, pos).astype(np.float64).reshape(16, 3)
    rec = np.frombuffer(data, "<f4", RECORD_FLOATS * count, pos + 192).astype(np.float64)
    rec = rec.reshape(count, RECORD_FLOATS)
    arrays, col = {}, 0
    for name, width in SCHEMA:
        block = rec[:, col:col + width]
        arrays[_SCHEMA_TO_CLOUD[name]] = block[:, 0].copy() if width == 1 else block.copy()
        col += width
    return SceneAsset(GaussianCloud(**arrays), SHLighting(sh))


def save_asset(asset: SceneAsset, path) -> None:
    Path(path).write_bytes(asset_to_bytes(asset))


def load_asset(path) -> SceneAsset:
    return asset_from_bytes(Path(path).read_bytes())


def export_ply(asset: SceneAsset, path) -> None:
    """Binary PLY with positions and 8-bit colors, for external viewers."""
    cloud = asset.cloud
    K = len(cloud)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {K}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    ).encode("ascii")
    vert = np.zeros(K, dtype=[("p", "<f4", 3), ("c", "u1", 3)])
    vert["p"] = cloud.positions
    vert["c"] = np.rint(np.clip(cloud.colors, 0.0, 1.0) * 255)
    Path(path).write_bytes(header + vert.tobytes())


# --------------------------------------------------------------------------- rasters


def linear_to_srgb8(img) -> np.ndarray:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.rint(img ** (1.0 / GAMMA) * 255.0).astype(np.uint8)


def srgb8_to_linear(img) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) / 255.0) ** GAMMA


def write_ldr(path, img) -> None:
    """Write a linear image in [0,1] (H×W or H×W×3) as a gamma-encoded 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise RasterFormatError(f"cannot store shape {img.shape} as an LDR image")
    Image.fromarray(linear_to_srgb8(img.squeeze(-1) if img.ndim == 3 and img.shape[2] == 1 else img)).save(path)


def read_ldr(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            raise RasterFormatError(f"unsupported image mode {im.mode!r} (need 8-bit L/RGB)")
        arr = np.asarray(im.convert("RGB") if im.mode == "RGBA" else im)
    return srgb8_to_linear(arr)


def write_float(path, arr) -> None:
    """Store a linear map as float32 ``.npy`` (float64 input is rounded to float32)."""
    arr = np.asarray(arr)
    if arr.dtype.kind != "f":
        raise RasterFormatError(f"float raster needs a floating dtype, got {arr.dtype}")
    np.save(path, arr.astype("<f4"), allow_pickle=False)


def read_float(path) -> np.ndarray:
    arr = np.load(path, allow_pickle=False)
    if arr.dtype != np.dtype("<f4"):
        raise RasterFormatError(f"expected little-endian float32 raster, got {arr.dtype}")
    return arr


def write_normal_map(path, normals) -> None:
    write_float(path, (np.asarray(normals, dtype=np.float64) + 1.0) * 0.5)


def read_normal_map(path) -> np.ndarray:
    n = read_float(path).astype(np.float64) * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)


# --------------------------------------------------------------------------- HDR


def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    """Decode ``(..., 4)`` RGBE bytes: ``mantissa * 2**(exponent - 136)``, zero exponent is black."""
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    e = rgbe[..., 3].astype(np.int32)
    scale = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    return rgbe[..., :3].astype(np.float64) * scale[..., None]


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if not np.isfinite(rgb).all() or (rgb < 0).any():
        raise RasterFormatError("RGBE can only store finite non-negative radiance")
    v = rgb.max(axis=-1)
    mant, exp = np.frexp(v)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    ok = v >= 1e-32
    scale = np.where(ok, mant * 256.0 / np.where(ok, v, 1.0), 0.0)
    out[..., :3] = np.where(ok[..., None], np.floor(rgb * scale[..., None]), 0).astype(np.uint8)
    out[..., 3] = np.where(ok, exp + 128, 0).astype(np.uint8)
    return out


def _read_scanline(buf: memoryview, pos: int, width: int) -> tuple[np.ndarray, int]:
    b = buf[pos:pos + 4]
    if 8 <= width < 32768 and len(b) == 4 and b[0] == 2 and b[1] == 2 and (b[2] << 8 | b[3]) == width:
        pos += 4
        line = np.empty((4, width), dtype=np.uint8)
        for ch in range(4):
            x = 0
            while x < width:
                if pos >= len(buf):
                    raise RasterFormatError("HDR scanline data ends early")
                count = buf[pos]
                pos += 1
                if count > 128:
                    count -= 128
                    if x + count > width:
                        raise RasterFormatError("HDR run overflows the scanline")
                    if pos >= len(buf):
                        raise RasterFormatError("HDR scanline data ends early")
                    line[ch, x:x + count] = buf[pos]
                    pos += 1
                else:
                    if count == 0 or x + count > width:
                        raise RasterFormatError("bad HDR literal run")
                    if pos + count > len(buf):
                        raise RasterFormatError("HDR scanline data ends early")
                    line[ch, x:x + count] = np.frombuffer(buf[pos:pos + count], np.uint8)
                    pos += count
                x += count
        return line.T, pos
    n = 4 * width
    if pos + n > len(buf):
        raise RasterFormatError("HDR pixel data ends early")
    return np.frombuffer(buf[pos:pos + n], np.uint8).reshape(width, 4), pos + n


def read_hdr(path) -> np.ndarray:
    """Radiance ``.hdr`` (flat or run-length-encoded scanlines, ``-Y H +X W`` layout)."""
    data = Path(path).read_bytes()
    if not (data.startswith(b"#?RADIANCE") or data.startswith(b"#?RGBE")):
        raise RasterFormatError("not a Radiance HDR file")
    end = data.find(b"\n\n")
    if end < 0:
        raise RasterFormatError("HDR header is not terminated")
    for line in data[:end].split(b"\n"):
        if line.startswith(b"FORMAT=") and line.strip() != b"FORMAT=32-bit_rle_rgbe":
            raise RasterFormatError(f"unsupported HDR pixel format {line.decode(errors='replace')}")
    nl = data.find(b"\n", end + 2)
    m = re.fullmatch(rb"-Y (\d+) \+X (\d+)", data[end + 2:nl].strip())
    if not m:
        raise RasterFormatError("only '-Y H +X W' HDR orientation is supported")
    H, W = int(m.group(1)), int(m.group(2))
    buf = memoryview(data)
    pos = nl + 1
    rows = []
    for _ in range(H):
        line, pos = _read_scanline(buf, pos, W)
        rows.append(line)
    return rgbe_to_float(np.stack(rows))


def write_hdr(path, img) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise RasterFormatError(f"HDR needs an H×W×3 image, got {img.shape}")
    H, W, _ = img.shape
    header = f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {H} +X {W}\n".encode("ascii")
    Path(path).write_bytes(header + float_to_rgbe(img).tobytes())


def read_hdr_equirect(path) -> EnvironmentMap:
    """Equirectangular environment from ``.hdr`` or a float ``.npy`` raster."""
    suffix = Path(path).suffix.lower()
    if suffix == ".hdr":
        return EnvironmentMap(read_hdr(path))
    if suffix == ".npy":
        return EnvironmentMap(read_float(path).astype(np.float64))
    raise RasterFormatError(f"unsupported environment map format {suffix!r}")


# --------------------------------------------------------------------------- SH, cameras, configs


def save_sh(lighting: SHLighting, path) -> None:
    """16 lines of ``r g b``, one per SH basis function in band order."""
    lines = [" ".join(repr(float(v)) for v in row) for row in lighting.coefficients]
    Path(path).write_text("\n".join(lines) + "\n")


def load_sh(path) -> SHLighting:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if len(rows) != 16 or any(len(r) != 3 for r in rows):
        raise RasterFormatError(f"{path}: SH file needs 16 lines of 3 numbers")
    try:
        return SHLighting(np.array(rows, dtype=np.float64))
    except ValueError as exc:
        raise RasterFormatError(f"{path}: {exc}") from exc


def camera_to_dict(cam: Camera) -> dict:
    return {
        "focal": cam.focal.tolist(),
        "principal_point": cam.principal_point.tolist(),
        "resolution": list(cam.resolution),
        "rotation": cam.rotation.tolist(),
        "center": cam.center.tolist(),
    }


def save_cameras(cameras, path) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cameras], indent=1))


def load_cameras(path) -> list[Camera]:
    try:
        items = json.loads(Path(path).read_text())
        return [Camera(**{k: d[k] for k in ("focal", "principal_point", "resolution", "rotation", "center")})
                for d in items]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise RasterFormatError(f"{path}: malformed camera file ({exc})") from exc


def _parse_value(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return type(like)(text)


def config_to_text(cfg: FitConfig) -> str:
    """``key = value`` lines; learning rates as ``lr.<group>``, loss weights as ``weight.<term>``."""
    lines = []
    for f in dc_fields(FitConfig):
        v = getattr(cfg, f.name)
        if f.name == "learning_rates":
            lines += [f"lr.{k} = {v[k]!r}" for k in sorted(v)]
        elif f.name == "weights":
            lines += [f"weight.{k} = {getattr(v, k)!r}" for k in LossWeights.__dataclass_fields__]
        else:
            lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base: FitConfig | None = None) -> FitConfig:
    base = base or FitConfig()
    kw = {f.name: getattr(base, f.name) for f in dc_fields(FitConfig)}
    lr = dict(kw.pop("learning_rates"))
    w0 = kw.pop("weights")
    weights = {k: getattr(w0, k) for k in LossWeights.__dataclass_fields__}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("lr."):
                if key[3:] not in lr:
                    raise KeyError(key)
                lr[key[3:]] = float(value)
            elif key.startswith("weight."):
                if key[7:] not in weights:
                    raise KeyError(key)
                weights[key[7:]] = float(value)
            elif key in kw:
                kw[key] = _parse_value(value, kw[key])
            else:
                raise KeyError(key)
        except KeyError:
            raise ValueError(f"config line {n}: unknown key {key!r}") from None
        except ValueError as exc:
            raise ValueError(f"config line {n}: {exc}") from None
    return FitConfig(learning_rates=lr, weights=LossWeights(**weights), **kw)


def load_config(path, base: FitConfig | None = None) -> FitConfig:
    return config_from_text(Path(path).read_text(), base)


def save_config(cfg: FitConfig, path) -> None:
    Path(path).write_text(config_to_text(cfg))


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p

