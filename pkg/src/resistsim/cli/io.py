"""Field and pattern file formats.

Canonical field storage is raw little-endian float32 next to a JSON sidecar
(``<file>.json``) holding the grid shape and pitch.  Aerial images may also
come as 16-bit grayscale PNG whose sidecar carries ``intensity_scale``.
Wafer patterns are 1- or 8-bit PNG where any nonzero pixel means 1.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError
from ..grids import BinaryImage, Field2D, Field3D


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _read_sidecar(path: Path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise DataError(f"{path}: missing sidecar {side.name}")
    meta = read_json(side)
    if not isinstance(meta, dict) or "pitch_nm" not in meta:
        raise DataError(f"{side}: sidecar lacks pitch_nm")
    return meta


def save_field(path: Path, field: Field2D | Field3D) -> None:
    """Store a field as float32 little-endian plus its sidecar."""
    path = Path(path)
    meta = {"dtype": "float32-le", "shape": list(field.values.shape), "pitch_nm": field.pitch_nm}
    if isinstance(field, Field3D):
        meta["dz_nm"] = field.dz_nm
    atomic_write_bytes(path, field.values.astype("<f4").tobytes())
    write_json(sidecar_path(path), meta)


def _load_raw(path: Path, meta: dict) -> np.ndarray:
    shape = tuple(int(s) for s in meta.get("shape", ()))
    if meta.get("dtype", "float32-le") != "float32-le" or not shape:
        raise DataError(f"{path}: unsupported raw header {meta}")
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    expected = int(np.prod(shape)) * 4
    if len(buf) != expected:
        raise DataError(f"{path}: expected {expected} bytes for shape {shape}, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64)


def load_aerial(path: Path, expected_shape: tuple[int, int] | None = None) -> Field2D:
    """Read an aerial image from raw float32 or 16-bit PNG (both need a sidecar)."""
    path = Path(path)
    meta = _read_sidecar(path)
    if path.suffix.lower() == ".png":
        if "intensity_scale" not in meta:
            raise DataError(f"{path}: sidecar lacks intensity_scale")
        try:
            with Image.open(path) as im:
                raw = np.asarray(im)
        except (OSError, ValueError) as exc:
            raise DataError(f"{path}: unreadable PNG ({exc})") from exc
        if raw.ndim != 2:
            raise DataError(f"{path}: aerial PNG must be single-channel")
        full = 255.0 if raw.dtype == np.uint8 else 65535.0
        values = raw.astype(np.float64) / full * float(meta["intensity_scale"])
    else:
        values = _load_raw(path, meta)
        if values.ndim != 2:
            raise DataError(f"{path}: aerial must be 2D, got shape {values.shape}")
    if expected_shape is not None and tuple(values.shape) != tuple(expected_shape):
        raise DataError(f"{path}: shape {values.shape} does not match manifest {tuple(expected_shape)}")
    try:
        return Field2D(values, meta["pitch_nm"])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def save_aerial_png(path: Path, field: Field2D, intensity_scale: float) -> None:
    """16-bit PNG with values mapped from [0, intensity_scale]."""
    scaled = np.clip(field.values / intensity_scale, 0.0, 1.0)
    img = Image.fromarray(np.round(scaled * 65535.0).astype(np.uint16))
    _save_png(path, img)
    write_json(sidecar_path(path), {"pitch_nm": field.pitch_nm, "intensity_scale": intensity_scale})


def load_field3d(path: Path) -> Field3D:
    meta = _read_sidecar(path)
    values = _load_raw(path, meta)
    if values.ndim != 3 or "dz_nm" not in meta:
        raise DataError(f"{path}: not a volume field")
    return Field3D(values, meta["pitch_nm"], meta["dz_nm"])


def _save_png(path: Path, img: Image.Image) -> None:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(Path(path), buf.getvalue())


def save_wafer(path: Path, img: BinaryImage) -> None:
    _save_png(path, Image.fromarray((img.values * 255).astype(np.uint8)))


def load_wafer(path: Path, pitch_nm: float, expected_shape: tuple[int, int] | None = None) -> BinaryImage:
    path = Path(path)
    try:
        with Image.open(path) as im:
            raw = np.asarray(im)
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable PNG ({exc})") from exc
    if raw.ndim != 2:
        raise DataError(f"{path}: wafer PNG must be single-channel")
    if expected_shape is not None and tuple(raw.shape) != tuple(expected_shape):
        raise DataError(f"{path}: shape {raw.shape} does not match manifest {tuple(expected_shape)}")
    return BinaryImage((raw != 0).astype(np.uint8), pitch_nm)
