"""Field containers, bilinear resampling and thresholding.

Arrays are stored row-major: a :class:`Field2D` holds ``values[row, col]``
with shape ``(height, width)`` and a :class:`Field3D` holds
``values[z, row, col]`` with ``z = 0`` at the resist top surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Field2D:
    """Lateral scalar grid with a physical pixel pitch in nm."""

    values: np.ndarray
    pitch_nm: float

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
            raise InvalidArgument(f"Field2D needs a non-empty 2D array, got shape {values.shape}")
        if not self.pitch_nm > 0:
            raise InvalidArgument(f"pitch_nm must be positive, got {self.pitch_nm}")
        if not np.all(np.isfinite(values)):
            raise InvalidArgument("Field2D values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pitch_nm", float(self.pitch_nm))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def extent_nm(self) -> tuple[float, float]:
        return self.height * self.pitch_nm, self.width * self.pitch_nm


@dataclass(frozen=True, eq=False)
class Field3D:
    """Resist-volume scalar grid; slice ``z`` sits at depth ``z * dz_nm``."""

    values: np.ndarray
    pitch_nm: float
    dz_nm: float

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 3 or min(values.shape[1:], default=0) == 0:
            raise InvalidArgument(f"Field3D needs a non-empty 3D array, got shape {values.shape}")
        if values.shape[0] < 2:
            raise InvalidArgument("Field3D needs at least two z slices")
        if not (self.pitch_nm > 0 and self.dz_nm > 0):
            raise InvalidArgument("pitch_nm and dz_nm must be positive")
        if not np.all(np.isfinite(values)):
            raise InvalidArgument("Field3D values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pitch_nm", float(self.pitch_nm))
        object.__setattr__(self, "dz_nm", float(self.dz_nm))

    @property
    def nz(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def thickness_nm(self) -> float:
        return (self.nz - 1) * self.dz_nm

    def z_nm(self) -> np.ndarray:
        return np.arange(self.nz) * self.dz_nm


@dataclass(frozen=True, eq=False)
class BinaryImage:
    """Thresholded pattern; 1 marks developed (cleared) resist."""

    values: np.ndarray
    pitch_nm: float

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 2 or raw.size == 0:
            raise InvalidArgument(f"BinaryImage needs a non-empty 2D array, got shape {raw.shape}")
        if not np.all((raw == 0) | (raw == 1)):
            raise InvalidArgument("BinaryImage values must be exactly 0 or 1")
        if not self.pitch_nm > 0:
            raise InvalidArgument(f"pitch_nm must be positive, got {self.pitch_nm}")
        object.__setattr__(self, "values", _frozen(raw, dtype=np.uint8))
        object.__setattr__(self, "pitch_nm", float(self.pitch_nm))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _sample_coords(n_src: int, src_pitch: float, n_dst: int, dst_pitch: float):
    # pixel centres anchored at (i + 0.5) * pitch on both grids
    x = (np.arange(n_dst) + 0.5) * (dst_pitch / src_pitch) - 0.5
    x = np.clip(x, 0.0, n_src - 1)
    i0 = np.minimum(np.floor(x).astype(np.intp), max(n_src - 2, 0))
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = x - i0
    return i0, i1, frac


def resample_bilinear(src: Field2D, target_pitch_nm: float) -> Field2D:
    """Resample ``src`` to a new pitch over the same physical extent.

    The output size is ``round(n * src.pitch / target_pitch)`` per axis.
    Samples beyond the outermost source pixel centres are clamped to the edge.
    """
    if not target_pitch_nm > 0:
        raise InvalidArgument(f"target pitch must be positive, got {target_pitch_nm}")
    ratio = src.pitch_nm / target_pitch_nm
    h = int(round(src.height * ratio))
    w = int(round(src.width * ratio))
    if h == 0 or w == 0:
        raise InvalidArgument(f"resampling to {target_pitch_nm} nm yields an empty grid")
    if target_pitch_nm == src.pitch_nm:
        return Field2D(src.values, src.pitch_nm)

    r0, r1, fr = _sample_coords(src.height, src.pitch_nm, h, target_pitch_nm)
    c0, c1, fc = _sample_coords(src.width, src.pitch_nm, w, target_pitch_nm)
    v = src.values
    fr = fr[:, None]
    top = v[r0][:, c0] * (1.0 - fc) + v[r0][:, c1] * fc
    bot = v[r1][:, c0] * (1.0 - fc) + v[r1][:, c1] * fc
    return Field2D(top * (1.0 - fr) + bot * fr, target_pitch_nm)


def resample_nearest(src: BinaryImage, target_pitch_nm: float) -> BinaryImage:
    """Nearest-neighbour resampling of a pattern; each output pixel copies the
    source pixel containing its centre."""
    if not target_pitch_nm > 0:
        raise InvalidArgument(f"target pitch must be positive, got {target_pitch_nm}")
    ratio = src.pitch_nm / target_pitch_nm
    h = int(round(src.height * ratio))
    w = int(round(src.width * ratio))
    if h == 0 or w == 0:
        raise InvalidArgument(f"resampling to {target_pitch_nm} nm yields an empty grid")
    rows = np.minimum(((np.arange(h) + 0.5) / ratio).astype(np.intp), src.height - 1)
    cols = np.minimum(((np.arange(w) + 0.5) / ratio).astype(np.intp), src.width - 1)
    return BinaryImage(src.values[rows][:, cols], target_pitch_nm)


def binarize(depth: Field2D, tau: float) -> BinaryImage:
    """Pixels whose normalized depth exceeds ``tau`` become 1 (cleared)."""
    if not 0.0 < tau < 1.0:
        raise InvalidArgument(f"tau must lie in (0, 1), got {tau}")
    return BinaryImage((depth.values > tau).astype(np.uint8), depth.pitch_nm)
