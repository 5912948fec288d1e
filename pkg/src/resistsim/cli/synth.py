"""Synthetic aerial/wafer pairs standing in for a lithography simulator.

Masks are non-overlapping axis-aligned rectangles.  The "aerial image" is
the mask blurred by an isotropic Gaussian, evaluated in closed form (a sum
of erf products), so the same continuous image can be sampled exactly at
any pitch.  This is a blur surrogate, not an optics model.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

from ..grids import BinaryImage, Field2D, binarize
from ..errors import DataError
from ..gradcal import CalibRecord, ResistParams, default_params, forward_depth
from .io import load_aerial, load_wafer, read_json, save_field, save_wafer, write_json

BLUR_SIGMA_NM = 25.0
CALIBRATION_FRACTION = 0.2


def reference_params() -> ResistParams:
    """Ground-truth parameter set used to label synthetic data."""
    return default_params(C_eff=1.5, m_th=0.45, r_max=2.2, r_min=0.03, t_dev=60.0, tau=0.5)


@dataclass(frozen=True)
class Rect:
    y0: float
    x0: float
    y1: float
    x1: float

    def gap_to(self, other: "Rect") -> float:
        dy = max(other.y0 - self.y1, self.y0 - other.y1, 0.0)
        dx = max(other.x0 - self.x1, self.x0 - other.x1, 0.0)
        return math.hypot(dy, dx)


def random_layout(rng: np.random.Generator, extent_nm: float, count: int | None = None,
                  min_gap_nm: float = 40.0, attempts: int = 400) -> list[Rect]:
    """Wire-like rectangles (60-200 nm wide, 150-700 nm long) that never touch."""
    if count is None:
        count = int(rng.integers(6, 13))
    rects: list[Rect] = []
    for _ in range(attempts):
        if len(rects) >= count:
            break
        width = rng.uniform(60.0, 200.0)
        length = rng.uniform(150.0, 700.0)
        h, w = (length, width) if rng.random() < 0.5 else (width, length)
        # wires longer than the tile may overhang it on both sides
        y0 = rng.uniform(-0.25 * h, max(-0.25 * h, extent_nm - 0.75 * h))
        x0 = rng.uniform(-0.25 * w, max(-0.25 * w, extent_nm - 0.75 * w))
        cand = Rect(y0, x0, y0 + h, x0 + w)
        if all(cand.gap_to(r) >= min_gap_nm for r in rects):
            rects.append(cand)
    return rects


def aerial_from_layout(rects: Sequence[Rect], shape: tuple[int, int], pitch_nm: float,
                       sigma_nm: float = BLUR_SIGMA_NM) -> np.ndarray:
    """Gaussian-blurred layout sampled at pixel centres; clear field is 1."""
    yc = (np.arange(shape[0]) + 0.5) * pitch_nm
    xc = (np.arange(shape[1]) + 0.5) * pitch_nm
    k = 1.0 / (math.sqrt(2.0) * sigma_nm)
    out = np.zeros(shape)
    for r in rects:
        fy = 0.5 * (erf((yc - r.y0) * k) - erf((yc - r.y1) * k))
        fx = 0.5 * (erf((xc - r.x0) * k) - erf((xc - r.x1) * k))
        out += fy[:, None] * fx[None, :]
    return out


def as_float32(values: np.ndarray) -> np.ndarray:
    """Round to the precision the canonical file format stores."""
    return values.astype("<f4").astype(np.float64)


def label_wafer(aerial: Field2D, params: ResistParams) -> BinaryImage:
    return binarize(forward_depth(aerial, params), params.tau)


@dataclass
class TileEntry:
    tile_id: str
    aerial: str
    wafer: str
    split: str
    fine_wafer: str | None = None


@dataclass
class DatasetManifest:
    """Index of a dataset; paths are relative to ``root``."""

    root: Path
    pitch_nm: float
    seed: int
    tile_px: int
    tiles: list[TileEntry] = field(default_factory=list)
    fine_pitch_nm: float | None = None

    @property
    def path(self) -> Path:
        return Path(self.root) / "manifest.json"

    def to_json(self) -> dict:
        return {
            "pitch_nm": self.pitch_nm,
            "seed": self.seed,
            "tile_px": self.tile_px,
            "fine_pitch_nm": self.fine_pitch_nm,
            "tiles": [
                {k: v for k, v in vars(t).items() if v is not None} for t in self.tiles
            ],
        }

    def save(self) -> None:
        write_json(self.path, self.to_json())

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        raw = read_json(path)
        try:
            tiles = [TileEntry(t["tile_id"], t["aerial"], t["wafer"], t["split"], t.get("fine_wafer"))
                     for t in raw["tiles"]]
            man = cls(path.parent, float(raw["pitch_nm"]), int(raw["seed"]), int(raw["tile_px"]),
                      tiles, raw.get("fine_pitch_nm"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed manifest ({exc})") from exc
        ids = [t.tile_id for t in tiles]
        if len(set(ids)) != len(ids):
            raise DataError(f"{path}: duplicate tile ids")
        if any(t.split not in ("calibration", "test") for t in tiles):
            raise DataError(f"{path}: split must be 'calibration' or 'test'")
        for t in tiles:
            for rel in (t.aerial, t.wafer, t.fine_wafer):
                if rel is not None and not (man.root / rel).is_file():
                    raise DataError(f"{path}: referenced file {rel} does not exist")
        return man

    def split(self, name: str) -> list[TileEntry]:
        return [t for t in self.tiles if t.split == name]

    def digest(self) -> str:
        """Content hash over the manifest and every referenced file."""
        h = hashlib.sha256()
        for t in self.tiles:
            for rel in (t.aerial, t.wafer):
                h.update(rel.encode())
                h.update((Path(self.root) / rel).read_bytes())
            h.update(t.split.encode())
        return h.hexdigest()[:16]


def split_tiles(count: int, seed: int, fraction: float = CALIBRATION_FRACTION) -> list[str]:
    """Seeded calibration/test assignment with ``round(fraction * count)`` calibration tiles."""
    n_cal = int(round(fraction * count))
    if count > 1:
        n_cal = min(max(n_cal, 1), count - 1)
    else:
        n_cal = count
    order = np.random.default_rng([seed, 0x5E11]).permutation(count)
    split = ["test"] * count
    for i in order[:n_cal]:
        split[i] = "calibration"
    return split


def synth_dataset(root: Path, seed: int = 0, count: int = 64, tile_px: int = 128,
                  pitch_nm: float = 7.0, theta_star: ResistParams | None = None,
                  fine_pitch_nm: float | None = 1.0) -> DatasetManifest:
    """Generate, label and write a synthetic dataset; returns its manifest.

    Labels come from running ``theta_star`` on the stored (float32) aerial.
    With ``fine_pitch_nm`` set, a second wafer is labelled from the same
    continuous aerial sampled at the fine pitch, for sub-pixel evaluation.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    theta_star = theta_star or reference_params()
    root = Path(root)
    rng = np.random.default_rng(seed)
    extent = tile_px * pitch_nm
    splits = split_tiles(count, seed)
    man = DatasetManifest(root, pitch_nm, seed, tile_px, fine_pitch_nm=fine_pitch_nm)
    for i in range(count):
        tile_id = f"tile{i:04d}"
        rects = random_layout(rng, extent)
        aerial = Field2D(as_float32(aerial_from_layout(rects, (tile_px, tile_px), pitch_nm)), pitch_nm)
        entry = TileEntry(tile_id, f"aerial/{tile_id}.f32", f"wafer/{tile_id}.png", splits[i])
        save_field(root / entry.aerial, aerial)
        save_wafer(root / entry.wafer, label_wafer(aerial, theta_star))
        if fine_pitch_nm:
            n_fine = int(round(extent / fine_pitch_nm))
            fine = Field2D(aerial_from_layout(rects, (n_fine, n_fine), fine_pitch_nm), fine_pitch_nm)
            entry.fine_wafer = f"wafer_fine/{tile_id}.png"
            save_wafer(root / entry.fine_wafer, label_wafer(fine, theta_star))
        man.tiles.append(entry)
    man.save()
    return man


def load_records(man: DatasetManifest,
                 splits: Sequence[str] = ("calibration", "test")) -> list[CalibRecord]:
    shape = (man.tile_px, man.tile_px)
    out = []
    for t in man.tiles:
        if t.split not in splits:
            continue
        aerial = load_aerial(Path(man.root) / t.aerial, expected_shape=shape)
        if aerial.pitch_nm != man.pitch_nm:
            raise DataError(f"{t.aerial}: pitch {aerial.pitch_nm} differs from manifest {man.pitch_nm}")
        wafer = load_wafer(Path(man.root) / t.wafer, man.pitch_nm, expected_shape=shape)
        out.append(CalibRecord(aerial, wafer, t.split, t.tile_id))
    return out


def load_fine_wafer(man: DatasetManifest, tile: TileEntry) -> BinaryImage | None:
    if not tile.fine_wafer or not man.fine_pitch_nm:
        return None
    n = int(round(man.tile_px * man.pitch_nm / man.fine_pitch_nm))
    return load_wafer(Path(man.root) / tile.fine_wafer, man.fine_pitch_nm, expected_shape=(n, n))
