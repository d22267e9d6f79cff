"""Domain types, benchmark manifest schema, and raster file I/O."""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ArgumentError, FormatError, ParseError, ValidationError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class Raster:
    """Float image with samples in [0, 1], stored as an (H, W, C) array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ArgumentError(f"raster must be HxW, HxWx1 or HxWx3, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ArgumentError("raster must be non-empty")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ArgumentError("raster samples must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def clipped(cls, data) -> Raster:
        return cls(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def samples(self) -> np.ndarray:
        """Row-major flat view of all samples."""
        return self.data.ravel()

    def gray(self) -> np.ndarray:
        """Single-channel (H, W) luma plane."""
        if self.channels == 1:
            return np.array(self.data[:, :, 0])
        return self.data @ LUMA_WEIGHTS

    def contains(self, region: Region) -> bool:
        return region.x + region.w <= self.width and region.y + region.h <= self.height

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True)
class Region:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ArgumentError(f"region {name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.w <= 0 or self.h <= 0:
            raise ArgumentError(f"region size must be positive, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise ArgumentError(f"region origin must be non-negative, got ({self.x}, {self.y})")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def x1(self) -> int:
        return self.x + self.w

    @property
    def y1(self) -> int:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def intersection_area(self, other: Region) -> int:
        iw = min(self.x1, other.x1) - max(self.x, other.x)
        ih = min(self.y1, other.y1) - max(self.y, other.y)
        return max(iw, 0) * max(ih, 0)

    def overlaps(self, other: Region) -> bool:
        return self.intersection_area(other) > 0

    def fits(self, width: int, height: int) -> bool:
        return self.x1 <= width and self.y1 <= height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


class DefectKind(str, Enum):
    BLUR = "blur"
    COMPRESSION = "compression"
    MOSAIC = "mosaic"
    NOISE = "noise"


@dataclass(frozen=True)
class DefectRecord:
    region: Region
    kind: DefectKind
    severity: float
    importance: float

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", DefectKind(self.kind))
        except ValueError:
            raise ValidationError(f"unknown defect kind {self.kind!r}") from None
        if not (0.0 < self.severity <= 1.0):
            raise ValidationError(f"severity out of (0,1]: {self.severity}")
        if not (0.0 <= self.importance <= 1.0):
            raise ValidationError(f"importance out of [0,1]: {self.importance}")
        object.__setattr__(self, "severity", float(self.severity))
        object.__setattr__(self, "importance", float(self.importance))


def union_box(regions) -> Region:
    """Tight bounding box of a non-empty collection of regions."""
    regions = list(regions)
    if not regions:
        raise ArgumentError("union_box of an empty collection")
    x0 = min(r.x for r in regions)
    y0 = min(r.y for r in regions)
    x1 = max(r.x1 for r in regions)
    y1 = max(r.y1 for r in regions)
    return Region(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class BenchmarkItem:
    id: str
    image_path: str
    width: int
    height: int
    defects: tuple[DefectRecord, ...] = field(default_factory=tuple)
    mos: float = 5.0
    seed: int = 0
    source_tag: str = "vista"

    def __post_init__(self):
        object.__setattr__(self, "defects", tuple(self.defects))
        self.validate()

    def validate(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("id must be a non-empty string")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"item {self.id}: image size must be positive")
        if not (isinstance(self.mos, (int, float)) and math.isfinite(self.mos)) or not (1.0 <= self.mos <= 5.0):
            raise ValidationError(f"item {self.id}: mos out of [1,5]: {self.mos}")
        for d in self.defects:
            if not d.region.fits(self.width, self.height):
                raise ValidationError(f"item {self.id}: defect region {d.region.as_tuple()} outside image")
        for i, a in enumerate(self.defects):
            for b in self.defects[i + 1:]:
                if a.region.overlaps(b.region):
                    raise ValidationError(
                        f"item {self.id}: defect regions overlap {a.region.as_tuple()} / {b.region.as_tuple()}")

    @property
    def is_pristine(self) -> bool:
        return not self.defects


# -- raster files -----------------------------------------------------------

_SUPPORTED_FORMATS = {"PNG", "PPM"}  # Pillow reports PGM as PPM
_EXTENSIONS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}


def load_raster(path) -> Raster:
    """Read an 8-bit PNG or binary PGM/PPM; missing files raise ``FileNotFoundError``."""
    path = Path(path)
    try:
        img = Image.open(path)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: unrecognised image encoding") from exc
    with img:
        if img.format not in _SUPPORTED_FORMATS:
            raise FormatError(f"{path}: unsupported format {img.format}")
        if img.mode not in ("L", "RGB"):
            raise FormatError(f"{path}: unsupported pixel mode {img.mode} (need 8-bit gray or RGB)")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return Raster(arr)


def save_raster(raster: Raster, path) -> None:
    path = Path(path)
    fmt = _EXTENSIONS.get(path.suffix.lower())
    if fmt is None:
        raise FormatError(f"{path}: unsupported output extension {path.suffix!r}")
    if path.suffix.lower() == ".pgm" and raster.channels != 1:
        raise FormatError(f"{path}: PGM needs a single-channel raster")
    q = np.rint(raster.data * 255.0).astype(np.uint8)
    img = Image.fromarray(q[:, :, 0] if raster.channels == 1 else q, mode="L" if raster.channels == 1 else "RGB")
    img.save(path, format=fmt)


# -- manifest ---------------------------------------------------------------

ITEM_FIELDS = ("id", "image_path", "width", "height", "mos", "seed", "source_tag", "defects")
DEFECT_FIELDS = ("x", "y", "w", "h", "kind", "severity", "importance")


def item_to_dict(item: BenchmarkItem) -> dict:
    return {
        "id": item.id,
        "image_path": item.image_path,
        "width": item.width,
        "height": item.height,
        "mos": item.mos,
        "seed": item.seed,
        "source_tag": item.source_tag,
        "defects": [
            {"x": d.region.x, "y": d.region.y, "w": d.region.w, "h": d.region.h,
             "kind": d.kind.value, "severity": d.severity, "importance": d.importance}
            for d in item.defects
        ],
    }


def _check_keys(obj, expected, where):
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(expected))
    if unknown:
        raise ValidationError(f"{where}: unknown field(s) {', '.join(unknown)}")
    missing = [k for k in expected if k not in obj]
    if missing:
        raise ValidationError(f"{where}: missing field(s) {', '.join(missing)}")


def _typed(value, kinds, where, name):
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ValidationError(f"{where}: field {name!r} has wrong type {type(value).__name__}")
    return value


def item_from_dict(obj, index=0) -> BenchmarkItem:
    where = f"item {index}"
    _check_keys(obj, ITEM_FIELDS, where)
    defects = []
    if not isinstance(obj["defects"], list):
        raise ValidationError(f"{where}: field 'defects' must be a list")
    for j, d in enumerate(obj["defects"]):
        dwhere = f"{where} defect {j}"
        _check_keys(d, DEFECT_FIELDS, dwhere)
        try:
            region = Region(*(_typed(d[k], int, dwhere, k) for k in ("x", "y", "w", "h")))
        except ArgumentError as exc:
            raise ValidationError(f"{dwhere}: {exc}") from None
        defects.append(DefectRecord(
            region=region,
            kind=_typed(d["kind"], str, dwhere, "kind"),
            severity=_typed(d["severity"], (int, float), dwhere, "severity"),
            importance=_typed(d["importance"], (int, float), dwhere, "importance"),
        ))
    try:
        return BenchmarkItem(
            id=_typed(obj["id"], str, where, "id"),
            image_path=_typed(obj["image_path"], str, where, "image_path"),
            width=_typed(obj["width"], int, where, "width"),
            height=_typed(obj["height"], int, where, "height"),
            defects=tuple(defects),
            mos=float(_typed(obj["mos"], (int, float), where, "mos")),
            seed=_typed(obj["seed"], int, where, "seed"),
            source_tag=_typed(obj["source_tag"], str, where, "source_tag"),
        )
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def dumps_manifest(items) -> str:
    return json.dumps([item_to_dict(it) for it in items], indent=2) + "\n"


def loads_manifest(text: str) -> list[BenchmarkItem]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed manifest JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(raw, list):
        raise ParseError("manifest must be a JSON array", line=1)
    items = [item_from_dict(obj, i) for i, obj in enumerate(raw)]
    seen = set()
    for it in items:
        if it.id in seen:
            raise ValidationError(f"duplicate item id {it.id!r}")
        seen.add(it.id)
    return items


def read_manifest(path) -> list[BenchmarkItem]:
    return loads_manifest(Path(path).read_text(encoding="utf-8"))


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(items, path) -> None:
    atomic_write_text(path, dumps_manifest(items))
