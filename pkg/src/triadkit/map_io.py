"""Reading and writing anomaly maps, masks and JSON manifests.

Two on-disk anomaly map formats are supported:

``png16``
    16-bit grayscale PNG. Values are mapped to ``[0, 1]`` by ``v / 65535``
    and the map is flagged as normalized.
``f32raw``
    Raw little-endian float32, row-major, with a JSON sidecar at
    ``<path>.json`` holding ``{"width", "height", "dtype": "f32le"}``.
    Scores are loaded verbatim (not normalized).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ArgumentError, FormatError, IntegrityError, OutputError

MAP_FORMATS = ("png16", "f32raw")
LABELS = ("normal", "abnormal")

_PNG16_MODES = ("I;16", "I;16L", "I;16B", "I")


@dataclass(eq=False)
class AnomalyMap:
    """Per-pixel anomaly scores, stored as a ``(height, width)`` float array."""

    scores: np.ndarray
    normalized: bool = False
    source_expert: str = "unknown"

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 1:
            raise ArgumentError(f"anomaly map must be a non-empty 2-D array, got shape {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise IntegrityError("anomaly map contains NaN or infinite scores")
        if self.normalized and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ArgumentError("normalized anomaly map has scores outside [0, 1]")
        self.scores = scores

    @classmethod
    def from_flat(cls, scores, width, height, **kwargs):
        flat = np.asarray(scores, dtype=np.float64).ravel()
        if flat.size != width * height:
            raise IntegrityError(f"{flat.size} scores do not fill a {width}x{height} map")
        return cls(flat.reshape(height, width), **kwargs)

    @property
    def width(self) -> int:
        return int(self.scores.shape[1])

    @property
    def height(self) -> int:
        return int(self.scores.shape[0])

    @property
    def shape(self):
        return self.scores.shape

    def __eq__(self, other):
        if not isinstance(other, AnomalyMap):
            return NotImplemented
        return (
            self.normalized == other.normalized
            and self.source_expert == other.source_expert
            and self.scores.shape == other.scores.shape
            and bool(np.array_equal(self.scores, other.scores))
        )


@dataclass(eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ArgumentError(f"mask must be a non-empty 2-D array, got shape {bits.shape}")
        self.bits = bits.astype(bool)

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def shape(self):
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))


@dataclass(frozen=True)
class ImageMeta:
    width: int
    height: int
    product_class: str
    sample_id: str
    label: str = "normal"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ArgumentError(f"image dimensions must be positive, got {self.width}x{self.height}")
        if self.label not in LABELS:
            raise ArgumentError(f"label must be one of {LABELS}, got {self.label!r}")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _read_sidecar(path):
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError:
        return None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: sidecar is not valid JSON: {exc}") from exc
    try:
        width, height = int(meta["width"]), int(meta["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{side}: sidecar needs integer 'width' and 'height'") from exc
    if meta.get("dtype", "f32le") != "f32le":
        raise FormatError(f"{side}: unsupported dtype {meta.get('dtype')!r}")
    if width < 1 or height < 1:
        raise IntegrityError(f"{side}: non-positive dimensions {width}x{height}")
    return width, height


def _require_file(path: Path):
    if not path.is_file():
        raise FormatError(f"input file not found: {path}")


def load_anomaly_map(path, format: str = "png16", source_expert: str = "unknown") -> AnomalyMap:
    path = Path(path)
    _require_file(path)
    if format == "png16":
        try:
            with Image.open(path) as im:
                if im.format != "PNG" or im.mode not in _PNG16_MODES:
                    raise FormatError(f"{path}: expected a 16-bit grayscale PNG, got {im.format} mode {im.mode}")
                raw = np.array(im)
        except UnidentifiedImageError as exc:
            raise FormatError(f"{path}: not a readable image") from exc
        if raw.min() < 0 or raw.max() > 65535:
            raise FormatError(f"{path}: pixel values outside the 16-bit range")
        dims = _read_sidecar(path)
        if dims is not None and dims != (raw.shape[1], raw.shape[0]):
            raise IntegrityError(
                f"{path}: sidecar says {dims[0]}x{dims[1]}, PNG is {raw.shape[1]}x{raw.shape[0]}"
            )
        return AnomalyMap(raw.astype(np.float64) / 65535.0, normalized=True, source_expert=source_expert)
    if format == "f32raw":
        dims = _read_sidecar(path)
        if dims is None:
            raise FormatError(f"{path}: f32raw map needs a sidecar at {sidecar_path(path)}")
        payload = path.read_bytes()
        if len(payload) % 4:
            raise FormatError(f"{path}: payload of {len(payload)} bytes is not a float32 array")
        width, height = dims
        values = np.frombuffer(payload, dtype="<f4")
        if values.size != width * height:
            raise IntegrityError(
                f"{path}: sidecar says {width}x{height}={width * height} values, payload has {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise IntegrityError(f"{path}: payload contains NaN or infinite scores")
        return AnomalyMap(values.astype(np.float64).reshape(height, width), normalized=False,
                          source_expert=source_expert)
    raise ArgumentError(f"unknown anomaly map format {format!r}; expected one of {MAP_FORMATS}")


def save_anomaly_map(amap: AnomalyMap, path, format: str = "png16") -> None:
    path = Path(path)
    _check_parent(path)
    if format == "png16":
        if not amap.normalized:
            raise ArgumentError("png16 can only store normalized maps")
        quantized = np.rint(amap.scores * 65535.0).astype(np.uint16)
        Image.fromarray(quantized).save(path, format="PNG")
    elif format == "f32raw":
        path.write_bytes(amap.scores.astype("<f4").tobytes(order="C"))
        sidecar_path(path).write_text(
            canonical_json({"width": amap.width, "height": amap.height, "dtype": "f32le"}),
            encoding="utf-8",
        )
    else:
        raise ArgumentError(f"unknown anomaly map format {format!r}; expected one of {MAP_FORMATS}")


def load_mask(path) -> BinaryMask:
    path = Path(path)
    _require_file(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG" or im.mode not in ("L", "1"):
                raise FormatError(f"{path}: expected an 8-bit grayscale PNG mask, got {im.format} mode {im.mode}")
            raw = np.array(im)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image") from exc
    return BinaryMask(raw != 0)


def save_mask(mask: BinaryMask, path) -> None:
    path = Path(path)
    _check_parent(path)
    Image.fromarray(mask.bits.astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def _check_parent(path: Path):
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise OutputError(f"output directory does not exist: {parent}")


def _to_jsonable(obj):
    if hasattr(obj, "to_dict"):
        return _to_jsonable(obj.to_dict())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _to_jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_to_jsonable(v) for v in obj)
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return obj.as_posix()
    if isinstance(obj, float) and not np.isfinite(obj):
        raise ArgumentError("cannot serialize non-finite float to canonical JSON")
    return obj


def canonical_json(obj: Any) -> str:
    """Deterministic JSON text: sorted keys, fixed indentation, shortest float repr."""
    return json.dumps(_to_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False,
                      allow_nan=False) + "\n"


def write_manifest(record, path) -> Path:
    path = Path(path)
    _check_parent(path)
    text = canonical_json(record)
    try:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise OutputError(f"could not write manifest {path}: {exc}") from exc
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise OutputError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc


def write_jsonl(rows, path) -> Path:
    path = Path(path)
    _check_parent(path)
    lines = [json.dumps(_to_jsonable(r), sort_keys=True, ensure_ascii=False, allow_nan=False) for r in rows]
    try:
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"could not write {path}: {exc}") from exc
    return path


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    rows = []
    try:
        fh = path.open(encoding="utf-8")
    except FileNotFoundError as exc:
        raise FormatError(f"file not found: {path}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    return rows
