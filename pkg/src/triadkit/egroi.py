"""Expert-guided region of interest (EG-RoI) pipeline.

A raw expert anomaly map is normalized, thresholded, split into connected
components, and each component gets a fixed-size box centred on its
centroid. Heavily overlapping boxes are merged, at most ``cap`` survive, the
boxes are cropped from the image at native resolution, and the visual token
budget of base view plus pooled patches is checked.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ArgumentError, BudgetError
from .map_io import AnomalyMap, ImageMeta, write_manifest
from .metrics import binarize, normalize_map
from .validation import as_anomaly_map, as_mask, check_binarize_threshold, check_fraction, check_positive_int

ORIGINS = ("expert", "ground_truth", "random_normal")
MAX_PATCHES = 4
# extended LMM context length, in tokens
CONTEXT_BUDGET = 32768

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass(frozen=True)
class RoiBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int
    peak_score: float = 0.0
    origin: str = "expert"
    # indices of the proposals folded into this box by merging
    members: tuple = ()

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ArgumentError(f"degenerate box {self.as_tuple()}")
        if self.origin not in ORIGINS:
            raise ArgumentError(f"unknown box origin {self.origin!r}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self):
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)

    def contains(self, x, y) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def to_dict(self):
        return {
            "x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1,
            "peak_score": float(self.peak_score), "origin": self.origin,
            "members": list(self.members),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["x0"]), int(d["y0"]), int(d["x1"]), int(d["y1"]),
                   float(d.get("peak_score", 0.0)), d.get("origin", "expert"),
                   tuple(d.get("members", ())))


@dataclass(frozen=True)
class Component:
    label: int
    ys: np.ndarray = field(repr=False)
    xs: np.ndarray = field(repr=False)
    peak_score: float = 0.0

    @property
    def size(self) -> int:
        return int(self.xs.size)

    @property
    def bbox(self):
        """Tight half-open bounding rectangle ``(x0, y0, x1, y1)``."""
        return (int(self.xs.min()), int(self.ys.min()), int(self.xs.max()) + 1, int(self.ys.max()) + 1)

    @property
    def centroid(self):
        """Mean pixel index ``(x, y)``."""
        return float(self.xs.mean()), float(self.ys.mean())


@dataclass(frozen=True)
class ComponentSet:
    components: tuple
    shape: tuple

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i):
        return self.components[i]

    def union_mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for c in self.components:
            out[c.ys, c.xs] = True
        return out


@dataclass(frozen=True)
class TokenLayout:
    base_view: tuple
    n_patches: int
    patch_tokens_each: int
    anyres_tokens: int
    total_visual_tokens: int
    budget: int


@dataclass(eq=False)
class RoiManifest:
    sample_id: str
    image_size: tuple
    boxes: list
    base_view: tuple
    patch_tokens_each: int
    total_visual_tokens: int
    config: dict = field(default_factory=dict)
    patches: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "image_size": list(self.image_size),
            "boxes": [b.to_dict() for b in self.boxes],
            "base_view": list(self.base_view),
            "patch_tokens_each": self.patch_tokens_each,
            "total_visual_tokens": self.total_visual_tokens,
            "config": dict(self.config),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            sample_id=d["sample_id"],
            image_size=tuple(d["image_size"]),
            boxes=[RoiBox.from_dict(b) for b in d["boxes"]],
            base_view=tuple(d["base_view"]),
            patch_tokens_each=int(d["patch_tokens_each"]),
            total_visual_tokens=int(d["total_visual_tokens"]),
            config=dict(d.get("config", {})),
        )

    def __eq__(self, other):
        if not isinstance(other, RoiManifest):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class EgroiConfig:
    threshold: float = 0.9
    box_side: int = 336
    iou_merge: float = 0.5
    cap: int = MAX_PATCHES
    pool: int = 2
    budget: int = CONTEXT_BUDGET
    connectivity: int = 8
    seed: int = 0
    base_grid: tuple = (24, 24)
    patch_grid: tuple = (24, 24)
    anyres_tiles: int = 0

    def __post_init__(self):
        check_binarize_threshold(self.threshold)
        check_positive_int(self.box_side, "box_side")
        check_fraction(self.iou_merge, "iou_merge")
        check_positive_int(self.cap, "cap")
        if self.cap > MAX_PATCHES:
            raise ArgumentError(f"cap may not exceed {MAX_PATCHES}, got {self.cap}")
        check_positive_int(self.pool, "pool")
        check_positive_int(self.budget, "budget")
        check_positive_int(self.anyres_tiles, "anyres_tiles", minimum=0)
        if self.connectivity not in _STRUCTURES:
            raise ArgumentError(f"connectivity must be 4 or 8, got {self.connectivity}")

    def to_dict(self):
        return {
            "threshold": self.threshold, "box_side": self.box_side, "iou_merge": self.iou_merge,
            "cap": self.cap, "pool": self.pool, "budget": self.budget,
            "connectivity": self.connectivity, "seed": self.seed,
            "base_grid": list(self.base_grid), "patch_grid": list(self.patch_grid),
            "anyres_tiles": self.anyres_tiles,
        }


def extract_components(mask, connectivity: int = 8, scores=None) -> ComponentSet:
    """Label connected components, ordered by (min y, min x).

    When ``scores`` (a map or array of the mask's shape) is given, each
    component records its maximum score.
    """
    mask = as_mask(mask)
    if connectivity not in _STRUCTURES:
        raise ArgumentError(f"connectivity must be 4 or 8, got {connectivity}")
    score_arr = None
    if scores is not None:
        score_arr = scores.scores if isinstance(scores, AnomalyMap) else np.asarray(scores, dtype=np.float64)
        if score_arr.shape != mask.shape:
            raise ArgumentError("scores and mask shapes differ")
    labels, n = ndimage.label(mask.bits, structure=_STRUCTURES[connectivity])
    comps = []
    if n:
        for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
            ys, xs = np.nonzero(labels[sl] == lab)
            ys = ys + sl[0].start
            xs = xs + sl[1].start
            peak = float(score_arr[ys, xs].max()) if score_arr is not None else 0.0
            comps.append(Component(label=lab, ys=ys, xs=xs, peak_score=peak))
    comps.sort(key=lambda c: (int(c.ys.min()), int(c.xs.min()), c.label))
    return ComponentSet(components=tuple(comps), shape=mask.shape)


def _place(center, side, limit):
    # round-half-up start so an isolated pixel at c gets [c - side/2, c + side/2)
    start = int(np.floor(center - side / 2.0 + 0.5))
    return min(max(start, 0), limit - side)


def _check_box_side(box_side, width, height):
    check_positive_int(box_side, "box_side")
    if box_side > min(width, height):
        raise ArgumentError(f"box_side {box_side} exceeds image dimension {width}x{height}")


def propose_boxes(components: ComponentSet, amap, box_side: int, image: ImageMeta,
                  origin: str = "expert") -> list[RoiBox]:
    """One ``box_side`` square per component, centred on its centroid and shifted inside the image."""
    _check_box_side(box_side, image.width, image.height)
    scores = None
    if amap is not None:
        scores = as_anomaly_map(amap).scores
        if scores.shape != (image.height, image.width):
            raise ArgumentError("map and image dimensions differ; resample the map first")
    boxes = []
    for i, comp in enumerate(components):
        cx, cy = comp.centroid
        x0 = _place(cx, box_side, image.width)
        y0 = _place(cy, box_side, image.height)
        peak = float(scores[comp.ys, comp.xs].max()) if scores is not None else comp.peak_score
        boxes.append(RoiBox(x0, y0, x0 + box_side, y0 + box_side, peak, origin, (i,)))
    return boxes


def box_iou(a: RoiBox, b: RoiBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _merge_pair(a: RoiBox, b: RoiBox, image_size):
    (ax, ay), (bx, by) = a.center, b.center
    wa, wb = a.area, b.area
    cx = (ax * wa + bx * wb) / (wa + wb)
    cy = (ay * wa + by * wb) / (wa + wb)
    w = max(a.width, b.width)
    h = max(a.height, b.height)
    # centre is in edge coordinates here, so no half-pixel shift
    x0 = int(np.floor(cx - w / 2.0 + 0.5))
    y0 = int(np.floor(cy - h / 2.0 + 0.5))
    if image_size is not None:
        width, height = image_size
        x0 = min(max(x0, 0), width - w)
        y0 = min(max(y0, 0), height - h)
    else:
        x0, y0 = max(x0, 0), max(y0, 0)
    top = a if a.peak_score >= b.peak_score else b
    return RoiBox(x0, y0, x0 + w, y0 + h, max(a.peak_score, b.peak_score), top.origin,
                  tuple(sorted(a.members + b.members)))


def _coords(boxes) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def _iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a: (n, 1, 4), b: (1, m, 4) -> (n, m)
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def _iou_matrix(boxes) -> np.ndarray:
    """Strict upper-triangular pairwise IoU (zeros elsewhere)."""
    c = _coords(boxes)
    return np.triu(_iou(c[:, None, :], c[None, :, :]), k=1)


def _iou_row(box: RoiBox, boxes) -> np.ndarray:
    return _iou(_coords([box])[:, None, :], _coords(boxes)[None, :, :])[0]


def merge_and_cap(boxes: Sequence[RoiBox], iou_merge: float = 0.5, cap: int = MAX_PATCHES,
                  image_size=None) -> list[RoiBox]:
    """Greedy pairwise merging followed by top-``cap`` selection by peak score.

    While some pair has IoU >= ``iou_merge``, the pair with the highest IoU
    (first pair in index order on ties) is replaced by a box of the same size
    centred at their area-weighted centroid. ``image_size`` (width, height)
    keeps merged boxes inside the image.
    """
    iou_merge = check_fraction(iou_merge, "iou_merge")
    check_positive_int(cap, "cap")
    # Slots keep list order: a merged pair lives on in the lower slot and the
    # other slot dies, which is exactly "remove both, insert at i".
    slots = list(boxes)
    n = len(slots)
    alive = np.ones(n, dtype=bool)
    iou = _iou_matrix(slots) if n else np.zeros((0, 0))
    if n:
        iou[np.tril_indices(n)] = -1.0
    row_best = iou.argmax(axis=1) if n else np.zeros(0, dtype=int)
    row_max = iou[np.arange(n), row_best] if n else np.zeros(0)
    while n > 1:
        i = int(np.argmax(row_max))
        j = int(row_best[i])
        if row_max[i] < iou_merge:
            break
        slots[i] = _merge_pair(slots[i], slots[j], image_size)
        alive[j] = False
        iou[j, :] = -1.0
        iou[:, j] = -1.0
        row_max[j] = -1.0
        live = np.flatnonzero(alive)
        vals = _iou_row(slots[i], [slots[k] for k in live])
        after = live > i
        iou[i, live[after]] = vals[after]
        before = live[live < i]
        iou[before, i] = vals[live < i]
        stale = np.union1d(np.append(before, i), np.flatnonzero(alive & (row_best == j)))
        for k in stale:
            # first maximum in the row, matching a row-major scan
            b = int(np.argmax(iou[k]))
            row_best[k], row_max[k] = b, iou[k, b]
    work = [b for b, ok in zip(slots, alive) if ok]
    work.sort(key=lambda b: (-b.peak_score, b.y0, b.x0))
    return work[:cap]


def crop_patches(image, boxes: Sequence[RoiBox]) -> list[np.ndarray]:
    """Pixel-exact crops (copies) of ``image`` for each box; no resampling."""
    image = np.asarray(image)
    if image.ndim < 2:
        raise ArgumentError("image raster must be at least 2-D")
    h, w = image.shape[:2]
    out = []
    for b in boxes:
        if b.x0 < 0 or b.y0 < 0 or b.x1 > w or b.y1 > h:
            raise ArgumentError(f"box {b.as_tuple()} lies outside the {w}x{h} image")
        out.append(image[b.y0:b.y1, b.x0:b.x1].copy())
    return out


def token_layout(base_grid=(24, 24), n_patches: int = 0, patch_grid=(24, 24), pool: int = 2,
                 budget: int = CONTEXT_BUDGET, anyres_tiles: int = 0, max_patches: int = MAX_PATCHES) -> TokenLayout:
    """Visual token count for the base view plus average-pooled patches.

    ``anyres_tiles`` adds that many extra base-sized tiles, for backbones that
    keep their native tiling alongside the region patches.
    """
    bw, bh = base_grid
    pw, ph = patch_grid
    check_positive_int(pool, "pool")
    if n_patches < 0 or n_patches > max_patches:
        raise ArgumentError(f"n_patches must be between 0 and {max_patches}, got {n_patches}")
    if pw % pool or ph % pool:
        raise ArgumentError(f"pool factor {pool} does not divide patch grid {pw}x{ph}")
    base = bw * bh
    each = (pw // pool) * (ph // pool)
    anyres = anyres_tiles * base
    total = base + anyres + n_patches * each
    if total > budget:
        raise BudgetError(total, budget)
    return TokenLayout(base_view=(bw, bh), n_patches=n_patches, patch_tokens_each=each,
                       anyres_tokens=anyres, total_visual_tokens=total, budget=budget)


def resample_nearest(amap: AnomalyMap, width: int, height: int) -> AnomalyMap:
    if amap.shape == (height, width):
        return amap
    ys = np.minimum((np.arange(height) * amap.height) // height, amap.height - 1)
    xs = np.minimum((np.arange(width) * amap.width) // width, amap.width - 1)
    return AnomalyMap(amap.scores[np.ix_(ys, xs)], normalized=amap.normalized,
                      source_expert=amap.source_expert)


def _build_manifest(image: ImageMeta, boxes, raster, config: EgroiConfig, out_dir):
    layout = token_layout(config.base_grid, len(boxes), config.patch_grid, config.pool,
                          config.budget, config.anyres_tiles, max_patches=config.cap)
    patches = crop_patches(raster, boxes) if raster is not None else []
    manifest = RoiManifest(
        sample_id=image.sample_id,
        image_size=(image.width, image.height),
        boxes=list(boxes),
        base_view=layout.base_view,
        patch_tokens_each=layout.patch_tokens_each,
        total_visual_tokens=layout.total_visual_tokens,
        config=config.to_dict(),
        patches=patches,
    )
    if out_dir is not None:
        write_manifest(manifest, Path(out_dir) / f"{image.sample_id}.json")
    return manifest


def run_egroi(image: ImageMeta, raw_map, config: EgroiConfig | None = None, raster=None,
              out_dir=None) -> RoiManifest:
    """Inference-time pipeline from a raw expert map to a manifest.

    A map whose size differs from the image is nearest-neighbour resampled
    first. If ``raster`` is supplied the crops are attached to the manifest.
    """
    config = config or EgroiConfig()
    amap = as_anomaly_map(raw_map, normalized=False)
    _check_box_side(config.box_side, image.width, image.height)
    amap = resample_nearest(amap, image.width, image.height)
    norm = normalize_map(amap)
    mask = binarize(norm, config.threshold)
    comps = extract_components(mask, config.connectivity, scores=norm)
    boxes = propose_boxes(comps, norm, config.box_side, image)
    boxes = merge_and_cap(boxes, config.iou_merge, config.cap, (image.width, image.height))
    return _build_manifest(image, boxes, raster, config, out_dir)


def sample_seed(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode("utf-8"))])


def sample_normal_boxes(gt_boxes: Sequence[RoiBox], image: ImageMeta, box_side: int,
                        rng: np.random.Generator, max_iou: float = 0.1, max_tries: int = 200) -> list[RoiBox]:
    """Draw one or two random boxes that barely overlap the defect boxes."""
    want = int(rng.integers(1, 3))
    out: list[RoiBox] = []
    for _ in range(max_tries):
        if len(out) == want:
            break
        x0 = int(rng.integers(0, image.width - box_side + 1))
        y0 = int(rng.integers(0, image.height - box_side + 1))
        cand = RoiBox(x0, y0, x0 + box_side, y0 + box_side, 0.0, "random_normal")
        if all(box_iou(cand, g) < max_iou for g in list(gt_boxes) + out):
            out.append(cand)
    return out


def run_egroi_training(image: ImageMeta, gt_mask, config: EgroiConfig | None = None, raster=None,
                       out_dir=None) -> RoiManifest:
    """Training-time variant: boxes come from ground-truth defects plus random normal regions."""
    config = config or EgroiConfig()
    gt_mask = as_mask(gt_mask)
    if gt_mask.shape != (image.height, image.width):
        raise ArgumentError("ground-truth mask and image dimensions differ")
    _check_box_side(config.box_side, image.width, image.height)
    comps = extract_components(gt_mask, config.connectivity, scores=gt_mask.bits.astype(np.float64))
    gt_boxes = propose_boxes(comps, None, config.box_side, image, origin="ground_truth")
    gt_boxes = merge_and_cap(gt_boxes, config.iou_merge, config.cap, (image.width, image.height))
    rng = sample_seed(config.seed, image.sample_id)
    normals = sample_normal_boxes(gt_boxes, image, config.box_side, rng)
    n = len(gt_boxes)
    normals = [replace(b, members=(n + k,)) for k, b in enumerate(normals)]
    boxes = merge_and_cap(gt_boxes + normals, config.iou_merge, config.cap, (image.width, image.height))
    return _build_manifest(image, boxes, raster, config, out_dir)


class EGRoI(TransformerMixin, BaseEstimator):
    """Transformer from raw expert maps to region manifests.

    ``transform`` takes a sequence of maps; image metadata for each map is
    passed as ``images`` (defaults to map-sized images named by position).
    """

    def __init__(self, threshold=0.9, box_side=336, iou_merge=0.5, cap=4, pool=2, budget=CONTEXT_BUDGET,
                 connectivity=8, seed=0, base_grid=(24, 24), patch_grid=(24, 24), anyres_tiles=0):
        self.threshold = threshold
        self.box_side = box_side
        self.iou_merge = iou_merge
        self.cap = cap
        self.pool = pool
        self.budget = budget
        self.connectivity = connectivity
        self.seed = seed
        self.base_grid = base_grid
        self.patch_grid = patch_grid
        self.anyres_tiles = anyres_tiles

    def _config(self):
        return EgroiConfig(**self.get_params())

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def fit_transform(self, X, y=None, images=None, rasters=None):
        return self.fit(X).transform(X, images=images, rasters=rasters)

    def transform(self, X, images=None, rasters=None):
        config = self._config()
        maps = [as_anomaly_map(m, normalized=False) for m in X]
        if images is None:
            images = [ImageMeta(m.width, m.height, "unknown", f"{i:06d}") for i, m in enumerate(maps)]
        if len(images) != len(maps):
            raise ArgumentError("images and maps differ in length")
        rasters = rasters if rasters is not None else [None] * len(maps)
        return [run_egroi(img, m, config, raster=r) for img, m, r in zip(images, maps, rasters)]
