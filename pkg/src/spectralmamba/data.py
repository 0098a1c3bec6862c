"""Hyperspectral cubes, patches, superpixels and class-balanced splits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError, NumericError, SplitError

log = logging.getLogger(__name__)


@dataclass
class HsiCube:
    reflectance: np.ndarray                 # [H, W, L] float32
    band_wavelengths: list[float] | None = None

    def __post_init__(self):
        self.reflectance = np.asarray(self.reflectance, dtype=np.float32)
        if self.reflectance.ndim != 3 or min(self.reflectance.shape) < 1:
            raise DimensionError(f"cube must be [H, W, L], got {self.reflectance.shape}")
        if not np.all(np.isfinite(self.reflectance)):
            raise NumericError("cube contains non-finite reflectance values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.reflectance.shape

    @property
    def height(self) -> int:
        return self.reflectance.shape[0]

    @property
    def width(self) -> int:
        return self.reflectance.shape[1]

    @property
    def bands(self) -> int:
        return self.reflectance.shape[2]

    def as_float64(self) -> np.ndarray:
        return self.reflectance.astype(np.float64)


@dataclass
class LabelMap:
    labels: np.ndarray                      # [H, W] uint16, 0 = unlabeled

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise DimensionError(f"label map must be 2-D, got {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > np.iinfo(np.uint16).max):
            raise DimensionError("labels must fit in unsigned 16 bits")
        self.labels = self.labels.astype(np.uint16)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def present_classes(self) -> list[int]:
        return [int(c) for c in np.unique(self.labels) if c != 0]

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row, column and class of every labeled pixel in row-major order."""
        rows, cols = np.nonzero(self.labels)
        return rows, cols, self.labels[rows, cols].astype(np.int64)

    def count(self) -> int:
        return int(np.count_nonzero(self.labels))


def normalize(cube: HsiCube) -> HsiCube:
    """Per-band min-max scaling to [0, 1]; constant bands become 0."""
    x = cube.as_float64()
    lo = x.min(axis=(0, 1))
    span = x.max(axis=(0, 1)) - lo
    scaled = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
    return HsiCube(scaled.astype(np.float32), cube.band_wavelengths)


# ---------------------------------------------------------------------------
# patches


def _pad_mode(size: int) -> str:
    return "reflect" if size > 1 else "edge"


def pad_cube(cube: HsiCube, patch: int) -> np.ndarray:
    """Mirror-pad the spatial axes by ``patch // 2`` and put bands first."""
    r = patch // 2
    x = np.moveaxis(cube.as_float64(), -1, 0)
    x = np.pad(x, ((0, 0), (r, r), (0, 0)), mode=_pad_mode(cube.height))
    return np.pad(x, ((0, 0), (0, 0), (r, r)), mode=_pad_mode(cube.width))


def extract_patches(cube: HsiCube, rows, cols, patch: int, padded: np.ndarray | None = None) -> np.ndarray:
    """Band-major ``[n, L, P, P]`` windows centered on each (row, col)."""
    if patch < 1 or patch % 2 == 0:
        raise ConfigError(f"patch size must be odd and positive, got {patch}")
    rows = np.asarray(rows, dtype=np.intp).reshape(-1)
    cols = np.asarray(cols, dtype=np.intp).reshape(-1)
    if rows.size and (rows.min() < 0 or rows.max() >= cube.height or cols.min() < 0 or cols.max() >= cube.width):
        raise DimensionError("patch center outside the image")
    if padded is None:
        padded = pad_cube(cube, patch)
    off = np.arange(patch)
    rr = rows[:, None, None] + off[None, :, None]
    cc = cols[:, None, None] + off[None, None, :]
    return np.moveaxis(padded[:, rr, cc], 0, 1)


def extract_patch(cube: HsiCube, row: int, col: int, patch: int) -> np.ndarray:
    return extract_patches(cube, [row], [col], patch)[0]


def extract_pixels(cube: HsiCube, rows, cols) -> np.ndarray:
    return cube.reflectance[np.asarray(rows), np.asarray(cols)].astype(np.float64)


# ---------------------------------------------------------------------------
# synthetic scenes


def _spread_sites(rng: np.random.Generator, k: int, h: int, w: int, candidates: int = 16) -> np.ndarray:
    """Best-candidate sampling: each new site is the farthest of a few draws."""
    sites = [rng.uniform((0, 0), (h, w))]
    for _ in range(1, k):
        cand = rng.uniform((0, 0), (h, w), size=(candidates, 2))
        d = np.min(np.linalg.norm(cand[:, None, :] - np.array(sites)[None], axis=-1), axis=1)
        sites.append(cand[np.argmax(d)])
    return np.array(sites)


def _prototypes(rng: np.random.Generator, k: int, bands: int, min_gap: float,
                attempts: int = 200) -> np.ndarray:
    grid = np.arange(bands, dtype=np.float64)
    for _ in range(attempts):
        slots = rng.permutation(np.linspace(0.0, bands - 1.0, 3 * k))
        slots = slots + rng.uniform(-0.1, 0.1, slots.shape)
        protos = np.full((k, bands), 0.1)
        pos = 0
        for i in range(k):
            for _ in range(int(rng.integers(2, 4))):
                center = slots[pos]
                pos += 1
                width = rng.uniform(0.06, 0.2) * max(bands, 2)
                protos[i] += rng.uniform(0.3, 0.8) * np.exp(-0.5 * ((grid - center) / width) ** 2)
        gaps = np.abs(protos[:, None, :] - protos[None, :, :]).max(axis=-1)
        if k == 1 or gaps[~np.eye(k, dtype=bool)].min() >= min_gap:
            return protos
    raise ConfigError(f"could not draw {k} prototypes over {bands} bands separated by {min_gap}")


def synth_scene(height: int = 32, width: int = 32, bands: int = 48, classes: int = 4,
                noise_sigma: float = 0.05, seed: int = 0,
                illumination: tuple[float, float] | None = (0.8, 1.2),
                min_gap: float = 0.2) -> tuple[HsiCube, LabelMap]:
    """Voronoi layout of ``classes`` smooth spectral prototypes plus noise.

    Each pixel is ``scale * prototype + N(0, noise_sigma)`` with a per-pixel
    illumination scale drawn from ``illumination`` (``None`` fixes it to 1).
    Every pixel is labeled.
    """
    if not 1 <= classes <= 16:
        raise ConfigError(f"synthetic scenes support 1..16 classes, got {classes}")
    if min(height, width, bands) < 1:
        raise ConfigError("scene dimensions must be positive")
    if classes > height * width:
        raise ConfigError("more classes than pixels")
    rng = np.random.default_rng(seed)
    protos = _prototypes(rng, classes, bands, min_gap)
    sites = _spread_sites(rng, classes, height, width)
    yy, xx = np.mgrid[0:height, 0:width]
    pix = np.stack([yy + 0.5, xx + 0.5], axis=-1)
    owner = np.argmin(np.linalg.norm(pix[:, :, None, :] - sites[None, None], axis=-1), axis=-1)
    # every class owns at least the pixel under its site
    site_px = np.clip(sites.astype(int), 0, [height - 1, width - 1])
    owner[site_px[:, 0], site_px[:, 1]] = np.arange(classes)
    if illumination is None:
        gain = np.ones((height, width))
    else:
        gain = rng.uniform(illumination[0], illumination[1], (height, width))
    cube = gain[..., None] * protos[owner]
    if noise_sigma > 0:
        cube = cube + rng.normal(0.0, noise_sigma, cube.shape)
    wavelengths = list(np.linspace(400.0, 1000.0, bands))
    return HsiCube(cube.astype(np.float32), wavelengths), LabelMap((owner + 1).astype(np.uint16))


# ---------------------------------------------------------------------------
# superpixels


@dataclass
class SplitSpec:
    budget: int
    superpixels: int | None = None         # default: H*W/64
    compactness: float = 10.0
    seed: int = 0
    iterations: int = 10

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError(f"per-class budget must be >= 1, got {self.budget}")
        if self.superpixels is not None and self.superpixels < 1:
            raise ConfigError("superpixel count must be positive")
        if not self.compactness > 0:
            raise ConfigError("compactness must be positive")

    def segment_count(self, height: int, width: int) -> int:
        if self.superpixels is not None:
            return self.superpixels
        return max(1, round(height * width / 64))


def _seed_grid(h: int, w: int, count: int) -> np.ndarray:
    ny = int(np.clip(round(math.sqrt(count * h / w)), 1, h))
    nx = int(np.clip(round(count / ny), 1, w))
    seeds = set()
    for i in range(ny):
        y = int((i + 0.5) * h / ny)
        shift = 0.25 if i % 2 else -0.25
        for j in range(nx):
            x = int(np.clip((j + 0.5 + (shift if nx > 1 else 0.0)) * w / nx, 0, w - 1))
            seeds.add((y, x))
    return np.array(sorted(seeds))


def _gradient_map(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    return (gy * gy).sum(-1) + (gx * gx).sum(-1)


def _perturb(seeds: np.ndarray, grad: np.ndarray) -> np.ndarray:
    h, w = grad.shape
    taken = {tuple(s) for s in seeds}
    out = []
    for y, x in seeds:
        best, best_g = (y, x), grad[y, x]
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and grad[yy, xx] < best_g and (yy, xx) not in taken:
                    best, best_g = (yy, xx), grad[yy, xx]
        if best != (y, x):
            taken.discard((y, x))
            taken.add(best)
        out.append(best)
    return np.array(out)


def _enforce_connectivity(assign: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected piece of each segment; merge the rest into
    the largest adjacent region. Returns consecutive ids from 0."""
    h, w = assign.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    sizes: list[int] = []
    keeper: list[bool] = []
    for lab, sl in enumerate(ndimage.find_objects(assign + 1)):
        if sl is None:
            continue
        pieces, n = ndimage.label(assign[sl] == lab)
        if n == 0:
            continue
        counts = np.bincount(pieces.ravel())[1:]
        biggest = int(np.argmax(counts))
        window = comp[sl]
        for i in range(n):
            window[pieces == i + 1] = len(sizes)
            sizes.append(int(counts[i]))
            keeper.append(i == biggest)

    parent = list(range(len(sizes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    group_size = list(sizes)
    orphans = sorted((c for c in range(len(sizes)) if not keeper[c]), key=lambda c: (sizes[c], c))
    for c in orphans:
        mask = comp == c
        ring = ndimage.binary_dilation(mask) & ~mask
        neigh = {find(int(v)) for v in np.unique(comp[ring])} - {find(c)}
        if not neigh:
            continue
        target = max(sorted(neigh), key=lambda g: group_size[g])
        root = find(c)
        parent[root] = target
        group_size[target] += group_size[root]

    roots = np.array([find(c) for c in range(len(sizes))])
    _, relabel = np.unique(roots, return_inverse=True)
    return relabel[comp]


def slic_segment(cube: HsiCube, spec: SplitSpec) -> np.ndarray:
    """Over-segment the scene into compact, spectrally homogeneous regions.

    k-means in the joint (normalized spectrum, position) space restricted to a
    ``2S x 2S`` search window per center, with distance
    ``sqrt(d_spec^2 + (d_xy / S)^2 m^2)``.
    """
    h, w = cube.height, cube.width
    count = spec.segment_count(h, w)
    if count > h * w:
        raise ConfigError(f"{count} superpixels requested for only {h * w} pixels")
    x = normalize(cube).as_float64()
    step = math.sqrt(h * w / count)
    m2 = spec.compactness ** 2

    seeds = _perturb(_seed_grid(h, w, count), _gradient_map(x))
    seeds = np.unique(seeds, axis=0)
    cy = seeds[:, 0].astype(np.float64)
    cx = seeds[:, 1].astype(np.float64)
    cspec = x[seeds[:, 0], seeds[:, 1]].copy()
    k = len(seeds)
    yy, xx = np.mgrid[0:h, 0:w]
    reach = int(math.ceil(step))

    assign = np.zeros((h, w), dtype=np.int64)
    for _ in range(spec.iterations):
        best = np.full((h, w), np.inf)
        assign.fill(-1)
        for c in range(k):
            y0, y1 = max(0, int(cy[c]) - reach), min(h, int(cy[c]) + reach + 1)
            x0, x1 = max(0, int(cx[c]) - reach), min(w, int(cx[c]) + reach + 1)
            diff = x[y0:y1, x0:x1] - cspec[c]
            d_sp = (yy[y0:y1, x0:x1] - cy[c]) ** 2 + (xx[y0:y1, x0:x1] - cx[c]) ** 2
            dist = (diff * diff).sum(-1) + d_sp / (step * step) * m2
            win_best = best[y0:y1, x0:x1]
            better = dist < win_best
            win_best[better] = dist[better]
            assign[y0:y1, x0:x1][better] = c
        lost = assign < 0
        if lost.any():
            ly, lx = np.nonzero(lost)
            d = ((x[ly, lx][:, None, :] - cspec[None]) ** 2).sum(-1)
            d += ((ly[:, None] - cy[None]) ** 2 + (lx[:, None] - cx[None]) ** 2) / (step * step) * m2
            assign[ly, lx] = np.argmin(d, axis=1)
        flat = assign.ravel()
        n = np.bincount(flat, minlength=k).astype(np.float64)
        alive = n > 0
        cy[alive] = np.bincount(flat, yy.ravel(), k)[alive] / n[alive]
        cx[alive] = np.bincount(flat, xx.ravel(), k)[alive] / n[alive]
        xf = x.reshape(-1, x.shape[-1])
        for band in range(x.shape[-1]):
            cspec[alive, band] = np.bincount(flat, xf[:, band], k)[alive] / n[alive]

    return _enforce_connectivity(assign)


# ---------------------------------------------------------------------------
# class-balanced split


@dataclass
class Split:
    train: LabelMap
    test: LabelMap
    seed: int
    budget: int
    train_indices: dict[int, list[int]] = field(default_factory=dict)
    test_indices: dict[int, list[int]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.train
        yield self.test

    def counts(self) -> dict[int, tuple[int, int]]:
        classes = sorted(set(self.train_indices) | set(self.test_indices))
        return {c: (len(self.train_indices.get(c, [])), len(self.test_indices.get(c, []))) for c in classes}

    def to_json(self) -> dict:
        h, w = self.train.shape
        return {
            "format": "spectralmamba-split/1",
            "shape": [h, w],
            "seed": self.seed,
            "budget": self.budget,
            **self.meta,
            "classes": {str(c): {"train": self.train_indices.get(c, []),
                                 "test": self.test_indices.get(c, [])}
                        for c in sorted(set(self.train_indices) | set(self.test_indices))},
        }

    @classmethod
    def from_json(cls, d: dict) -> "Split":
        h, w = d["shape"]
        train = np.zeros(h * w, dtype=np.uint16)
        test = np.zeros(h * w, dtype=np.uint16)
        tr_idx, te_idx = {}, {}
        for key, entry in d["classes"].items():
            c = int(key)
            tr_idx[c] = [int(i) for i in entry["train"]]
            te_idx[c] = [int(i) for i in entry["test"]]
            train[tr_idx[c]] = c
            test[te_idx[c]] = c
        meta = {k: v for k, v in d.items() if k not in ("format", "shape", "seed", "budget", "classes")}
        return cls(LabelMap(train.reshape(h, w)), LabelMap(test.reshape(h, w)),
                   int(d["seed"]), int(d["budget"]), tr_idx, te_idx, meta)


def homogeneous_segments(labels: LabelMap, segments: np.ndarray) -> dict[int, list[int]]:
    """Segment ids whose labeled pixels all share one class, grouped by class."""
    lab = labels.labels.ravel().astype(np.int64)
    seg = np.asarray(segments).ravel()
    mask = lab > 0
    if not mask.any():
        return {}
    n = int(seg.max()) + 1
    lo = np.full(n, np.iinfo(np.int64).max)
    hi = np.full(n, -1)
    np.minimum.at(lo, seg[mask], lab[mask])
    np.maximum.at(hi, seg[mask], lab[mask])
    out: dict[int, list[int]] = {}
    for s in np.nonzero((hi >= 0) & (lo == hi))[0]:
        out.setdefault(int(lo[s]), []).append(int(s))
    return out


def make_split(labels: LabelMap, segments: np.ndarray, spec: SplitSpec) -> Split:
    """Draw homogeneous superpixels per class until the budget is met.

    The segment that crosses the budget is randomly subsampled so each class
    gets exactly ``spec.budget`` training pixels; every other labeled pixel
    becomes a test pixel. If a class runs out of homogeneous segments, its
    remaining pixels in mixed segments are drawn segment by segment.
    """
    segments = np.asarray(segments)
    if segments.shape != labels.shape:
        raise DimensionError(f"segments {segments.shape} do not match labels {labels.shape}")
    lab = labels.labels.ravel()
    seg = segments.ravel()
    classes = labels.present_classes()
    for c in classes:
        have = int(np.count_nonzero(lab == c))
        if have < spec.budget:
            raise SplitError(f"class {c} has {have} labeled pixels, fewer than the budget {spec.budget}")

    rng = np.random.default_rng(spec.seed)
    homog = homogeneous_segments(labels, segments)
    train_flat = np.zeros(lab.shape, dtype=bool)
    train_idx: dict[int, list[int]] = {}
    for c in classes:
        own = np.nonzero(lab == c)[0]
        by_seg: dict[int, np.ndarray] = {}
        order = np.argsort(seg[own], kind="stable")
        bounds = np.unique(seg[own][order], return_index=True)
        for s, chunk in zip(bounds[0], np.split(own[order], bounds[1][1:])):
            by_seg[int(s)] = chunk
        pure = sorted(homog.get(c, []))
        mixed = sorted(set(by_seg) - set(pure))
        chosen: list[np.ndarray] = []
        need = spec.budget
        for pool in (pure, mixed):
            if need == 0:
                break
            if pool is mixed and mixed:
                log.warning("class %d: homogeneous segments exhausted, drawing from mixed segments", c)
            for s in rng.permutation(np.array(pool, dtype=np.int64)):
                pix = by_seg[int(s)]
                if len(pix) > need:
                    pix = np.sort(rng.choice(pix, need, replace=False))
                chosen.append(pix)
                need -= len(pix)
                if need == 0:
                    break
        picked = np.sort(np.concatenate(chosen))
        train_flat[picked] = True
        train_idx[c] = [int(i) for i in picked]

    test_flat = (lab > 0) & ~train_flat
    test_idx = {c: [int(i) for i in np.nonzero(test_flat & (lab == c))[0]] for c in classes}
    h, w = labels.shape
    train = LabelMap(np.where(train_flat, lab, 0).reshape(h, w))
    test = LabelMap(np.where(test_flat, lab, 0).reshape(h, w))
    meta = {"superpixels": spec.segment_count(h, w), "compactness": spec.compactness}
    return Split(train, test, spec.seed, spec.budget, train_idx, test_idx, meta)
