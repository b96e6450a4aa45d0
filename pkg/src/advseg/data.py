"""Synthetic fluorescent-nucleus frames, RGB label codec, augmentation, PNG I/O.

Labels use three classes: 0 background, 1 nucleus, 2 contour.  The contour
is a ring of ``contour_width`` pixels on the inside of every cell region, so
the nuclei of touching cells are always separated by contour pixels.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

BACKGROUND, NUCLEUS, CONTOUR = 0, 1, 2
CLASS_COLORS = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255]], dtype=np.uint8)
CROSS = ndimage.generate_binary_structure(2, 1)


class PlacementError(RuntimeError):
    """Raised when the requested cells cannot be placed."""


@dataclass
class SynthConfig:
    height: int = 128
    width: int = 128
    min_cells: int = 6
    max_cells: int = 10
    radius_min: float = 6.0
    radius_max: float = 11.0
    adjacent_fraction: float = 0.6
    background_level: float = 0.1
    nucleus_min: float = 0.45
    nucleus_max: float = 0.85
    edge_dimming: float = 0.6
    noise_sigma: float = 0.03
    blur_sigma: float = 1.0
    gradient_amplitude: float = 0.1
    contour_width: int = 2
    max_retries: int = 500

    def __post_init__(self):
        if self.height < 64 or self.width < 64:
            raise ValueError(f"frame must be at least 64x64, got {self.height}x{self.width}")
        if self.radius_min < 3 or self.radius_max < self.radius_min:
            raise ValueError(f"need 3 <= radius_min <= radius_max, got {self.radius_min}, {self.radius_max}")
        if self.min_cells < 0 or self.max_cells < self.min_cells:
            raise ValueError(f"need 0 <= min_cells <= max_cells, got {self.min_cells}, {self.max_cells}")
        if not 0.0 <= self.edge_dimming < 1.0:
            raise ValueError(f"edge_dimming must lie in [0, 1), got {self.edge_dimming}")
        if not 0.0 <= self.adjacent_fraction <= 1.0:
            raise ValueError(f"adjacent_fraction must lie in [0, 1], got {self.adjacent_fraction}")
        if self.contour_width < 1:
            raise ValueError(f"contour_width must be >= 1, got {self.contour_width}")

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class LabeledSample:
    """Gray-level image with its three-class label map.

    ``cells`` (optional) holds the per-pixel cell-region id and
    ``touching_pairs`` the ids of cells generated as touching pairs.
    """

    image: np.ndarray
    label: np.ndarray
    cells: np.ndarray | None = None
    touching_pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} dims differ")


# ------------------------------------------------------------ generation


def _ellipse_distance(shape, center, axes, angle) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.sqrt((u / axes[0]) ** 2 + (v / axes[1]) ** 2)


def _radius_along(axes, angle, direction) -> float:
    t = direction - angle
    a, b = axes
    return a * b / np.hypot(b * np.cos(t), a * np.sin(t))


def _nucleus_core(region: np.ndarray, width: int) -> np.ndarray:
    return ndimage.binary_erosion(region, structure=CROSS, iterations=width, border_value=0)


def _single_core(region: np.ndarray, width: int) -> bool:
    core = _nucleus_core(region, width)
    return core.any() and ndimage.label(core, structure=CROSS)[1] == 1


class _Canvas:
    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        self.cfg = config
        self.rng = rng
        self.shape = (config.height, config.width)
        self.cells = np.zeros(self.shape, dtype=np.int32)
        self.dist = np.full(self.shape, np.inf)
        self.levels: list[float] = []
        self.gap = config.contour_width + 1

    def _random_ellipse(self):
        cfg, rng = self.cfg, self.rng
        axes = rng.uniform(cfg.radius_min, cfg.radius_max, size=2)
        return axes, rng.uniform(0, np.pi)

    def _clear_of_others(self, region: np.ndarray, allow: int = 0) -> bool:
        grown = ndimage.binary_dilation(region, structure=CROSS, iterations=self.gap)
        hit = self.cells[grown]
        return not np.any((hit != 0) & (hit != allow))

    def _inside(self, region: np.ndarray) -> bool:
        return not (region[0].any() or region[-1].any() or region[:, 0].any() or region[:, -1].any())

    def _commit(self, d: np.ndarray, region: np.ndarray) -> int:
        cid = len(self.levels) + 1
        self.cells[region] = cid
        self.dist[region] = d[region]
        self.levels.append(self.rng.uniform(self.cfg.nucleus_min, self.cfg.nucleus_max))
        return cid

    def place_single(self) -> int:
        h, w = self.shape
        for _ in range(self.cfg.max_retries):
            axes, angle = self._random_ellipse()
            center = self.rng.uniform([0, 0], [h, w])
            d = _ellipse_distance(self.shape, center, axes, angle)
            region = d <= 1.0
            if region.sum() < 9 or not self._inside(region) or not self._clear_of_others(region):
                continue
            if not _single_core(region, self.cfg.contour_width):
                continue
            return self._commit(d, region)
        raise PlacementError("could not place a cell after bounded retries; lower the cell count or radii")

    def place_pair(self) -> tuple[int, int]:
        for _ in range(self.cfg.max_retries):
            snapshot = (self.cells.copy(), self.dist.copy(), list(self.levels))
            first = self.place_single()
            if self._place_partner(first):
                return first, len(self.levels)
            self.cells, self.dist, self.levels = snapshot
        raise PlacementError("could not place a touching pair after bounded retries; lower the cell density")

    def _place_partner(self, first: int) -> bool:
        ys, xs = np.nonzero(self.cells == first)
        c1 = np.array([ys.mean(), xs.mean()])
        region1 = self.cells == first
        for _ in range(20):
            axes, angle = self._random_ellipse()
            phi = self.rng.uniform(0, 2 * np.pi)
            direction = np.array([np.sin(phi), np.cos(phi)])
            # walk outwards until the two ellipses barely overlap
            dist0 = np.hypot(*np.ptp(np.stack([ys, xs]), axis=1)) / 2 + _radius_along(axes, angle, phi + np.pi)
            for step in np.arange(dist0, 0, -0.5):
                center = c1 + step * direction
                d = _ellipse_distance(self.shape, center, axes, angle)
                region = d <= 1.0
                if (region & region1).sum() >= 2:
                    break
            else:
                continue
            mine = region & ((self.cells == 0) | ((self.cells == first) & (d < self.dist)))
            if not self._inside(mine) or not self._clear_of_others(mine, allow=first):
                continue
            new_region1 = region1 & ~mine
            if not (_single_core(mine, self.cfg.contour_width) and _single_core(new_region1, self.cfg.contour_width)):
                continue
            # the pair's regions must stay 4-adjacent
            if not (ndimage.binary_dilation(mine, structure=CROSS) & new_region1).any():
                continue
            self.cells[region1 & mine] = 0
            self._commit(d, mine)
            return True
        return False


def label_from_cells(cells: np.ndarray, contour_width: int = 2) -> np.ndarray:
    """Three-class map: each cell region's inner ring becomes contour."""
    label = np.zeros(cells.shape, dtype=np.uint8)
    for cid in range(1, int(cells.max(initial=0)) + 1):
        region = cells == cid
        if not region.any():
            continue
        core = _nucleus_core(region, contour_width)
        label[region] = CONTOUR
        label[core] = NUCLEUS
    return label


def synth_generate(config: SynthConfig | None = None, seed: int = 0) -> LabeledSample:
    """One synthetic frame; fully determined by ``(config, seed)``."""
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)
    n_cells = int(rng.integers(cfg.min_cells, cfg.max_cells + 1))
    n_pairs = int(round(n_cells * cfg.adjacent_fraction / 2))
    n_single = n_cells - 2 * n_pairs

    canvas = _Canvas(cfg, rng)
    pairs = [canvas.place_pair() for _ in range(n_pairs)]
    for _ in range(n_single):
        canvas.place_single()

    label = label_from_cells(canvas.cells, cfg.contour_width)
    image = render_image(canvas.cells, canvas.dist, canvas.levels, cfg, rng)
    return LabeledSample(image=image, label=label, cells=canvas.cells, touching_pairs=pairs)


def render_image(cells, dist, levels, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Bright domed nuclei on a dark, unevenly lit, noisy background."""
    h, w = cells.shape
    lut = np.concatenate([[0.0], np.asarray(levels, dtype=float)])
    inside = cells > 0
    dome = np.where(inside, 1.0 - cfg.edge_dimming * np.where(inside, dist, 0.0) ** 2, 0.0)
    img = cfg.background_level + lut[cells] * dome
    if cfg.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, cfg.blur_sigma, mode="nearest")
    phi = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (np.cos(phi) * xx / w + np.sin(phi) * yy / h)
    ramp = ramp - ramp.mean()
    img = img + cfg.gradient_amplitude * ramp
    img = img + rng.normal(0.0, cfg.noise_sigma, size=(h, w))
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------- codec


def encode_rgb(label: np.ndarray) -> np.ndarray:
    label = np.asarray(label)
    if label.ndim != 2 or label.min(initial=0) < 0 or label.max(initial=0) > 2:
        raise ValueError("label must be a 2-D map with classes in {0, 1, 2}")
    return CLASS_COLORS[label.astype(np.intp)]


def decode_rgb(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 RGB array, got shape {rgb.shape}")
    label = np.full(rgb.shape[:2], 255, dtype=np.uint8)
    for cls, color in enumerate(CLASS_COLORS):
        label[np.all(rgb == color, axis=-1)] = cls
    bad = np.argwhere(label == 255)
    if len(bad):
        y, x = bad[0]
        raise ValueError(f"pixel (row={y}, col={x}) has color {tuple(int(v) for v in rgb[y, x])}, "
                         "expected pure red, green or blue")
    return label


def one_hot(label: np.ndarray) -> np.ndarray:
    return np.eye(3, dtype=np.float64)[label.astype(np.intp)]


# ----------------------------------------------------------- augmentation


def apply_transform(sample: LabeledSample, top: int, left: int, size: int,
                    hflip: bool = False, vflip: bool = False, quarter_turns: int = 0) -> LabeledSample:
    def tf(a):
        if a is None:
            return None
        a = a[top:top + size, left:left + size]
        if hflip:
            a = a[:, ::-1]
        if vflip:
            a = a[::-1, :]
        return np.ascontiguousarray(np.rot90(a, quarter_turns))

    return LabeledSample(tf(sample.image), tf(sample.label), tf(sample.cells), list(sample.touching_pairs))


def augment(sample: LabeledSample, crop_size: int = 64, seed: int | np.random.Generator = 0) -> LabeledSample:
    """Random crop, independent horizontal/vertical flips, and a random
    multiple-of-90-degree rotation, applied identically to image and label."""
    h, w = sample.image.shape
    if h < crop_size or w < crop_size:
        raise ValueError(f"sample {h}x{w} is smaller than the {crop_size}x{crop_size} crop")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top = int(rng.integers(0, h - crop_size + 1))
    left = int(rng.integers(0, w - crop_size + 1))
    hflip, vflip = (bool(b) for b in rng.random(2) < 0.5)
    turns = int(rng.integers(0, 4))
    return apply_transform(sample, top, left, crop_size, hflip, vflip, turns)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance (a constant image maps to zeros)."""
    image = np.asarray(image, dtype=np.float64)
    std = image.std()
    return (image - image.mean()) / (std if std > 0 else 1.0)


# ------------------------------------------------------------------- I/O


def save_image(path, image: np.ndarray):
    """8-bit grayscale PNG; intensities in [0, 1] map linearly to 0..255."""
    q = np.round(np.clip(np.asarray(image, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            raise ValueError(f"{path}: expected a single-channel grayscale PNG, got mode {im.mode}")
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0


def save_label(path, label: np.ndarray):
    Image.fromarray(encode_rgb(label), mode="RGB").save(path, format="PNG")


def load_label(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected an RGB label PNG, got mode {im.mode}")
        return decode_rgb(np.asarray(im))


def write_manifest(path, pairs: list[tuple[str, str]]):
    with open(path, "w", encoding="utf-8") as fh:
        for image_path, label_path in pairs:
            fh.write(f"{image_path}\t{label_path}\n")


def read_manifest(path) -> list[tuple[Path, Path]]:
    """(image, label) paths; relative entries resolve against the manifest's directory."""
    base = Path(path).parent
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'image<TAB>label', got {line!r}")
            out.append(tuple(p if os.path.isabs(p) else base / p for p in map(Path, parts)))
    return out


def load_dataset(manifest) -> list[LabeledSample]:
    return [LabeledSample(load_image(i), load_label(l)) for i, l in read_manifest(manifest)]
