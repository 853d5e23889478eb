"""Datasets, splits, weak/strong augmentation and a synthetic lesion generator.

Images are float32 arrays ``[3, H, W]`` in ``[0, 1]`` (grayscale replicated to
three channels); masks are uint8 ``[H, W]`` in ``{0, 1}``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

CLASS_NAMES = ("benign", "malignant")


class IngestError(ValueError):
    """Raised when a dataset directory does not follow the expected layout."""


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray | None = None
    class_label: int | None = None

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.id}: image must be [3, H, W], got {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"{self.id}: mask shape {self.mask.shape} != image {self.image.shape[1:]}")
        if (self.mask is None) != (self.class_label is None):
            raise ValueError(f"{self.id}: labeled samples need both mask and class label")

    @property
    def labeled(self) -> bool:
        return self.mask is not None

    def stripped(self) -> "Sample":
        return replace(self, mask=None, class_label=None)


@dataclass(frozen=True)
class Geometry:
    """Geometric part of a weak view: optional horizontal flip, then scale, then crop.

    ``top``/``left`` locate the output window inside the scaled image; negative
    offsets mean the scaled image was smaller than the output and got zero padding.
    """

    flip: bool
    scale: float
    top: int
    left: int
    size: int


@dataclass
class ViewPair:
    weak: np.ndarray
    strong: np.ndarray
    geometry: Geometry
    source_id: str
    mask: np.ndarray | None = None


@dataclass(frozen=True)
class StrongParams:
    sigma: float
    brightness: float
    contrast: float


@dataclass
class DatasetIndex:
    labeled: list[str]
    unlabeled: list[str]
    val: list[str]
    root: Path | None = None
    samples: dict[str, Sample] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        groups = [set(self.labeled), set(self.unlabeled), set(self.val)]
        if sum(map(len, groups)) != len(set().union(*groups)):
            raise ValueError("labeled, unlabeled and val ids must be disjoint")

    def get(self, ids: list[str]) -> list[Sample]:
        return [self.samples[i] for i in ids]

    @property
    def all_ids(self) -> list[str]:
        return sorted(self.samples)


# -- ingestion ------------------------------------------------------------------


def _read_gray(path: Path, image_size: int | None, resample: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if image_size is not None and im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), resample)
            return np.asarray(im)
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc


def scan_dataset(root: str | Path, image_size: int | None = None) -> DatasetIndex:
    """Index ``root/{benign,malignant}/<stem>.png`` with ``<stem>_mask.png`` next to each image.

    Every sample found is labeled; use :func:`split_labeled` to strip annotations.
    Images are optionally resized to ``image_size`` (bilinear; masks nearest).
    """
    root = Path(root)
    samples: dict[str, Sample] = {}
    if not root.is_dir():
        raise IngestError(f"dataset root {root} is not a directory")
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if sub.name not in CLASS_NAMES:
            raise IngestError(f"unknown class directory {sub}")
        label = CLASS_NAMES.index(sub.name)
        for path in sorted(sub.glob("*.png")):
            if path.stem.endswith("_mask"):
                continue
            mask_path = path.with_name(f"{path.stem}_mask.png")
            if not mask_path.exists():
                raise IngestError(f"missing mask for {path} (expected {mask_path.name})")
            gray = _read_gray(path, image_size, Image.BILINEAR)
            mask = (_read_gray(mask_path, image_size, Image.NEAREST) > 0).astype(np.uint8)
            if mask.shape != gray.shape:
                raise IngestError(f"mask {mask_path} does not match image size {gray.shape}")
            image = np.repeat(gray[None].astype(np.float32) / 255.0, 3, axis=0)
            sid = f"{sub.name}/{path.stem}"
            samples[sid] = Sample(sid, image, mask, label)
    return DatasetIndex(labeled=sorted(samples), unlabeled=[], val=[], root=root, samples=samples)


def index_from_samples(samples: list[Sample]) -> DatasetIndex:
    by_id = {s.id: s for s in samples}
    if len(by_id) != len(samples):
        raise ValueError("duplicate sample ids")
    return DatasetIndex(labeled=sorted(by_id), unlabeled=[], val=[], samples=by_id)


def split_labeled(index: DatasetIndex, n_labeled: int, val_fraction: float = 0.3, seed: int = 0) -> DatasetIndex:
    """Hold out ``val_fraction`` for validation, keep ``n_labeled`` training labels, strip the rest."""
    ids = index.all_ids
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[k] for k in order]
    n_val = int(round(val_fraction * len(ids)))
    val, train = shuffled[:n_val], shuffled[n_val:]
    if n_labeled > len(train):
        raise ValueError(f"n_labeled={n_labeled} exceeds the {len(train)} available training samples")
    labeled, unlabeled = sorted(train[:n_labeled]), sorted(train[n_labeled:])
    samples = dict(index.samples)
    for sid in unlabeled:
        samples[sid] = samples[sid].stripped()
    return DatasetIndex(labeled=labeled, unlabeled=unlabeled, val=sorted(val), root=index.root, samples=samples)


def write_dataset(samples: list[Sample], root: str | Path) -> None:
    """Write labeled samples as 8-bit PNGs in the ``benign/`` / ``malignant/`` layout."""
    root = Path(root)
    for s in samples:
        if not s.labeled:
            raise ValueError(f"{s.id}: only labeled samples can be written")
        folder = root / CLASS_NAMES[s.class_label]
        folder.mkdir(parents=True, exist_ok=True)
        stem = s.id.split("/")[-1]
        gray = np.clip(np.rint(s.image[0] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(gray, mode="L").save(folder / f"{stem}.png")
        Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(folder / f"{stem}_mask.png")


# -- synthetic lesions -----------------------------------------------------------


# gamma speckle shape (number of looks); larger means less speckle
_SPECKLE_LOOKS = 16.0


def _speckle_background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy = np.linspace(0.0, 1.0, size)[:, None]
    # depth-dependent attenuation plus a smooth tissue texture
    base = 0.55 - 0.2 * yy + 0.08 * ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 10)
    return base * np.ones((1, size))


def _lesion_mask(rng: np.random.Generator, size: int, irregular: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(100):
        area = rng.uniform(0.04, 0.22) * size * size
        aspect = rng.uniform(0.6, 1.0)
        a = np.sqrt(area / (np.pi * aspect))
        b = a * aspect
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        r = np.hypot(u, v)
        phi = np.arctan2(v, u)
        boundary = np.ones_like(r)
        if irregular:
            # spiculated / lobulated margin
            for _ in range(2):
                k = rng.integers(5, 12)
                boundary += rng.uniform(0.2, 0.35) * np.sin(k * phi + rng.uniform(0, 2 * np.pi))
        mask = (r <= boundary).astype(np.uint8)
        if 0.02 <= mask.mean() <= 0.30:
            return mask
    raise RuntimeError("could not place a lesion of valid size")  # pragma: no cover


def synth_sample(seed: int, index: int, image_size: int) -> Sample:
    """One synthetic lesion image; a pure function of ``(seed, index, image_size)``."""
    rng = np.random.default_rng([seed, index, image_size])
    label = int(rng.integers(0, 2))
    mask = _lesion_mask(rng, image_size, irregular=bool(label))
    tissue = _speckle_background(rng, image_size) * rng.uniform(0.7, 1.3)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), rng.uniform(0.6, 1.5))
    contrast = rng.uniform(0.15, 0.6)
    clean = tissue * (1.0 - contrast * soft)
    if rng.random() < 0.7:
        # posterior shadowing (malignant) or enhancement (benign) below the lesion
        cols = soft.max(axis=0)
        below = np.cumsum(soft, axis=0) > 0.5
        tail = ndimage.gaussian_filter(below * cols[None, :], 1.5)
        sign = -1.0 if label else 1.0
        clean = clean * (1.0 + sign * rng.uniform(0.05, 0.3) * tail * (1.0 - soft))
    # a lesion-free hypoechoic blob as a distractor
    if rng.random() < 0.8:
        yy, xx = np.mgrid[0:image_size, 0:image_size]
        cy, cx = rng.uniform(0, image_size, size=2)
        rad = rng.uniform(0.05, 0.12) * image_size
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2))
        clean = clean * (1.0 - rng.uniform(0.2, 0.5) * blob)
    speckle = rng.gamma(shape=_SPECKLE_LOOKS, scale=1 / _SPECKLE_LOOKS, size=(image_size, image_size))
    noisy = np.clip(clean * speckle, 0.0, 1.0)
    gray = ndimage.gaussian_filter(noisy, rng.uniform(0.3, 1.2)).astype(np.float32)
    image = np.repeat(gray[None], 3, axis=0)
    return Sample(f"synth_{index:05d}", image, mask, label)


def synth_generate(n: int, image_size: int, seed: int) -> list[Sample]:
    """Deterministic speckled lesion images; class 1 lesions have irregular margins."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [synth_sample(seed, i, image_size) for i in range(n)]


def dataset_digest(samples: list[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.image).tobytes())
        if s.labeled:
            h.update(np.ascontiguousarray(s.mask).tobytes())
            h.update(bytes([s.class_label]))
    return h.hexdigest()


# -- augmentation ---------------------------------------------------------------


def draw_geometry(rng: np.random.Generator, size: int) -> Geometry:
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(0.8, 1.2))
    scaled = int(round(size * scale))
    lo, hi = min(0, scaled - size), max(0, scaled - size)
    top, left = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    return Geometry(flip, scale, top, left, size)


def identity_geometry(size: int) -> Geometry:
    return Geometry(False, 1.0, 0, 0, size)


def apply_geometry(image: np.ndarray, mask: np.ndarray | None, geom: Geometry) -> tuple[np.ndarray, np.ndarray | None]:
    """Warp ``image`` (bilinear) and ``mask`` (nearest) by a recorded geometry; pads with zeros."""
    h, w = image.shape[1:]
    scaled_h, scaled_w = int(round(h * geom.scale)), int(round(w * geom.scale))
    rows = np.arange(geom.size, dtype=np.float64) + geom.top
    cols = np.arange(geom.size, dtype=np.float64) + geom.left
    # pixel-centre convention: scaled index i maps to (i + 0.5) * h / scaled_h - 0.5
    src_r = (rows + 0.5) * (h / scaled_h) - 0.5
    src_c = (cols + 0.5) * (w / scaled_w) - 0.5
    if geom.flip:
        src_c = (w - 1) - src_c
    inside_r = (rows >= 0) & (rows < scaled_h)
    inside_c = (cols >= 0) & (cols < scaled_w)
    grid_r, grid_c = np.meshgrid(src_r, src_c, indexing="ij")
    valid = inside_r[:, None] & inside_c[None, :]
    coords = np.stack([grid_r, grid_c])
    out = np.stack(
        [ndimage.map_coordinates(ch, coords, order=1, mode="nearest", prefilter=False) for ch in image]
    ).astype(image.dtype)
    out *= valid
    out_mask = None
    if mask is not None:
        near = np.rint(coords).astype(np.int64)
        near[0] = near[0].clip(0, h - 1)
        near[1] = near[1].clip(0, w - 1)
        out_mask = (mask[near[0], near[1]] * valid).astype(mask.dtype)
    return out, out_mask


def augment_weak(sample: Sample, rng: np.random.Generator, size: int | None = None):
    """Flip / scale / crop; returns ``(weak_view, geometry, transformed_mask_or_None)``."""
    geom = draw_geometry(rng, size or sample.image.shape[-1])
    weak, mask = apply_geometry(sample.image, sample.mask, geom)
    return weak, geom, mask


def draw_strong_params(rng: np.random.Generator) -> StrongParams:
    sigma, brightness, contrast = rng.uniform(0.1, 2.0), rng.uniform(0.7, 1.3), rng.uniform(0.7, 1.3)
    return StrongParams(float(sigma), float(brightness), float(contrast))


def photometric(view: np.ndarray, params: StrongParams) -> np.ndarray:
    """Gaussian blur then brightness/contrast jitter, clamped to [0, 1]. Never moves pixels."""
    out = ndimage.gaussian_filter(view, sigma=(0, params.sigma, params.sigma)) if params.sigma > 0 else view.copy()
    out = out * params.brightness
    mean = out.mean()
    out = (out - mean) * params.contrast + mean
    return np.clip(out, 0.0, 1.0).astype(view.dtype)


def augment_strong(weak_view: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return photometric(weak_view, draw_strong_params(rng))


def make_view_pair(sample: Sample, rng: np.random.Generator) -> ViewPair:
    weak, geom, mask = augment_weak(sample, rng)
    strong = augment_strong(weak, rng)
    return ViewPair(weak, strong, geom, sample.id, mask)
