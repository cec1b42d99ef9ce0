"""Images, manifests, augmentation, fold assignment and the synthetic benchmark."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

AVAILABLE = "Available"
UNAVAILABLE = "Unavailable"
# index 0 is Unavailable so argmax ties resolve to it
CLASSES = (UNAVAILABLE, AVAILABLE)
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}

CROP_FRACTION = 0.8
AUGMENT_AVAILABLE = ("original", "crop")
AUGMENT_UNAVAILABLE = ("original", "crop", "hflip", "vflip", "rot90", "rot180", "rot270",
                       "hflip_crop", "rot90_crop")


@dataclass
class ImageRecord:
    id: str
    path: str
    label: str
    fold: int = 0

    def __post_init__(self):
        if self.label not in CLASS_INDEX:
            raise ValueError(f"label must be one of {CLASSES}, got {self.label!r}")


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    k_folds: int = 1
    image_size: tuple[int, int] = (1600, 1600)
    root: Path | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("record ids must be unique")
        for r in self.records:
            if not 0 <= r.fold < self.k_folds:
                raise ValueError(f"record {r.id} has fold {r.fold} outside [0, {self.k_folds})")

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def fold(self, i):
        return [r for r in self.records if r.fold == i]

    def excluding(self, i):
        return [r for r in self.records if r.fold != i]

    def save(self, path):
        """Write the JSON record array and a ``.meta.json`` sidecar."""
        path = Path(path)
        path.write_text(json.dumps([asdict(r) for r in self.records], indent=1) + "\n")
        meta = {"k_folds": self.k_folds, "image_size": list(self.image_size),
                "augmentation": {AVAILABLE: list(AUGMENT_AVAILABLE),
                                 UNAVAILABLE: list(AUGMENT_UNAVAILABLE),
                                 "crop_fraction": CROP_FRACTION},
                **self.meta}
        _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        records = [ImageRecord(**r) for r in json.loads(path.read_text())]
        meta = {}
        if _meta_path(path).exists():
            meta = json.loads(_meta_path(path).read_text())
        k = meta.pop("k_folds", max((r.fold for r in records), default=0) + 1)
        size = tuple(meta.pop("image_size", (1600, 1600)))
        meta.pop("augmentation", None)
        return cls(records, k, size, root=path.parent, meta=meta)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


# ---------------------------------------------------------------------------
# loading


def read_rgb(path) -> np.ndarray:
    """8-bit RGB pixels as (H, W, 3) uint8."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise ValueError(f"{path}: expected an RGB image, got mode {im.mode}")
            return np.asarray(im)
    except OSError as e:
        raise ValueError(f"{path}: unreadable image ({e})") from e


def resize_rgb(pixels: np.ndarray, target) -> np.ndarray:
    h, w = target
    if pixels.shape[:2] == (h, w):
        return pixels
    return np.asarray(Image.fromarray(pixels).resize((w, h), Image.BILINEAR))


def load_and_resize(path, target, mean=None, std=None) -> np.ndarray:
    """(1, 3, H, W) float32 in [0, 1], optionally standardized per channel."""
    pixels = resize_rgb(read_rgb(path), target)
    x = pixels.astype(np.float32).transpose(2, 0, 1)[None] / np.float32(255)
    if mean is not None:
        x = normalize(x, mean, std)
    return x


@lru_cache(maxsize=4096)
def _cached_image(path: str, h: int, w: int) -> np.ndarray:
    return load_and_resize(path, (h, w))[0]


def load_images(manifest: DatasetManifest, records, size=None) -> np.ndarray:
    """Stack of (N, 3, H, W) scaled images; decoded files are cached per process.

    ``size`` defaults to the manifest's image size.
    """
    h, w = size or manifest.image_size
    return np.stack([_cached_image(str(manifest.resolve(r)), h, w) for r in records])


def channel_stats(images: np.ndarray):
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return [float(v) for v in mean], [float(max(v, 1e-6)) for v in std]


def normalize(x, mean, std):
    m = np.asarray(mean, np.float32)[:, None, None]
    s = np.asarray(std, np.float32)[:, None, None]
    return (x - m) / s


# ---------------------------------------------------------------------------
# augmentation; all transforms act on the last two axes


def hflip(img):
    return np.ascontiguousarray(img[..., ::-1])


def vflip(img):
    return np.ascontiguousarray(img[..., ::-1, :])


def rot90(img, k=1):
    return np.ascontiguousarray(np.rot90(img, k, axes=(-2, -1)))


def resize_planes(img, size):
    """Bilinear resize of every (H, W) plane to ``size``."""
    h, w = size
    lead = img.shape[:-2]
    planes = img.reshape(-1, *img.shape[-2:]).astype(np.float32)
    out = [np.asarray(Image.fromarray(p, mode="F").resize((w, h), Image.BILINEAR))
           for p in planes]
    return np.stack(out).reshape(*lead, h, w).astype(img.dtype)


def center_crop(img, fraction=CROP_FRACTION):
    """Central crop covering ``fraction`` of each side, resized back to full size."""
    h, w = img.shape[-2:]
    ch, cw = round(h * fraction), round(w * fraction)
    top, left = (h - ch) // 2, (w - cw) // 2
    return resize_planes(img[..., top:top + ch, left:left + cw], (h, w))


_TRANSFORMS = {
    "original": lambda x: x,
    "crop": center_crop,
    "hflip": hflip,
    "vflip": vflip,
    "rot90": lambda x: rot90(x, 1),
    "rot180": lambda x: rot90(x, 2),
    "rot270": lambda x: rot90(x, 3),
    "hflip_crop": lambda x: hflip(center_crop(x)),
    "rot90_crop": lambda x: rot90(center_crop(x), 1),
}


def augment(img, label):
    """Two variants for Available images, nine for Unavailable ones, in fixed order."""
    if img.shape[-1] != img.shape[-2]:
        raise ValueError(f"augmentation needs square images, got {img.shape[-2:]}")
    if label not in CLASS_INDEX:
        raise ValueError(f"unknown label {label!r}")
    names = AUGMENT_AVAILABLE if label == AVAILABLE else AUGMENT_UNAVAILABLE
    return [_TRANSFORMS[n](img) for n in names]


# ---------------------------------------------------------------------------
# folds


def make_folds(manifest: DatasetManifest, k: int, seed=0, stratified=True) -> DatasetManifest:
    """Assign folds; stratified mode deals each class round-robin after a seeded shuffle.

    Classes are dealt smallest first and the dealing position carries over from
    one class to the next, so fold sizes differ by at most one.
    """
    n = len(manifest.records)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    folds = {}
    if stratified:
        by_class = {c: [r.id for r in manifest.records if r.label == c] for c in CLASSES}
        present = [c for c in CLASSES if by_class[c]]
        if k > min(len(by_class[c]) for c in present):
            raise ValueError(f"k={k} exceeds the smallest class size")
        start = 0
        for c in sorted(present, key=lambda c: (len(by_class[c]), c)):
            ids = by_class[c]
            for pos, idx in enumerate(rng.permutation(len(ids))):
                folds[ids[idx]] = (start + pos) % k
            start = (start + len(ids)) % k
    else:
        for pos, idx in enumerate(rng.permutation(n)):
            folds[manifest.records[idx].id] = pos % k
    records = [ImageRecord(r.id, r.path, r.label, folds[r.id]) for r in manifest.records]
    meta = dict(manifest.meta, fold_seed=seed, stratified=stratified)
    return DatasetManifest(records, k, manifest.image_size, manifest.root, meta)


# ---------------------------------------------------------------------------
# synthetic small-object data


class SyntheticError(ValueError):
    pass


@dataclass
class SyntheticParams:
    image_size: tuple[int, int] = (64, 64)
    object_radius_range: tuple[float, float] = (5.0, 11.0)
    object_count_positive: tuple[int, int] = (1, 3)
    background_noise_std: float = 0.05
    negative_occupancy_max: float = 0.01
    seed: int = 7
    n_per_class: int = 100

    def validate(self):
        lo, hi = self.object_radius_range
        clo, chi = self.object_count_positive
        if not 0 < lo <= hi or not 1 <= clo <= chi:
            raise SyntheticError("invalid radius or count range")
        if self.background_noise_std < 0 or not 0 < self.negative_occupancy_max < 1:
            raise SyntheticError("invalid noise or occupancy")
        if self.n_per_class < 1 or min(self.image_size) < 8:
            raise SyntheticError("need at least one image per class and 8x8 pixels")
        return self


_BACKGROUND = np.array([0.20, 0.18, 0.24])
_TISSUE = np.array([0.82, 0.58, 0.62])


def _background(rng, p: SyntheticParams):
    h, w = p.image_size
    img = _BACKGROUND + rng.normal(0, p.background_noise_std, (h, w, 3))
    return img


def _paint(img, mask, rng):
    texture = 0.8 + 0.4 * rng.random(mask.shape)
    img[mask] = _TISSUE * texture[mask][:, None]


def _ellipse_mask(rng, p: SyntheticParams):
    h, w = p.image_size
    lo, hi = p.object_radius_range
    a, b = rng.uniform(lo, hi, 2)
    cy, cx = rng.uniform(hi, h - hi), rng.uniform(hi, w - hi)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _speckle_mask(rng, p: SyntheticParams):
    h, w = p.image_size
    mask = np.zeros((h, w), bool)
    budget = p.negative_occupancy_max * h * w
    for _ in range(int(rng.integers(2, 8))):
        y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
        trial = mask.copy()
        trial[y:y + 2, x:x + 2] = True
        if trial.sum() >= budget:
            break
        mask = trial
    return mask


def synthesize(rng, positive: bool, p: SyntheticParams) -> np.ndarray:
    """One (H, W, 3) uint8 image."""
    img = _background(rng, p)
    if positive:
        mask = np.zeros(p.image_size, bool)
        lo, hi = p.object_count_positive
        for _ in range(int(rng.integers(lo, hi + 1))):
            mask |= _ellipse_mask(rng, p)
    else:
        mask = _speckle_mask(rng, p)
    _paint(img, mask, rng)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def generate_synthetic(params: SyntheticParams, out_dir) -> DatasetManifest:
    """Write PNGs and ``manifest.json``; positives are Available."""
    params.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise SyntheticError(f"cannot write to {out}: {e}") from e
    rng = np.random.default_rng(params.seed)
    records = []
    for label, prefix in ((AVAILABLE, "pos"), (UNAVAILABLE, "neg")):
        for i in range(params.n_per_class):
            pixels = synthesize(rng, label == AVAILABLE, params)
            rel = f"images/{prefix}_{i:04d}.png"
            Image.fromarray(pixels, "RGB").save(out / rel, optimize=False)
            records.append(ImageRecord(f"{prefix}_{i:04d}", rel, label))
    meta = {"synthetic": {k: list(v) if isinstance(v, tuple) else v
                          for k, v in asdict(params).items()}}
    manifest = DatasetManifest(records, 1, tuple(params.image_size), out, meta)
    manifest.save(out / "manifest.json")
    log.info("wrote %d synthetic images to %s", len(records), out)
    return manifest
