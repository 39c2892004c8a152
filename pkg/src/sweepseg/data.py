"""Dataset ingestion and generation.

Images and masks travel as binary NetPBM files (P5 grayscale, P6 color,
maxval 255): trivially portable and implementable without dependencies.
A dataset is a JSON manifest with exactly these fields:

* ``classes``: list of class names (index = class label),
* ``void_index``: optional integer label excluded from loss and metrics,
* ``samples``: list of ``{image, mask, split}`` with paths relative to
  the manifest and split in {train, valid, test}.

The synthetic generator paints randomly placed solid shapes on a
textured background, one class per shape, which is enough signal for
desk-scale overfit and class-balancing experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

SPLITS = ("train", "valid", "test")


# ---------------------------------------------------------------------------
# NetPBM
# ---------------------------------------------------------------------------

def _parse_netpbm(data: bytes, path) -> tuple[str, int, int, np.ndarray]:
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                nl = data.find(b"\n", pos)
                pos = len(data) if nl < 0 else nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        return data[start:pos]

    magic = token().decode("ascii", errors="replace")
    if magic not in ("P5", "P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}, expected P5 or P6")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric header field") from exc
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad extents {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval}, only 255 is supported")
    pos += 1  # single whitespace byte separates header from payload
    channels = 1 if magic == "P5" else 3
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: truncated payload, wanted {need} bytes, "
                          f"got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return magic, width, height, arr.reshape(shape).copy()


def read_netpbm(path) -> np.ndarray:
    """Raw uint8 pixels of a binary P5 (H x W) or P6 (H x W x 3) file."""
    data = Path(path).read_bytes()
    _, _, _, arr = _parse_netpbm(data, path)
    return arr


def write_netpbm(path, pixels: np.ndarray) -> None:
    """Write uint8 pixels as binary P5 (2-D input) or P6 (H x W x 3)."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ConfigError(f"pixels must be uint8, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = "P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = "P6"
    else:
        raise ConfigError(f"cannot encode shape {pixels.shape} as P5/P6")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def load_image(path) -> np.ndarray:
    """Image as float32 H x W x 3 scaled to [0, 1]; grayscale replicates."""
    raw = read_netpbm(path)
    img = raw.astype(np.float32) / 255.0
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return img


def load_mask(path) -> np.ndarray:
    """Label map as int64 H x W with the raw 0-255 values retained."""
    raw = read_netpbm(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: masks must be single-channel P5")
    return raw.astype(np.int64)


def threshold_mask(gray) -> np.ndarray:
    """Binarize a 0-255 map at the center of the range; 128 maps to 1."""
    return (np.asarray(gray) >= 128).astype(np.int64)


def downscale_image(image: np.ndarray) -> np.ndarray:
    """Halve both extents by 2x2 block averaging."""
    h, w = image.shape[:2]
    if h % 2 or w % 2:
        raise ConfigError(f"extents {h}x{w} must be even to downscale")
    blocks = image.reshape(h // 2, 2, w // 2, 2, *image.shape[2:])
    return blocks.mean(axis=(1, 3)).astype(image.dtype, copy=False)


def downscale_mask(mask: np.ndarray) -> np.ndarray:
    """Halve a label map by 2x2 majority vote; ties go to the smaller label."""
    h, w = mask.shape
    if h % 2 or w % 2:
        raise ConfigError(f"extents {h}x{w} must be even to downscale")
    blocks = mask.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(-1, 4)
    out = np.apply_along_axis(lambda v: np.bincount(v).argmax(), 1, blocks)
    return out.reshape(h // 2, w // 2).astype(mask.dtype, copy=False)


# ---------------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray    # float32 H x W x 3 in [0, 1]
    mask: np.ndarray     # int64 H x W
    id: str


@dataclass
class ManifestEntry:
    image: str
    mask: str
    split: str


@dataclass
class DatasetManifest:
    classes: list[str]
    void_index: int | None
    samples: list[ManifestEntry]
    root: Path

    @property
    def k(self) -> int:
        return len(self.classes)

    def entries(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
        return [e for e in self.samples if e.split == split]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read manifest: {exc}") from exc
    try:
        classes = list(doc["classes"])
        void_index = doc.get("void_index")
        samples = [ManifestEntry(str(s["image"]), str(s["mask"]), str(s["split"]))
                   for s in doc["samples"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest: {exc}") from exc
    if len(classes) < 2:
        raise FormatError(f"{path}: need at least 2 classes")
    if void_index is not None:
        void_index = int(void_index)
    manifest = DatasetManifest(classes, void_index, samples, path.parent)
    for entry in manifest.samples:
        if entry.split not in SPLITS:
            raise FormatError(f"{path}: bad split {entry.split!r} for {entry.image}")
        for rel in (entry.image, entry.mask):
            if not (manifest.root / rel).exists():
                raise FormatError(f"{path}: referenced file missing: {rel}")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "classes": list(manifest.classes),
        "void_index": manifest.void_index,
        "samples": [{"image": e.image, "mask": e.mask, "split": e.split}
                    for e in manifest.samples],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


class Dataset:
    """A manifest with all samples loaded and validated."""

    def __init__(self, manifest: DatasetManifest, samples: dict[str, list[Sample]]):
        self.manifest = manifest
        self._samples = samples

    @property
    def k(self) -> int:
        return self.manifest.k

    @property
    def void_index(self) -> int | None:
        return self.manifest.void_index

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {name!r}")
        return self._samples[name]


def load_dataset(manifest_path) -> Dataset:
    """Load every sample and enforce the extent and label-range invariants."""
    manifest = load_manifest(manifest_path)
    k = manifest.k
    samples: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    for entry in manifest.samples:
        image = load_image(manifest.root / entry.image)
        mask = load_mask(manifest.root / entry.mask)
        if image.shape[:2] != mask.shape:
            raise FormatError(
                f"{entry.image}: image extents {image.shape[:2]} vs mask {mask.shape}")
        valid = mask < k
        if manifest.void_index is not None:
            valid |= mask == manifest.void_index
        if not valid.all():
            bad = int(mask[~valid].flat[0])
            raise FormatError(
                f"{entry.mask}: label {bad} outside [0, {k}) and not the void index")
        samples[entry.split].append(Sample(image, mask, Path(entry.image).stem))
    return Dataset(manifest, samples)


def compute_class_frequencies(dataset: Dataset, split: str = "train") -> np.ndarray:
    """Pixel frequency of each class over the split's non-void pixels."""
    samples = dataset.split(split)
    if not samples:
        raise ConfigError(f"split {split!r} is empty")
    counts = np.zeros(dataset.k, dtype=np.int64)
    for sample in samples:
        mask = sample.mask
        if dataset.void_index is not None:
            mask = mask[mask != dataset.void_index]
        counts += np.bincount(mask.ravel(), minlength=dataset.k)[:dataset.k]
    total = counts.sum()
    if total == 0:
        raise ConfigError(f"split {split!r} has no non-void pixels")
    return counts / total


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synth_dataset(n: int, height: int, width: int, classes: int, seed: int,
                  out_dir, *, shape_frac: tuple[float, float] = (0.25, 0.45),
                  void_frac: float = 0.0) -> DatasetManifest:
    """Generate n images with one solid shape per non-background class.

    Shapes (rectangles or discs) are randomly placed and colored on a
    textured dark background; the mask labels each shape with its class
    and the background with 0. ``shape_frac`` bounds shape diameter as a
    fraction of the short image side, which controls class balance.
    Deterministic per seed, byte for byte. Splits are assigned 70/15/15
    in index order and the manifest is written alongside the files.
    """
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    if height % 4 or width % 4:
        raise ConfigError(f"extents must be divisible by 4, got {height}x{width}")
    if not 2 <= classes <= 5:
        raise ConfigError(f"classes must be in 2..5, got {classes}")
    if not 0.0 <= void_frac < 1.0:
        raise ConfigError(f"void_frac must be in [0, 1), got {void_frac}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    entries = []
    n_train = max(1, int(round(0.7 * n)))
    n_valid = int(round(0.15 * n))
    for idx in range(n):
        base = rng.uniform(0.08, 0.32, size=3)
        img = np.clip(base + rng.normal(0.0, 0.03, size=(height, width, 3)), 0.0, 1.0)
        mask = np.zeros((height, width), dtype=np.int64)
        for cls in range(1, classes):
            frac = rng.uniform(*shape_frac)
            radius = max(1, int(round(frac * min(height, width) / 2)))
            cy = int(rng.integers(radius, height - radius + 1))
            cx = int(rng.integers(radius, width - radius + 1))
            color = rng.uniform(0.55, 0.95, size=3)
            if rng.integers(2) == 0:
                region = (np.abs(yy - cy) < radius) & (np.abs(xx - cx) < radius)
            else:
                region = (yy - cy) ** 2 + (xx - cx) ** 2 < radius ** 2
            img[region] = color
            mask[region] = cls
        if void_frac > 0.0:
            mask[rng.random((height, width)) < void_frac] = classes
        name = f"sample_{idx:03d}"
        write_netpbm(out_dir / f"{name}.ppm", np.round(img * 255.0).astype(np.uint8))
        write_netpbm(out_dir / f"{name}_mask.pgm", mask.astype(np.uint8))
        split = "train" if idx < n_train else ("valid" if idx < n_train + n_valid else "test")
        entries.append(ManifestEntry(f"{name}.ppm", f"{name}_mask.pgm", split))
    class_names = ["background"] + [f"shape{c}" for c in range(1, classes)]
    manifest = DatasetManifest(class_names, classes if void_frac > 0 else None,
                               entries, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
