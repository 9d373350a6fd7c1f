"""Synthetic texture/defect datasets and MVTec-style directory I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import read_image, to_uint8, write_image
from .tensor import Tensor, bilinear_resize

DEFECT_TYPES = ("blob", "scratch", "patch")
IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


class DatasetError(ValueError):
    pass


@dataclass
class LabeledSample:
    image: np.ndarray  # float32 [c, h, w] in [0, 1]
    label: int  # 0 normal, 1 anomalous
    mask: np.ndarray | None = None  # uint8 [h, w] in {0, 1}
    name: str = ""
    defect: str = "good"


@dataclass
class Splits:
    train: list[LabeledSample] = field(default_factory=list)
    eval: list[LabeledSample] = field(default_factory=list)


def stack_images(samples: list[LabeledSample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


# -- synthetic generator --------------------------------------------------------------


@dataclass
class _Family:
    freqs: np.ndarray  # cycles per image
    angles: np.ndarray
    amps: np.ndarray


def _family(rng: np.random.Generator) -> _Family:
    k = int(rng.integers(3, 7))
    return _Family(rng.uniform(2.0, 7.0, k), rng.uniform(0.0, np.pi, k), rng.uniform(0.5, 1.0, k))


def _grating(fam: _Family, extent: int, rng: np.random.Generator, jitter: float = 0.05) -> np.ndarray:
    yy, xx = np.mgrid[0:extent, 0:extent] / extent
    acc = np.zeros((extent, extent))
    for f, a, amp in zip(fam.freqs, fam.angles, fam.amps):
        ang = a + rng.uniform(-jitter, jitter)
        phase = rng.uniform(0, 2 * np.pi)
        acc += amp * np.sin(2 * np.pi * f * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
    return acc / fam.amps.sum()


def _value_noise(extent: int, rng: np.random.Generator, cells: int = 8) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, (1, 1, cells, cells))
    return bilinear_resize(Tensor(coarse), extent, extent).data[0, 0]


def _texture(fam: _Family, extent: int, rng: np.random.Generator) -> np.ndarray:
    img = 0.5 + 0.3 * _grating(fam, extent, rng) + 0.1 * _value_noise(extent, rng)
    return np.clip(img, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return (to_uint8(img).astype(np.float32) / 255.0).astype(np.float32)


def _blob(img, extent, rng):
    ry, rx = rng.uniform(extent / 16, extent / 6, 2)
    r = max(rx, ry) + 1
    cy, cx = rng.uniform(r, extent - r, 2)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:extent, 0:extent] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    delta = rng.uniform(0.3, 0.5) * rng.choice([-1.0, 1.0])
    out = img.copy()
    out[mask] = np.clip(out[mask] + delta, 0.0, 1.0)
    return out, mask


def _scratch(img, extent, rng):
    length = rng.uniform(extent / 4, extent / 2)
    ang = rng.uniform(0, np.pi)
    width = rng.uniform(1.5, 3.0)
    margin = length / 2 + 2
    cy, cx = rng.uniform(margin, extent - margin, 2)
    p0 = np.array([cy - np.sin(ang) * length / 2, cx - np.cos(ang) * length / 2])
    p1 = np.array([cy + np.sin(ang) * length / 2, cx + np.cos(ang) * length / 2])
    yy, xx = np.mgrid[0:extent, 0:extent] + 0.5
    pts = np.stack([yy, xx], axis=-1)
    d = p1 - p0
    t = np.clip(((pts - p0) @ d) / (d @ d), 0.0, 1.0)
    dist = np.linalg.norm(pts - (p0 + t[..., None] * d), axis=-1)
    cover = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    value = 0.95 if rng.random() < 0.5 else 0.05
    out = img * (1 - cover) + value * cover
    return out, cover >= 0.5


def _patch(img, extent, rng, fam: _Family):
    ph, pw = (int(v) for v in rng.integers(extent // 8, extent // 4 + 1, 2))
    y0 = int(rng.integers(0, extent - ph + 1))
    x0 = int(rng.integers(0, extent - pw + 1))
    foreign = _Family(fam.freqs * 2.0, fam.angles + np.pi / 2, fam.amps)
    alien = np.clip(0.5 + 0.3 * _grating(foreign, extent, rng) + 0.1 * _value_noise(extent, rng), 0, 1)
    out = img.copy()
    out[y0 : y0 + ph, x0 : x0 + pw] = alien[y0 : y0 + ph, x0 : x0 + pw]
    mask = np.zeros((extent, extent), dtype=bool)
    mask[y0 : y0 + ph, x0 : x0 + pw] = True
    return out, mask


def generate_synthetic_dataset(
    seed: int,
    n_normal: int,
    n_anomalous: int,
    extent: int = 64,
    n_test_normal: int | None = None,
) -> Splits:
    """Seeded grayscale texture dataset.

    Training images are normal textures drawn from one family of 3-6 sinusoid gratings
    plus value noise. Evaluation holds ``n_test_normal`` fresh normals followed by
    ``n_anomalous`` textures carrying one defect each (blob, scratch or foreign patch,
    cycled in that order) with the defect support as mask.
    """
    if extent < 8 or extent % 4:
        raise DatasetError("extent must be a multiple of 4 and at least 8")
    if n_normal < 2 or n_anomalous < 0:
        raise DatasetError("need n_normal >= 2 and n_anomalous >= 0")
    if n_test_normal is None:
        n_test_normal = max(1, n_anomalous)
    if n_test_normal < 0:
        raise DatasetError("n_test_normal must be >= 0")
    fam = _family(np.random.default_rng([seed, 0]))
    splits = Splits()
    for i in range(n_normal):
        rng = np.random.default_rng([seed, 1, i])
        img = _quantize(_texture(fam, extent, rng))
        splits.train.append(LabeledSample(img[None], 0, None, f"{i:04d}", "good"))
    for i in range(n_test_normal):
        rng = np.random.default_rng([seed, 2, i])
        img = _quantize(_texture(fam, extent, rng))
        splits.eval.append(LabeledSample(img[None], 0, None, f"{i:04d}", "good"))
    for i in range(n_anomalous):
        rng = np.random.default_rng([seed, 3, i])
        base = _texture(fam, extent, rng)
        kind = DEFECT_TYPES[i % len(DEFECT_TYPES)]
        if kind == "blob":
            img, mask = _blob(base, extent, rng)
        elif kind == "scratch":
            img, mask = _scratch(base, extent, rng)
        else:
            img, mask = _patch(base, extent, rng, fam)
        splits.eval.append(
            LabeledSample(_quantize(img)[None], 1, mask.astype(np.uint8), f"{i:04d}", kind)
        )
    return splits


# -- directory layout ------------------------------------------------------------------


def _to_u8(image: np.ndarray) -> np.ndarray:
    img = to_uint8(image)
    return img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)


def write_dataset_dir(splits: Splits, root: str | Path) -> None:
    """Write ``train/good``, ``test/<defect>`` and ``ground_truth/<defect>/*_mask`` files."""
    root = Path(root)
    for s in splits.train:
        if s.label != 0:
            raise DatasetError("training split may only contain normal samples")
    for split_dir, samples in (("train", splits.train), ("test", splits.eval)):
        for s in samples:
            ext = ".pgm" if s.image.shape[0] == 1 else ".ppm"
            d = root / split_dir / s.defect
            d.mkdir(parents=True, exist_ok=True)
            write_image(d / f"{s.name}{ext}", _to_u8(s.image))
            if s.label == 1:
                gd = root / "ground_truth" / s.defect
                gd.mkdir(parents=True, exist_ok=True)
                write_image(gd / f"{s.name}_mask.pgm", (np.asarray(s.mask) > 0).astype(np.uint8) * 255)


def load_image(path: str | Path, extent: int | None = None) -> np.ndarray:
    """Read a PGM/PPM file as ``[c, h, w]`` floats in [0, 1], bilinearly resized to ``extent``."""
    raw = read_image(path).astype(np.float32) / 255.0
    chw = raw[None] if raw.ndim == 2 else raw.transpose(2, 0, 1)
    if extent is not None and chw.shape[1:] != (extent, extent):
        chw = bilinear_resize(Tensor(chw.astype(np.float64)), extent, extent).data.astype(np.float32)
    return np.clip(chw, 0.0, 1.0).astype(np.float32)


def _images_in(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset_dir(path: str | Path, extent: int | None = None, channels: int | None = None) -> Splits:
    """Load an MVTec-style tree, resizing to ``extent`` and binarizing masks at 0.5."""
    root = Path(path)
    train_good = root / "train" / "good"
    test_dir = root / "test"
    for d in (train_good, test_dir):
        if not d.is_dir():
            raise DatasetError(f"missing split directory {d}")
    splits = Splits()
    for p in _images_in(train_good):
        splits.train.append(LabeledSample(load_image(p, extent), 0, None, p.stem, "good"))
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        defect = defect_dir.name
        for p in _images_in(defect_dir):
            if defect == "good":
                splits.eval.append(LabeledSample(load_image(p, extent), 0, None, p.stem, "good"))
                continue
            mask_path = root / "ground_truth" / defect / f"{p.stem}_mask.pgm"
            if not mask_path.exists():
                candidates = sorted((root / "ground_truth" / defect).glob(f"{p.stem}_mask.*"))
                if not candidates:
                    raise DatasetError(f"missing mask for {p}")
                mask_path = candidates[0]
            raw_img = read_image(p)
            raw_mask = read_image(mask_path)
            if raw_mask.ndim != 2:
                raise DatasetError(f"{mask_path}: mask must be single-channel")
            if raw_mask.shape != raw_img.shape[:2]:
                raise DatasetError(
                    f"{mask_path}: mask extent {raw_mask.shape} differs from image extent {raw_img.shape[:2]}"
                )
            mask = load_image(mask_path, extent)[0]
            image = load_image(p, extent)
            splits.eval.append(LabeledSample(image, 1, (mask >= 0.5).astype(np.uint8), p.stem, defect))
    if channels is not None:
        for s in splits.train + splits.eval:
            if s.image.shape[0] != channels:
                raise DatasetError(f"{s.defect}/{s.name}: has {s.image.shape[0]} channels, expected {channels}")
    if len(splits.train) == 0:
        raise DatasetError(f"no training images in {train_good}")
    return splits
