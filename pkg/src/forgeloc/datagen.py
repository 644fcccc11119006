"""Procedural forged-image corpus with pixel-exact masks and hierarchical labels.

Real images are synthesized from multi-scale colored noise plus soft geometric
shapes, so the corpus needs no external data. Each forged method tag stamps a
distinct low-level artifact signature (resampling checkerboard, blockwise
quantization, periodic residual, calibrated noise, impulse noise) into the
forged pixels; the signatures occupy well-separated local-variance scales so
the class hierarchy is learnable at desk scale.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .hierarchy import (
    DEFAULT_HIERARCHY,
    FORGED_TAGS,
    FULL_TAGS,
    METHOD_TAGS,
    PARTIAL_TAGS,
    REAL_TAG,
)

MANIFEST_NAME = "manifest.jsonl"
IMAGE_DIR = "images"
MASK_DIR = "masks"
TEST_FRACTION = 0.1

# fingerprint constants; local-variance scales are deliberately log-spaced per tag
QUANT_NOISE_SIGMA = 0.0008      # dmpart-img: 8x8 block quantization + faint noise
NN_PART_SIGMA = 0.01            # ganpart-img: 2x nearest-neighbor checkerboard
IID_FULL_SIGMA = 0.018          # dmfull-img: fine iid noise
SIN_PART_AMP = 0.045            # ganpart-txt: vertical sinusoid residual
NN_FULL_SIGMA = 0.12            # ganfull: strong 2x checkerboard
SIN_FULL_AMP = 0.20             # dmfull-txt: strong horizontal sinusoid residual
IMPULSE_FRACTION = 0.3          # dmpart-txt: salt impulse noise
IMPULSE_AMP = 0.5
SIN_PERIOD = 4


@dataclass
class ImageSample:
    """One corpus item: image in [0,1], binary mask (1 = forged pixel), labels."""

    image: np.ndarray
    mask: np.ndarray
    label_path: tuple[int, int, int, int]
    method_tag: str

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.image.shape}")
        if not np.isfinite(self.image).all():
            raise ValueError("image contains non-finite values")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image values must lie in [0,1]")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError("mask resolution must match image")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")
        DEFAULT_HIERARCHY.validate_path(self.label_path)
        if tuple(self.label_path) != DEFAULT_HIERARCHY.label_path(self.method_tag):
            raise ValueError("label_path inconsistent with method_tag")
        if self.method_tag == REAL_TAG and self.mask.any():
            raise ValueError("real sample must have an all-zero mask")
        if self.method_tag in FULL_TAGS and not self.mask.all():
            raise ValueError("full forgery must have an all-one mask")
        if self.method_tag in PARTIAL_TAGS and (not self.mask.any() or self.mask.all()):
            raise ValueError("partial forgery mask must be nonempty and not full")


@dataclass
class CorpusSpec:
    counts: dict[str, int]
    image_size: int = 256
    seed: int = 0
    output_root: Path | str = "corpus"

    def validate(self) -> None:
        for tag, n in self.counts.items():
            if tag not in METHOD_TAGS:
                raise ValueError(f"unknown method tag {tag!r}")
            if n < 0:
                raise ValueError(f"count for {tag!r} must be >= 0")
        if self.image_size % 8 != 0:
            raise ValueError(f"image_size must be a multiple of 8, got {self.image_size}")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class CorpusRecord:
    image: str
    mask: str
    label_path: tuple[int, int, int, int]
    method_tag: str
    split: str
    record_seed: str

    def to_json(self) -> str:
        return json.dumps({
            "image": self.image,
            "mask": self.mask,
            "label_path": list(self.label_path),
            "method_tag": self.method_tag,
            "split": self.split,
            "record_seed": self.record_seed,
        })

    @classmethod
    def from_json(cls, line: str) -> "CorpusRecord":
        data = json.loads(line)
        return cls(
            image=data["image"],
            mask=data["mask"],
            label_path=tuple(data["label_path"]),
            method_tag=data["method_tag"],
            split=data["split"],
            record_seed=data["record_seed"],
        )


@dataclass
class CorpusManifest:
    root: Path
    records: list[CorpusRecord] = field(default_factory=list)

    def save(self) -> Path:
        path = Path(self.root) / MANIFEST_NAME
        tmp = path.with_suffix(".jsonl.tmp")
        tmp.write_text("".join(r.to_json() + "\n" for r in self.records))
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, root) -> "CorpusManifest":
        path = Path(root) / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"no manifest at {path}")
        records = []
        for i, line in enumerate(path.read_text().splitlines()):
            if not line.strip():
                continue
            try:
                records.append(CorpusRecord.from_json(line))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"corrupt manifest line {i + 1} in {path}: {exc}") from exc
        return cls(root=Path(root), records=records)


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per corpus record, derived from (corpus seed, record index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _upsample_nn(arr: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


def _upsample_linear(arr: np.ndarray, out_size: int) -> np.ndarray:
    """Cheap separable linear upsampling used by the base-texture octaves."""
    src = arr.shape[0]
    coords = (np.arange(out_size) + 0.5) * src / out_size - 0.5
    coords = np.clip(coords, 0, src - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    rows = arr[lo] * (1 - frac)[:, None, None] + arr[hi] * frac[:, None, None]
    cols = rows[:, lo] * (1 - frac)[None, :, None] + rows[:, hi] * frac[None, :, None]
    return cols


def _smooth_field(rng: np.random.Generator, size: int, octaves=(16, 8, 4), weights=(1.0, 0.5, 0.25)) -> np.ndarray:
    """Multi-scale colored-noise field, 3 channels, roughly centered on 0."""
    out = np.zeros((size, size, 3), dtype=np.float64)
    for div, w in zip(octaves, weights):
        coarse = max(2, size // div)
        noise = rng.standard_normal((coarse, coarse, 3))
        out += w * _upsample_linear(noise, size)
    mix = rng.uniform(-0.3, 0.3, size=(3, 3)) + np.eye(3)
    out = out @ mix.T
    return out


def _normalize(field: np.ndarray, lo=0.08, hi=0.92) -> np.ndarray:
    fmin, fmax = field.min(), field.max()
    if fmax - fmin < 1e-9:
        return np.full_like(field, (lo + hi) / 2)
    return lo + (hi - lo) * (field - fmin) / (fmax - fmin)


def render_base(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural stand-in for a real photograph; values on the 1/255 grid."""
    field = _normalize(_smooth_field(rng, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.1, 0.9, 2) * size
        ry, rx = rng.uniform(0.08, 0.3, 2) * size
        angle = rng.uniform(0, np.pi)
        ca, sa = np.cos(angle), np.sin(angle)
        u = (xx - cx) * ca + (yy - cy) * sa
        v = -(xx - cx) * sa + (yy - cy) * ca
        dist = (u / rx) ** 2 + (v / ry) ** 2
        alpha = np.clip(1.5 - dist, 0, 1)[..., None] * rng.uniform(0.3, 0.7)
        color = rng.uniform(0.15, 0.85, 3)
        field = (1 - alpha) * field + alpha * color
    return _quantize(field).astype(np.float32) / 255.0


def _flat_content(rng: np.random.Generator, size: int, squeeze: float = 1.0) -> np.ndarray:
    """Heavily smoothed field so the stamped fingerprint dominates local statistics."""
    field = _normalize(_smooth_field(rng, size, octaves=(32, 16), weights=(1.0, 0.3)))
    blurred = np.stack([ndimage.gaussian_filter(field[..., c], sigma=4.0) for c in range(3)], axis=-1)
    if squeeze != 1.0:
        blurred = 0.5 + (blurred - 0.5) * squeeze
    return blurred


def _sinusoid(size: int, amp: float, period: int, horizontal: bool, phase: float) -> np.ndarray:
    idx = np.arange(size, dtype=np.float64)
    wave = amp * np.sin(2 * np.pi * idx / period + phase)
    grid = np.tile(wave, (size, 1)) if horizontal else np.tile(wave[:, None], (1, size))
    return grid[..., None]


def forged_content(method_tag: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Fingerprinted pixel content for a forged region of the given method tag."""
    if method_tag == "ganfull":
        half = _flat_content(rng, size // 2)
        half = half + rng.standard_normal(half.shape) * NN_FULL_SIGMA
        content = _upsample_nn(half, 2)
    elif method_tag == "ganpart-img":
        half = _flat_content(rng, size // 2, squeeze=0.6)
        half = half + rng.standard_normal(half.shape) * NN_PART_SIGMA
        content = _upsample_nn(half, 2)
    elif method_tag == "dmfull-img":
        content = _flat_content(rng, size) + rng.standard_normal((size, size, 3)) * IID_FULL_SIGMA
    elif method_tag == "dmfull-txt":
        content = _flat_content(rng, size, squeeze=0.5)
        content = content + _sinusoid(size, SIN_FULL_AMP, SIN_PERIOD, True, rng.uniform(0, 2 * np.pi))
    elif method_tag == "ganpart-txt":
        content = _flat_content(rng, size, squeeze=0.8)
        content = content + _sinusoid(size, SIN_PART_AMP, SIN_PERIOD, False, rng.uniform(0, 2 * np.pi))
    elif method_tag == "dmpart-img":
        base = _flat_content(rng, size)
        k = size // 8
        blocks = base.reshape(k, 8, k, 8, 3).mean(axis=(1, 3))
        content = _upsample_nn(blocks, 8) + rng.standard_normal(base.shape) * QUANT_NOISE_SIGMA
    elif method_tag == "dmpart-txt":
        content = _flat_content(rng, size)
        hits = rng.random((size, size, 1)) < IMPULSE_FRACTION
        signs = np.where(rng.random((size, size, 1)) < 0.5, -1.0, 1.0)
        content = content + hits * signs * IMPULSE_AMP
    else:
        raise ValueError(f"{method_tag!r} is not a forged method tag")
    return np.clip(content, 0.0, 1.0)


def sample_blob(rng: np.random.Generator, size: int) -> np.ndarray:
    """Connected forged region covering 2%-40% of the image."""
    target = rng.uniform(0.06, 0.30)
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8)
    blob = field >= np.quantile(field, 1 - target)
    labels, n = ndimage.label(blob)
    if n > 1:
        sizes = ndimage.sum(blob, labels, index=np.arange(1, n + 1))
        blob = labels == (1 + int(np.argmax(sizes)))
    frac = blob.mean()
    if not 0.02 <= frac <= 0.40:
        # fall back to a disk with the target area
        radius = size * np.sqrt(target / np.pi)
        cy, cx = rng.uniform(radius + 1, size - radius - 1, 2)
        yy, xx = np.mgrid[0:size, 0:size]
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    return blob


def _feather_alpha(blob: np.ndarray) -> np.ndarray:
    """Blend weight ramping over the two outermost in-region pixel rings."""
    dist = ndimage.distance_transform_edt(blob)
    return np.minimum(dist / 3.0, 1.0)


def _force_visible_edit(edited_u8: np.ndarray, base_u8: np.ndarray, blob: np.ndarray) -> np.ndarray:
    """Guarantee every masked pixel differs from the base after quantization."""
    same = (edited_u8 == base_u8).all(axis=2) & blob
    if same.any():
        channel = edited_u8[..., 0]
        bump = np.where(channel < 255, channel + 1, channel - 1)
        edited_u8[..., 0] = np.where(same, bump, channel)
    return edited_u8


def synthesize_partial_forgery(base: np.ndarray, method_tag: str, rng: np.random.Generator) -> ImageSample:
    """Edit a connected region of `base`; the mask is exactly the modified pixel set."""
    if method_tag not in PARTIAL_TAGS:
        raise ValueError(f"{method_tag!r} is not a partial-edit tag")
    size = base.shape[0]
    blob = sample_blob(rng, size)
    alpha = _feather_alpha(blob)[..., None]
    content = forged_content(method_tag, size, rng)
    edited = base * (1 - alpha) + content * alpha
    base_u8 = _quantize(base)
    edited_u8 = _quantize(edited)
    edited_u8[~blob] = base_u8[~blob]
    edited_u8 = _force_visible_edit(edited_u8, base_u8, blob)
    return ImageSample(
        image=edited_u8.astype(np.float32) / 255.0,
        mask=blob.astype(np.float32),
        label_path=DEFAULT_HIERARCHY.label_path(method_tag),
        method_tag=method_tag,
    )


def synthesize_full_forgery(method_tag: str, size: int, rng: np.random.Generator) -> ImageSample:
    if method_tag not in FULL_TAGS:
        raise ValueError(f"{method_tag!r} is not a full-forgery tag")
    image = _quantize(forged_content(method_tag, size, rng)).astype(np.float32) / 255.0
    return ImageSample(
        image=image,
        mask=np.ones((size, size), dtype=np.float32),
        label_path=DEFAULT_HIERARCHY.label_path(method_tag),
        method_tag=method_tag,
    )


def synthesize_record(method_tag: str, size: int, rng: np.random.Generator) -> ImageSample:
    if method_tag == REAL_TAG:
        return ImageSample(
            image=render_base(rng, size),
            mask=np.zeros((size, size), dtype=np.float32),
            label_path=DEFAULT_HIERARCHY.label_path(REAL_TAG),
            method_tag=REAL_TAG,
        )
    if method_tag in FULL_TAGS:
        return synthesize_full_forgery(method_tag, size, rng)
    return synthesize_partial_forgery(render_base(rng, size), method_tag, rng)


def apply_dihedral(image: np.ndarray, mask: np.ndarray, quarter_turns: int, flip: bool):
    """Apply the same rotation/flip to an image and its mask."""
    img = np.rot90(image, quarter_turns, axes=(0, 1))
    msk = np.rot90(mask, quarter_turns, axes=(0, 1))
    if flip:
        img = img[:, ::-1]
        msk = msk[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


def augment(sample: ImageSample, rng: np.random.Generator) -> ImageSample:
    """Random rotation/flip applied identically to image and mask; labels unchanged."""
    k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    img, msk = apply_dihedral(sample.image, sample.mask, k, flip)
    return ImageSample(image=img, mask=msk, label_path=sample.label_path, method_tag=sample.method_tag)


def assign_splits(method_tags: list[str], seed: int, test_fraction: float = TEST_FRACTION) -> list[str]:
    """Stratified train/test assignment; global test count is round(n * fraction)."""
    n = len(method_tags)
    global_test = int(round(n * test_fraction))
    by_tag: dict[str, list[int]] = {}
    for i, tag in enumerate(method_tags):
        by_tag.setdefault(tag, []).append(i)
    tags = sorted(by_tag)
    quotas = {t: int(np.floor(len(by_tag[t]) * test_fraction)) for t in tags}
    remainders = sorted(
        tags,
        key=lambda t: (-(len(by_tag[t]) * test_fraction - quotas[t]), t),
    )
    short = global_test - sum(quotas.values())
    for t in remainders[: max(short, 0)]:
        if quotas[t] < len(by_tag[t]):
            quotas[t] += 1
    splits = ["train"] * n
    for ti, t in enumerate(tags):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1D, ti]))
        order = rng.permutation(len(by_tag[t]))
        for j in order[: quotas[t]]:
            splits[by_tag[t][j]] = "test"
    return splits


def _write_png(path: Path, array: np.ndarray) -> None:
    tmp = path.with_suffix(".png.tmp")
    Image.fromarray(array).save(tmp, format="PNG")
    os.replace(tmp, path)


def _build_and_write(args) -> None:
    seed, index, tag, size, root = args
    sample = synthesize_record(tag, size, record_rng(seed, index))
    sample.validate()
    _write_png(Path(root) / IMAGE_DIR / f"{index:06d}.png", _quantize(sample.image))
    _write_png(Path(root) / MASK_DIR / f"{index:06d}.png", (sample.mask * 255).astype(np.uint8))


def generate_corpus(spec: CorpusSpec, workers: int = 1) -> CorpusManifest:
    """Write images, masks and the manifest; byte-identical for identical (spec, seed)."""
    spec.validate()
    root = Path(spec.output_root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    (root / MASK_DIR).mkdir(parents=True, exist_ok=True)

    tags: list[str] = []
    for tag in METHOD_TAGS:
        tags.extend([tag] * spec.counts.get(tag, 0))
    jobs = [(spec.seed, i, tag, spec.image_size, str(root)) for i, tag in enumerate(tags)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_build_and_write, jobs, chunksize=4))
    else:
        for job in jobs:
            _build_and_write(job)

    splits = assign_splits(tags, spec.seed)
    records = [
        CorpusRecord(
            image=f"{IMAGE_DIR}/{i:06d}.png",
            mask=f"{MASK_DIR}/{i:06d}.png",
            label_path=DEFAULT_HIERARCHY.label_path(tag),
            method_tag=tag,
            split=splits[i],
            record_seed=f"{spec.seed}:{i}",
        )
        for i, tag in enumerate(tags)
    ]
    manifest = CorpusManifest(root=root, records=records)
    manifest.save()
    return manifest


def load_sample(root, record: CorpusRecord) -> ImageSample:
    image = np.asarray(Image.open(Path(root) / record.image), dtype=np.float32) / 255.0
    mask = (np.asarray(Image.open(Path(root) / record.mask)) > 127).astype(np.float32)
    return ImageSample(image=image, mask=mask, label_path=tuple(record.label_path),
                       method_tag=record.method_tag)


def load_dataset(root, split_seed: int):
    """Deterministic stratified 9:1 split of the manifest under `root`."""
    manifest = CorpusManifest.load(root)
    splits = assign_splits([r.method_tag for r in manifest.records], split_seed)
    train = [r for r, s in zip(manifest.records, splits) if s == "train"]
    test = [r for r, s in zip(manifest.records, splits) if s == "test"]
    return train, test
