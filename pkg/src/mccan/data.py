"""Image records, phantom datasets, intermediate-domain synthesis and batching.

Pixels are stored in calibrated units (CT-number-like integers, water at
1024). Networks see the fixed affine map ``(u - 1024) / 1024``, which takes
[0, 2048] to [-1, 1] and is exact in both directions for integer input.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .imfile import read_image, write_png16

INTENSITY_CENTER = 1024.0
INTENSITY_HALF_RANGE = 1024.0
BACKGROUND_LEVEL = 1024
HIGHPASS_SIGMA = 2.0  # gaussian smoothing (pixels) for the high-pass extractor
BACKGROUND_ROI = "bg"

MANIFEST_NAME = "manifest.tsv"
ROIS_NAME = "rois.tsv"


class DataError(ValueError):
    pass


def to_unit(pixels):
    return (pixels - INTENSITY_CENTER) / INTENSITY_HALF_RANGE


def from_unit(values):
    return values * INTENSITY_HALF_RANGE + INTENSITY_CENTER


@dataclass(frozen=True)
class Roi:
    """Half-open rectangle ``[x, x + width) x [y, y + height)``, origin top-left."""

    image_id: str
    roi_id: str
    x: int
    y: int
    width: int
    height: int

    def check(self, shape: tuple[int, ...]) -> None:
        h, w = shape[-2:]
        if self.width * self.height < 4 or self.width < 1 or self.height < 1:
            raise DataError(f"ROI {self.roi_id} of {self.image_id} has area < 4")
        if self.x < 0 or self.y < 0 or self.x + self.width > w or self.y + self.height > h:
            raise DataError(f"ROI {self.roi_id} ({self.x},{self.y},{self.width},{self.height}) outside {w}x{h} image")

    def window(self, pixels: np.ndarray) -> np.ndarray:
        self.check(pixels.shape)
        return pixels[..., self.y : self.y + self.height, self.x : self.x + self.width]


@dataclass(frozen=True)
class ImageRecord:
    pixels: np.ndarray
    domain: int
    source_id: str

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise DataError(f"{self.source_id}: images must be square 2-D arrays, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise DataError(f"{self.source_id}: non-finite pixel values")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class PhantomConfig:
    n_images: int
    side: int = 64
    noise_sigmas: tuple[float, ...] = (50.0, 25.0, 0.0)
    seed: int = 0
    n_ellipses: tuple[int, int] = (3, 8)
    intermediate: str = "gaussian"  # or "injected": clean + w * residual noise of a noisy-domain image

    def __post_init__(self):
        object.__setattr__(self, "noise_sigmas", tuple(float(s) for s in self.noise_sigmas))
        s = self.noise_sigmas
        if len(s) < 2:
            raise DataError("need a noise sigma for each of at least 2 domains")
        if any(b >= a for a, b in zip(s, s[1:])) or s[-1] < 0:
            raise DataError(f"noise sigmas must be strictly decreasing and non-negative: {s}")
        if self.n_images < 0:
            raise DataError("n_images must be >= 0")
        if self.side < 32:
            raise DataError("phantom side must be >= 32 pixels")
        if self.intermediate not in ("gaussian", "injected"):
            raise DataError(f"unknown intermediate construction {self.intermediate!r}")
        lo, hi = self.n_ellipses
        if not 1 <= lo <= hi:
            raise DataError(f"bad ellipse count range {self.n_ellipses}")


@dataclass
class Dataset:
    domain_names: tuple[str, ...]
    records: list[ImageRecord]
    rois: dict[str, list[Roi]] = field(default_factory=dict)
    references: dict[str, np.ndarray] = field(default_factory=dict)  # noise-free ground truth
    extractor: dict[str, str] = field(default_factory=dict)

    def domain_records(self, domain: int) -> list[ImageRecord]:
        return [r for r in self.records if r.domain == domain]

    def record(self, source_id: str) -> ImageRecord:
        for r in self.records:
            if r.source_id == source_id:
                return r
        raise KeyError(source_id)

    @property
    def domains(self) -> set[int]:
        return {r.domain for r in self.records}


def synthesize_intermediate(
    clean: ImageRecord, noise_field: np.ndarray, w: float = 0.5, domain: int | None = None
) -> ImageRecord:
    noise_field = np.asarray(noise_field, dtype=np.float64)
    if noise_field.shape != clean.pixels.shape:
        raise DataError(f"noise field {noise_field.shape} does not match image {clean.pixels.shape}")
    return ImageRecord(
        clean.pixels + w * noise_field,
        clean.domain if domain is None else domain,
        clean.source_id,
    )


def extract_noise(noisy: ImageRecord, method: str = "residual", reference: ImageRecord | None = None) -> np.ndarray:
    """Zero-mean noise field of ``noisy``.

    ``residual`` subtracts a pixel-aligned clean reference; ``highpass``
    subtracts a Gaussian-smoothed copy (sigma ``HIGHPASS_SIGMA``, reflected
    borders), which leaves constant images at zero.
    """
    if method == "residual":
        if reference is None:
            raise DataError("residual noise extraction needs a reference image")
        ref = reference.pixels if isinstance(reference, ImageRecord) else np.asarray(reference, dtype=np.float64)
        if ref.shape != noisy.pixels.shape:
            raise DataError(f"reference {ref.shape} does not match image {noisy.pixels.shape}")
        field_ = noisy.pixels - ref
    elif method == "highpass":
        field_ = noisy.pixels - ndimage.gaussian_filter(noisy.pixels, HIGHPASS_SIGMA, mode="reflect")
    else:
        raise DataError(f"unknown noise extraction method {method!r}")
    return field_ - field_.mean()


def random_crop(img: ImageRecord, crop: int, rng: np.random.Generator) -> ImageRecord:
    if crop > img.side or crop < 1:
        raise DataError(f"crop {crop} does not fit a {img.side}-pixel image")
    y, x = rng.integers(0, img.side - crop + 1, size=2)
    return replace(img, pixels=img.pixels[y : y + crop, x : x + crop].copy())


# --- phantoms ----------------------------------------------------------------


@dataclass(frozen=True)
class _Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float
    value: int

    def mask(self, side: int) -> np.ndarray:
        yy, xx = np.mgrid[0:side, 0:side] + 0.5
        dx, dy = xx - self.cx, yy - self.cy
        c, s = math.cos(self.angle), math.sin(self.angle)
        u, v = c * dx + s * dy, -s * dx + c * dy
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


def _background_box(side: int) -> tuple[int, int, int]:
    r = side // 4
    return 2, 2, r  # x, y, size


def _place_ellipses(side: int, rng: np.random.Generator, count: int) -> list[_Ellipse]:
    bx, by, br = _background_box(side)
    placed: list[_Ellipse] = []
    for _ in range(400 * count):
        if len(placed) == count:
            break
        a, b = rng.uniform(side / 14, side / 6, size=2)
        r = max(a, b)
        cx, cy = rng.uniform(r + 2, side - r - 2, size=2)
        # keep the reserved background square clear
        qx, qy = min(max(cx, bx), bx + br), min(max(cy, by), by + br)
        if math.hypot(cx - qx, cy - qy) < r + 3:
            continue
        if any(math.hypot(cx - e.cx, cy - e.cy) < r + max(e.a, e.b) + 3 for e in placed):
            continue
        value = 0
        for _ in range(100):
            value = int(rng.integers(700, 1901))
            if abs(value - BACKGROUND_LEVEL) >= 100 and all(abs(value - e.value) >= 50 for e in placed):
                break
        placed.append(_Ellipse(cx, cy, a, b, float(rng.uniform(0, math.pi)), value))
    if len(placed) < min(count, 3):
        raise DataError(f"could not place {count} ellipses on a {side}-pixel phantom")
    return placed


def _inner_square(e: _Ellipse, side: int) -> tuple[int, int, int]:
    mask = e.mask(side)
    h = int(min(e.a, e.b) / math.sqrt(2))
    while h >= 1:
        x0, y0 = int(round(e.cx - h)), int(round(e.cy - h))
        size = 2 * h
        if mask[y0 : y0 + size, x0 : x0 + size].all():
            return x0, y0, size
        h -= 1
    raise DataError("ellipse too small for a 2x2 ROI")


def _phantom(side: int, rng: np.random.Generator, n_range: tuple[int, int]) -> tuple[np.ndarray, list[tuple[str, int, int, int]]]:
    count = int(rng.integers(n_range[0], n_range[1] + 1))
    img = np.full((side, side), float(BACKGROUND_LEVEL))
    boxes = []
    bx, by, br = _background_box(side)
    boxes.append((BACKGROUND_ROI, bx, by, br))
    for i, e in enumerate(_place_ellipses(side, rng, count)):
        img[e.mask(side)] = e.value
        x0, y0, size = _inner_square(e, side)
        boxes.append((f"e{i}", x0, y0, size))
    return img, boxes


def _noisy(clean: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return clean.copy()
    return np.clip(np.rint(clean + rng.normal(0.0, sigma, clean.shape)), 0, 65535)


def make_phantom_dataset(cfg: PhantomConfig, domain_names: Sequence[str] | None = None) -> Dataset:
    """Unpaired phantom images per domain, with ground-truth ROIs.

    Each image is a constant background with 3-8 non-overlapping ellipses of
    distinct intensities plus Gaussian noise at the domain's sigma. Domains
    are drawn independently, so no image has a counterpart in another domain.
    """
    n_dom = len(cfg.noise_sigmas)
    if domain_names is None:
        from .chain import build_chain

        domain_names = build_chain(n_dom).names
    ds = Dataset(tuple(domain_names), [])
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(n_dom)]
    head_noise: list[np.ndarray] = []
    for d in range(n_dom):
        rng = streams[d]
        for i in range(cfg.n_images):
            sid = f"{domain_names[d]}_{i:05d}"
            clean, boxes = _phantom(cfg.side, rng, cfg.n_ellipses)
            interior = 0 < d < n_dom - 1
            if interior and cfg.intermediate == "injected":
                w = cfg.noise_sigmas[d] / cfg.noise_sigmas[0]
                mixed = synthesize_intermediate(ImageRecord(clean, d, sid), head_noise[i], w)
                pixels = np.clip(np.rint(mixed.pixels), 0, 65535)
                ds.extractor[sid] = "residual"
            else:
                pixels = _noisy(clean, cfg.noise_sigmas[d], rng)
                ds.extractor[sid] = "none"
            rec = ImageRecord(pixels, d, sid)
            if d == 0 and cfg.intermediate == "injected":
                head_noise.append(extract_noise(rec, "residual", ImageRecord(clean, d, sid)))
            ds.records.append(rec)
            ds.references[sid] = clean
            ds.rois[sid] = [Roi(sid, rid, x, y, s, s) for rid, x, y, s in boxes]
    return ds


# --- persistence ---------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir: "str | Path") -> Path:
    """Write images, clean references, manifest and ROI sidecar under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if ds.references:
        (out / "clean").mkdir(exist_ok=True)
    with open(out / MANIFEST_NAME, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["path", "domain", "source_id", "extractor", "reference"])
        for r in ds.records:
            path = f"images/{r.source_id}.png"
            write_png16(out / path, r.pixels)
            ref = "-"
            if r.source_id in ds.references:
                ref = f"clean/{r.source_id}.png"
                write_png16(out / ref, ds.references[r.source_id])
            w.writerow([path, ds.domain_names[r.domain], r.source_id, ds.extractor.get(r.source_id, "none"), ref])
    write_rois(out / ROIS_NAME, [roi for r in ds.records for roi in ds.rois.get(r.source_id, [])])
    return out


def load_dataset(root: "str | Path", domain_names: Sequence[str] | None = None) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"{root}: no {MANIFEST_NAME}")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if domain_names is None:
        domain_names = []
        for row in rows:
            if row["domain"] not in domain_names:
                domain_names.append(row["domain"])
    names = tuple(domain_names)
    ds = Dataset(names, [])
    for row in rows:
        if row["domain"] not in names:
            raise DataError(f"manifest domain {row['domain']!r} not among {names}")
        sid = row["source_id"]
        ds.records.append(ImageRecord(read_image(root / row["path"]), names.index(row["domain"]), sid))
        ds.extractor[sid] = row.get("extractor", "none")
        ref = row.get("reference", "-")
        if ref and ref != "-":
            ds.references[sid] = read_image(root / ref)
    if (root / ROIS_NAME).exists():
        for roi in read_rois(root / ROIS_NAME):
            ds.rois.setdefault(roi.image_id, []).append(roi)
    return ds


def write_rois(path: "str | Path", rois: Sequence[Roi]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["image_id", "roi_id", "x", "y", "width", "height"])
        for r in rois:
            w.writerow([r.image_id, r.roi_id, r.x, r.y, r.width, r.height])


def read_rois(path: "str | Path") -> list[Roi]:
    with open(path, newline="") as fh:
        return [
            Roi(row["image_id"], row["roi_id"], int(row["x"]), int(row["y"]), int(row["width"]), int(row["height"]))
            for row in csv.DictReader(fh, delimiter="\t")
        ]


# --- batching ------------------------------------------------------------------


class BatchStream:
    """Endless shuffled batches of one domain, reshuffled every epoch.

    The last batch of an epoch may be short so that every image is seen
    exactly once per epoch. Crops are drawn per image per draw.
    """

    def __init__(self, records: Sequence[ImageRecord], batch_size: int, crop: int, seed: "int | Sequence[int]"):
        if not records:
            raise DataError("no images to stream")
        if batch_size < 1 or batch_size > len(records):
            raise DataError(f"batch_size {batch_size} must be in [1, {len(records)}]")
        self.records = list(records)
        self.batch_size = batch_size
        self.crop = crop
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.epoch = 0
        self.pos = 0
        self.order = self.rng.permutation(len(self.records))

    def __iter__(self) -> Iterator[np.ndarray]:
        return self

    def __next__(self) -> np.ndarray:
        if self.pos >= len(self.order):
            self.epoch += 1
            self.pos = 0
            self.order = self.rng.permutation(len(self.records))
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += len(idx)
        return np.stack([random_crop(self.records[i], self.crop, self.rng).pixels for i in idx])

    def next_indices(self) -> np.ndarray:
        """Indices the next call would draw (for tests of the sampling order)."""
        if self.pos >= len(self.order):
            raise DataError("epoch exhausted; call next() to reshuffle")
        return self.order[self.pos : self.pos + self.batch_size]

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "pos": self.pos, "order": self.order.tolist(), "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.epoch = int(state["epoch"])
        self.pos = int(state["pos"])
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.rng.bit_generator.state = state["rng"]


def batch_stream(ds: Dataset, domain: int, batch_size: int, crop: int, seed: int) -> BatchStream:
    records = ds.domain_records(domain)
    if not records:
        raise DataError(f"dataset has no images for domain {domain}")
    return BatchStream(records, batch_size, crop, (int(seed), int(domain)))
