"""Fundus image ingestion, preprocessing, degradation, and dataset assembly.

Degradations emulate real capture defects at full sensor resolution: a
radial light-transmission gain field, Gaussian blur, and soft elliptical
dust/reflection artifacts. Each is a pure function of (image, seed, params);
the 2^3 on/off combinations expand every source image into 8 variants, with
the combination encoded as light*4 + blur*2 + artifacts.

Randomness comes from Philox streams split per (seed, image index, stage),
so manifests and degraded corpora are bit-reproducible.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor

MODEL_INPUT_SIZE = 128

# stage codes for PRNG stream splitting
_STAGE_AUGMENT = 0
_STAGE_LIGHT = 1
_STAGE_BLUR = 2
_STAGE_ARTIFACTS = 3
_STAGE_SAMPLE = 4


class DataError(ValueError):
    """Unusable input data: undecodable image, malformed manifest, shortfall."""


def split_rng(seed: int, index: int = 0, stage: int = 0) -> np.random.Generator:
    """Philox stream for one (seed, image index, stage) triple.

    Key word 0 is the user seed; key word 1 packs index*8 + stage, so every
    image and pipeline stage draws from an independent, portable stream.
    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (index * 8 + stage) & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class FundusImage:
    """RGB raster with provenance metadata; 8-bit per channel, row-major."""

    pixels: np.ndarray  # H x W x 3 uint8
    source_id: str = ""

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            raise DataError(f"pixels must be uint8, got {self.pixels.dtype}")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"pixels must be HxWx3, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def load_image(path) -> FundusImage:
    """Decode a PNG or JPEG file into a FundusImage."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            pixels = np.asarray(rgb, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return FundusImage(pixels=pixels, source_id=str(path))


def decode_image(data: bytes, source_id: str = "upload") -> FundusImage:
    """Decode PNG/JPEG bytes (e.g. an HTTP upload)."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"cannot decode image bytes: {exc}") from exc
    return FundusImage(pixels=pixels, source_id=source_id)


def save_png(img: FundusImage, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")


def encode_png(img: FundusImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the pixel-center convention, returning float64."""
    h, w = pixels.shape[:2]
    src = pixels.astype(np.float64)

    def axis_coords(out_n, in_n):
        coords = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
        coords = np.clip(coords, 0.0, in_n - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, in_n - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_h, h)
    x0, x1, fx = axis_coords(out_w, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(img: FundusImage, size: int = MODEL_INPUT_SIZE) -> Tensor:
    """Resize to the model input resolution and scale channels to [0,1].

    Returns a (3, size, size) float32 tensor in CHW order (128x128 default).
    """
    if min(img.width, img.height) < 16:
        raise DataError(
            f"image too small to grade: {img.width}x{img.height} (min dimension 16)"
        )
    resized = _resize_bilinear(img.pixels, size, size)
    chw = (resized / 255.0).transpose(2, 0, 1).astype(np.float32)
    return Tensor(chw)


def preprocessed_image(img: FundusImage, size: int = MODEL_INPUT_SIZE) -> FundusImage:
    """The resized image itself (for overlay rendering)."""
    resized = _resize_bilinear(img.pixels, size, size)
    return FundusImage(
        pixels=np.clip(np.rint(resized), 0, 255).astype(np.uint8),
        source_id=img.source_id,
    )


# ---------------------------------------------------------------------------
# Augmentation

@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float
    flip: bool
    scale: float
    shift_frac: float


def sample_augment_params(seed: int, index: int = 0) -> AugmentParams:
    rng = split_rng(seed, index, _STAGE_AUGMENT)
    return AugmentParams(
        rotation_deg=float(rng.uniform(0.0, 360.0)),
        flip=bool(rng.random() < 0.5),
        scale=float(rng.uniform(0.9, 1.1)),
        shift_frac=float(rng.uniform(-0.1, 0.1)),
    )


def _affine_sample(pixels: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Sample pixels at inverse-mapped coordinates, bilinear, black fill."""
    h, w = pixels.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]

    def gather(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = pixels[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)].astype(np.float64)
        return vals * inside[..., None]

    out = (
        gather(y0, x0) * (1 - fx) * (1 - fy)
        + gather(y0, x0 + 1) * fx * (1 - fy)
        + gather(y0 + 1, x0) * (1 - fx) * fy
        + gather(y0 + 1, x0 + 1) * fx * fy
    )
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment_with(img: FundusImage, params: AugmentParams) -> FundusImage:
    """Apply flip -> rotate about center -> uniform rescale -> width shift."""
    h, w = img.height, img.width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(params.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    # forward: p' = S * R * F * (p - c) + c + t  =>  inverse map per output pixel
    s = params.scale
    shift = params.shift_frac * w
    fsign = -1.0 if params.flip else 1.0
    # inverse of S*R: rotate by -theta, scale by 1/s; inverse of F: same flip
    inv = np.zeros((2, 3), dtype=np.float64)
    a, b = cos_t / s, sin_t / s
    # x = fsign * ( a*(x'-cx-shift) + b*(y'-cy) ) + cx
    # y =        ( -b*(x'-cx-shift) + a*(y'-cy) ) + cy
    inv[0, 0] = fsign * a
    inv[0, 1] = fsign * b
    inv[0, 2] = fsign * (a * (-cx - shift) + b * (-cy)) + cx
    inv[1, 0] = -b
    inv[1, 1] = a
    inv[1, 2] = (-b) * (-cx - shift) + a * (-cy) + cy
    return FundusImage(pixels=_affine_sample(img.pixels, inv), source_id=img.source_id)


def augment(img: FundusImage, seed: int, index: int = 0) -> FundusImage:
    """Seed-deterministic rotation/flip/rescale/width-shift augmentation."""
    return augment_with(img, sample_augment_params(seed, index))


# ---------------------------------------------------------------------------
# Degradations

@dataclass(frozen=True)
class LightParams:
    """Radial gain field g(r) = clamp(base + amp*exp(-r^2/2sigma^2), 0.2, 1.8)."""

    base_range: tuple[float, float] = (0.7, 1.1)
    amplitude_range: tuple[float, float] = (-0.5, 0.5)
    sigma_frac_range: tuple[float, float] = (0.3, 0.7)
    offset_range: tuple[float, float] = (-20.0, 20.0)


@dataclass(frozen=True)
class BlurParams:
    sigma_range: tuple[float, float] = (1.0, 3.0)


@dataclass(frozen=True)
class ArtifactParams:
    count_range: tuple[int, int] = (2, 6)  # inclusive
    radius_frac_range: tuple[float, float] = (0.02, 0.08)
    alpha_range: tuple[float, float] = (0.3, 0.7)


@dataclass(frozen=True)
class DegradationSpec:
    """Which of the three degradations to apply, plus their parameters."""

    light_transmission: bool
    blur: bool
    artifacts: bool
    seed: int
    light_params: LightParams = field(default_factory=LightParams)
    blur_params: BlurParams = field(default_factory=BlurParams)
    artifact_params: ArtifactParams = field(default_factory=ArtifactParams)

    @property
    def code(self) -> int:
        return int(self.light_transmission) * 4 + int(self.blur) * 2 + int(self.artifacts)


def degrade_light(img: FundusImage, seed: int, params: LightParams = LightParams(),
                  index: int = 0) -> FundusImage:
    """Multiply by a smooth radial gain field, then add a global offset."""
    rng = split_rng(seed, index, _STAGE_LIGHT)
    h, w = img.height, img.width
    cy = rng.uniform(0, h - 1)
    cx = rng.uniform(0, w - 1)
    base = rng.uniform(*params.base_range)
    amp = rng.uniform(*params.amplitude_range)
    sigma = rng.uniform(*params.sigma_frac_range) * min(h, w)
    offset = rng.uniform(*params.offset_range)

    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    r2 = (ys - cy) ** 2 + (xs - cx) ** 2
    gain = np.clip(base + amp * np.exp(-r2 / (2.0 * sigma * sigma)), 0.2, 1.8)
    out = img.pixels.astype(np.float64) * gain[..., None] + offset
    return FundusImage(pixels=np.clip(np.rint(out), 0, 255).astype(np.uint8),
                       source_id=img.source_id)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def degrade_blur(img: FundusImage, seed: int, params: BlurParams = BlurParams(),
                 index: int = 0) -> FundusImage:
    """Separable Gaussian blur with edge-replicate padding."""
    rng = split_rng(seed, index, _STAGE_BLUR)
    sigma = rng.uniform(*params.sigma_range)
    kernel = _gaussian_kernel(sigma)
    radius = len(kernel) // 2
    src = img.pixels.astype(np.float64)
    padded = np.pad(src, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    rows = np.zeros_like(src)
    for i, kv in enumerate(kernel):
        rows += kv * padded[i : i + src.shape[0]]
    padded = np.pad(rows, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(src)
    for i, kv in enumerate(kernel):
        out += kv * padded[:, i : i + src.shape[1]]
    return FundusImage(pixels=np.clip(np.rint(out), 0, 255).astype(np.uint8),
                       source_id=img.source_id)


@dataclass(frozen=True)
class _Blob:
    cy: float
    cx: float
    ry: float
    rx: float
    alpha_peak: float
    color: float

    def bbox(self, h: int, w: int) -> tuple[int, int, int, int]:
        y0 = max(0, int(math.floor(self.cy - self.ry)))
        y1 = min(h, int(math.ceil(self.cy + self.ry)) + 1)
        x0 = max(0, int(math.floor(self.cx - self.rx)))
        x1 = min(w, int(math.ceil(self.cx + self.rx)) + 1)
        return y0, y1, x0, x1


def _sample_blobs(rng: np.random.Generator, h: int, w: int,
                  params: ArtifactParams) -> list[_Blob]:
    lo, hi = params.count_range
    count = int(rng.integers(lo, hi + 1)) if hi >= lo else 0
    blobs = []
    for _ in range(count):
        cy = rng.uniform(0, h - 1)
        cx = rng.uniform(0, w - 1)
        radius = rng.uniform(*params.radius_frac_range) * min(h, w)
        rx = max(radius * rng.uniform(0.7, 1.3), 1.0)
        ry = max(radius * rng.uniform(0.7, 1.3), 1.0)
        alpha_peak = rng.uniform(*params.alpha_range)
        bright = rng.random() < 0.5
        color = rng.uniform(205, 255) if bright else rng.uniform(0, 50)
        blobs.append(_Blob(cy=cy, cx=cx, ry=ry, rx=rx, alpha_peak=alpha_peak, color=color))
    return blobs


def degrade_artifacts(img: FundusImage, seed: int,
                      params: ArtifactParams = ArtifactParams(),
                      index: int = 0) -> FundusImage:
    """Composite soft-edged elliptical blobs mimicking dust and reflections."""
    rng = split_rng(seed, index, _STAGE_ARTIFACTS)
    h, w = img.height, img.width
    out = img.pixels.astype(np.float64)
    for blob in _sample_blobs(rng, h, w, params):
        y0, y1, x0, x1 = blob.bbox(h, w)
        if y0 >= y1 or x0 >= x1:
            continue
        ys = np.arange(y0, y1, dtype=np.float64)[:, None]
        xs = np.arange(x0, x1, dtype=np.float64)[None, :]
        d2 = ((ys - blob.cy) / blob.ry) ** 2 + ((xs - blob.cx) / blob.rx) ** 2
        alpha = np.where(d2 <= 1.0, blob.alpha_peak * np.exp(-d2 / (2 * 0.35 ** 2)), 0.0)
        patch = out[y0:y1, x0:x1]
        out[y0:y1, x0:x1] = patch * (1 - alpha[..., None]) + blob.color * alpha[..., None]
    return FundusImage(pixels=np.clip(np.rint(out), 0, 255).astype(np.uint8),
                       source_id=img.source_id)


def apply_degradations(img: FundusImage, spec: DegradationSpec, index: int = 0) -> FundusImage:
    out = img
    if spec.light_transmission:
        out = degrade_light(out, spec.seed, spec.light_params, index)
    if spec.blur:
        out = degrade_blur(out, spec.seed, spec.blur_params, index)
    if spec.artifacts:
        out = degrade_artifacts(out, spec.seed, spec.artifact_params, index)
    return out


def expand_degraded(images: Sequence[FundusImage], base_seed: int
                    ) -> list[tuple[FundusImage, int]]:
    """Emit the 8 on/off degradation combinations for every input image.

    Code 0 is the untouched original; stages share per-image parameter
    streams, so e.g. code 6 is exactly code 4's light pass followed by
    code 2's blur pass.
    """
    if not images:
        raise DataError("expand_degraded requires a nonempty image list")
    out: list[tuple[FundusImage, int]] = []
    for index, img in enumerate(images):
        for code in range(8):
            spec = DegradationSpec(
                light_transmission=bool(code & 4),
                blur=bool(code & 2),
                artifacts=bool(code & 1),
                seed=base_seed,
            )
            out.append((apply_degradations(img, spec, index), code))
    return out


# ---------------------------------------------------------------------------
# Manifests

MANIFEST_HEADER = ["path", "label", "origin", "degradation_code"]


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative: <origin>/<filename>
    label: int
    origin: str
    degradation_code: int = 0


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def label_counts(self) -> dict[int, int]:
        counts = {g: 0 for g in range(5)}
        for e in self.entries:
            counts[e.label] = counts.get(e.label, 0) + 1
        return counts

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            for e in self.entries:
                writer.writerow([e.path, e.label, e.origin, e.degradation_code])

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        entries = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise DataError(
                    f"manifest {path} has header {header}, expected {MANIFEST_HEADER}"
                )
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise DataError(f"manifest {path} line {lineno}: expected 4 fields")
                rel, label_s, origin, code_s = row
                try:
                    label = int(label_s)
                    code = int(code_s)
                except ValueError as exc:
                    raise DataError(f"manifest {path} line {lineno}: {exc}") from exc
                if not 0 <= label <= 4:
                    raise DataError(
                        f"manifest {path} line {lineno}: label {label} outside [0,4]"
                    )
                if not 0 <= code <= 7:
                    raise DataError(
                        f"manifest {path} line {lineno}: degradation code {code} outside [0,7]"
                    )
                entries.append(ManifestEntry(rel, label, origin, code))
        return cls(entries=entries)

    def validate_images(self, root) -> None:
        """Check every entry resolves to a decodable image under root."""
        root = Path(root)
        for e in self.entries:
            load_image(root / e.path)


def build_balanced(manifests: Iterable[DatasetManifest], per_label: int, seed: int
                   ) -> DatasetManifest:
    """Sample exactly per_label entries per grade, uniformly without replacement."""
    if per_label <= 0:
        raise DataError(f"per_label must be positive, got {per_label}")
    pools: dict[int, list[ManifestEntry]] = {g: [] for g in range(5)}
    for manifest in manifests:
        for e in manifest.entries:
            pools[e.label].append(e)
    shortfalls = {g: per_label - len(pool) for g, pool in pools.items()
                  if len(pool) < per_label}
    if shortfalls:
        details = ", ".join(f"label {g} short by {n}" for g, n in sorted(shortfalls.items()))
        raise DataError(f"insufficient entries for balanced dataset: {details}")
    rng = split_rng(seed, 0, _STAGE_SAMPLE)
    chosen: list[ManifestEntry] = []
    for grade in range(5):
        pool = pools[grade]
        idx = rng.choice(len(pool), size=per_label, replace=False)
        chosen.extend(pool[i] for i in sorted(idx))
    return DatasetManifest(entries=chosen)
