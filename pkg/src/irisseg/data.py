"""Dataset ingestion, mask codecs, resampling, synthetic eyes, and overlays.

Masks are numpy bool arrays (H, W), stored on disk as single-channel PNGs
with values {0, 255} (255 = iris).  Manifests are CSV files with the header
``image_path,mask_path,subject_id,pmi_hours,spectrum``; relative paths are
resolved against the manifest's directory.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, ShapeError

SPECTRA = ("NIR", "RED")
MANIFEST_COLUMNS = ("image_path", "mask_path", "subject_id", "pmi_hours", "spectrum")

# Overlay tints: true positive, false positive, false negative.
TP_COLOR = (40, 200, 40)
FP_COLOR = (220, 50, 50)
FN_COLOR = (60, 80, 230)
OVERLAY_ALPHA = 0.55


@dataclass
class Sample:
    image: np.ndarray  # uint8 (H, W)
    subject_id: str
    pmi_hours: float
    spectrum: str
    source_path: str = ""


@dataclass
class ManifestRecord:
    image_path: Path
    mask_path: Path | None
    subject_id: str
    pmi_hours: float
    spectrum: str


@dataclass
class Manifest:
    records: list[ManifestRecord]

    def subject_ids(self) -> set[str]:
        return {r.subject_id for r in self.records}


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask, bool).astype(np.uint8)) * 255
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr > 127


def save_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, np.uint8), mode="L").save(path)


def load_manifest(path: str | Path) -> Manifest:
    """Load and fully validate a manifest CSV; errors carry the line number."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(MANIFEST_COLUMNS)}")
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise DataError(f"{path} line 1: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise DataError(f"{path} line {lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            image_rel, mask_rel, subject, pmi_s, spectrum = (c.strip() for c in row)
            if not subject:
                raise DataError(f"{path} line {lineno}: empty subject_id")
            try:
                pmi = float(pmi_s)
            except ValueError:
                raise DataError(f"{path} line {lineno}: pmi_hours {pmi_s!r} is not a number")
            if pmi < 0:
                raise DataError(f"{path} line {lineno}: pmi_hours must be >= 0, got {pmi}")
            if spectrum not in SPECTRA:
                raise DataError(f"{path} line {lineno}: spectrum must be one of {SPECTRA}, got {spectrum!r}")
            if image_rel in seen:
                raise DataError(f"{path} line {lineno}: duplicate image path {image_rel!r} (first at line {seen[image_rel]})")
            seen[image_rel] = lineno
            image_path = (root / image_rel).resolve() if not Path(image_rel).is_absolute() else Path(image_rel)
            if not image_path.is_file():
                raise DataError(f"{path} line {lineno}: image file missing: {image_path}")
            mask_path = None
            if mask_rel:
                mask_path = (root / mask_rel).resolve() if not Path(mask_rel).is_absolute() else Path(mask_rel)
                if not mask_path.is_file():
                    raise DataError(f"{path} line {lineno}: mask file missing: {mask_path}")
            records.append(ManifestRecord(image_path, mask_path, subject, pmi, spectrum))
    return Manifest(records)


def save_manifest(records: list[tuple[str, str, str, float, str]], path: str | Path) -> None:
    """Write manifest rows (paths already relative to the manifest directory)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for row in records:
            writer.writerow(row)


def load_sample(record: ManifestRecord) -> tuple[Sample, np.ndarray | None]:
    """Decode a record to an 8-bit grayscale sample plus its truth mask if any.

    RED-spectrum records take the red channel of color files; everything else
    goes through the standard luminance conversion.
    """
    img = Image.open(record.image_path)
    if record.spectrum == "RED" and img.mode not in ("L", "I;16", "1"):
        arr = np.asarray(img.convert("RGB"))[:, :, 0]
    else:
        arr = np.asarray(img.convert("L"))
    sample = Sample(arr.astype(np.uint8), record.subject_id, record.pmi_hours,
                    record.spectrum, str(record.image_path))
    mask = load_mask(record.mask_path) if record.mask_path is not None else None
    if mask is not None and mask.shape != arr.shape:
        raise DataError(f"mask shape {mask.shape} != image shape {arr.shape} for {record.image_path}")
    return sample, mask


def _integer_factors(src: tuple[int, int], dst: tuple[int, int]) -> tuple[int, int]:
    fy, fx = src[0] / dst[0], src[1] / dst[1]
    if fy != int(fy) or fx != int(fx) or fy < 1 or fx < 1:
        raise ConfigError(f"size {src} is not an integer multiple of {dst}")
    return int(fy), int(fx)


def downsample_image(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-averaging downsample by integer factors (rounded back to uint8)."""
    h, w = image.shape
    th, tw = target
    fy, fx = _integer_factors((h, w), (th, tw))
    blocks = image.reshape(th, fy, tw, fx).astype(np.float64)
    means = blocks.mean(axis=(1, 3))
    return np.clip(np.rint(means), 0, 255).astype(np.uint8)


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Block majority vote; exact ties vote non-iris."""
    h, w = mask.shape
    th, tw = target
    fy, fx = _integer_factors((h, w), (th, tw))
    counts = np.asarray(mask, bool).reshape(th, fy, tw, fx).sum(axis=(1, 3))
    return counts * 2 > fy * fx


def upscale_mask(mask: np.ndarray, factor: int | tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor block replication by integer factor(s)."""
    if isinstance(factor, int):
        fy = fx = factor
    else:
        fy, fx = factor
    if fy < 1 or fx < 1:
        raise ConfigError(f"upscale factors must be >= 1, got {(fy, fx)}")
    return np.repeat(np.repeat(np.asarray(mask, bool), fy, axis=0), fx, axis=1)


@dataclass
class SynthConfig:
    """Knobs of the synthetic ocular-image generator.

    Photometry is stylized: bright sclera, textured mid-gray iris, dark
    (possibly elliptical) pupil, bright specular blobs, gray retractor bars
    at the border, sinusoidal brightness wrinkles across the iris.  The
    ground-truth mask is the iris region minus blobs and occluders; wrinkles
    perturb only the photometry.
    """

    size: tuple[int, int] = (480, 640)  # (H, W)
    pupil_radius: tuple[float, float] = (25.0, 45.0)
    limbus_radius: tuple[float, float] = (90.0, 140.0)
    pupil_ellipticity: tuple[float, float] = (1.0, 1.0)  # minor/major axis ratio, 1 = circle
    center_jitter: float = 0.04          # limbus center jitter, fraction of min dim
    pupil_offset: float = 0.0            # pupil center offset, fraction of pupil radius
    wrinkle_count: tuple[int, int] = (0, 0)
    wrinkle_amplitude: float = 35.0
    blob_count: tuple[int, int] = (0, 0)
    blob_radius: tuple[float, float] = (4.0, 12.0)
    retractors: bool = False
    retractor_intensity: float = 170.0
    noise_sigma: float = 0.0             # additive Gaussian, 8-bit intensity units
    subject_count: int = 17
    pmi_range: tuple[float, float] = (5.0, 400.0)
    seed: int = 0

    def validate(self) -> None:
        if self.size[0] < 8 or self.size[1] < 8:
            raise ConfigError(f"image size too small: {self.size}")
        for name, rng in (("pupil_radius", self.pupil_radius),
                          ("limbus_radius", self.limbus_radius),
                          ("blob_radius", self.blob_radius),
                          ("pupil_ellipticity", self.pupil_ellipticity),
                          ("pmi_range", self.pmi_range)):
            if rng[0] > rng[1]:
                raise ConfigError(f"{name} range is empty: {rng}")
        if self.pupil_radius[1] >= self.limbus_radius[0]:
            raise ConfigError("pupil radius range must lie strictly below the limbus range")
        if self.pupil_ellipticity[0] <= 0 or self.pupil_ellipticity[1] > 1:
            raise ConfigError("pupil ellipticity ratios must be in (0, 1]")
        if self.subject_count < 1:
            raise ConfigError("subject_count must be >= 1")
        if self.wrinkle_count[0] > self.wrinkle_count[1] or self.blob_count[0] > self.blob_count[1]:
            raise ConfigError("count ranges must be (lo, hi) with lo <= hi")


# Base intensities of the stylized eye.
_SCLERA_LEVEL = 190.0
_IRIS_LEVEL = 95.0
_PUPIL_LEVEL = 25.0
_BLOB_LEVEL = 255.0


def _render_eye(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, dict]:
    h, w = cfg.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    jitter = cfg.center_jitter * min(h, w)
    cx = w / 2 + rng.uniform(-jitter, jitter)
    cy = h / 2 + rng.uniform(-jitter, jitter)
    limbus_r = rng.uniform(*cfg.limbus_radius)
    pupil_r = rng.uniform(*cfg.pupil_radius)
    ratio = rng.uniform(*cfg.pupil_ellipticity)
    tilt = rng.uniform(0.0, math.pi)
    off = cfg.pupil_offset * pupil_r
    pcx = cx + rng.uniform(-off, off)
    pcy = cy + rng.uniform(-off, off)

    # Elliptical pupil with preserved area: semi-axes r/sqrt(ratio), r*sqrt(ratio).
    a = pupil_r / math.sqrt(ratio)
    b = pupil_r * math.sqrt(ratio)
    dxr = (xx - pcx) * math.cos(tilt) + (yy - pcy) * math.sin(tilt)
    dyr = -(xx - pcx) * math.sin(tilt) + (yy - pcy) * math.cos(tilt)
    pupil = (dxr / a) ** 2 + (dyr / b) ** 2 <= 1.0

    dist = np.hypot(xx - cx, yy - cy)
    limbus = dist <= limbus_r
    theta = np.arctan2(yy - cy, xx - cx)

    img = np.full((h, w), _SCLERA_LEVEL)
    k_theta = int(rng.integers(8, 17))
    phase1 = rng.uniform(0, 2 * math.pi)
    phase2 = rng.uniform(0, 2 * math.pi)
    rho_norm = dist / max(limbus_r, 1.0)
    texture = (_IRIS_LEVEL
               + 18.0 * np.sin(k_theta * theta + phase1)
               + 10.0 * np.cos(6.0 * math.pi * rho_norm + phase2))
    img[limbus] = texture[limbus]
    img[pupil] = _PUPIL_LEVEL

    iris_region = limbus & ~pupil

    # Wrinkles: sinusoidal brightness bands across the iris (photometric only).
    n_wrinkles = int(rng.integers(cfg.wrinkle_count[0], cfg.wrinkle_count[1] + 1))
    wrinkles = []
    for _ in range(n_wrinkles):
        alpha = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(alpha) + (yy - cy) * math.sin(alpha)
        v = -(xx - cx) * math.sin(alpha) + (yy - cy) * math.cos(alpha)
        wavelength = rng.uniform(0.8, 1.6) * limbus_r
        offset = rng.uniform(-0.6, 0.6) * limbus_r
        thickness = rng.uniform(0.02, 0.05) * limbus_r + 1.0
        wob = 0.15 * limbus_r * np.sin(2 * math.pi * v / wavelength)
        band = np.abs(u - offset - wob) < thickness
        img[band & iris_region] += cfg.wrinkle_amplitude
        wrinkles.append({"angle": alpha, "offset": offset, "thickness": thickness,
                         "wavelength": wavelength})

    # Specular blobs inside the iris annulus (excluded from the truth mask).
    n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
    blob_mask = np.zeros((h, w), bool)
    blobs = []
    for _ in range(n_blobs):
        br = rng.uniform(*cfg.blob_radius)
        lo = pupil_r + br + 2.0
        hi = limbus_r - br - 2.0
        if lo >= hi:
            continue
        rho = rng.uniform(lo, hi)
        ang = rng.uniform(0, 2 * math.pi)
        bx = cx + rho * math.cos(ang)
        by = cy + rho * math.sin(ang)
        disc = (xx - bx) ** 2 + (yy - by) ** 2 <= br ** 2
        img[disc] = _BLOB_LEVEL
        blob_mask |= disc
        blobs.append({"cx": bx, "cy": by, "r": br})

    # Retractor: a gray bar entering from the top or bottom border.
    occluder_mask = np.zeros((h, w), bool)
    occluder = None
    if cfg.retractors:
        side = int(rng.integers(0, 2))  # 0 = top, 1 = bottom
        half_width = rng.uniform(0.10, 0.16) * w
        x0 = cx + rng.uniform(-0.25, 0.25) * limbus_r
        depth = (cy - rng.uniform(0.15, 0.45) * limbus_r) if side == 0 \
            else (h - cy - rng.uniform(0.15, 0.45) * limbus_r)
        depth = max(depth, 2.0)
        strip = np.abs(xx - x0) < half_width
        reach = (yy < depth) if side == 0 else (yy > h - depth)
        occluder_mask = strip & reach
        img[occluder_mask] = cfg.retractor_intensity + 20.0 * (xx[occluder_mask] - x0) / w
        occluder = {"side": "top" if side == 0 else "bottom", "x0": x0,
                    "half_width": half_width, "depth": depth}

    truth = iris_region & ~blob_mask & ~occluder_mask

    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, (h, w))
    image_u8 = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    meta = {
        "limbus": {"cx": cx, "cy": cy, "r": limbus_r},
        "pupil": {"cx": pcx, "cy": pcy, "r": pupil_r, "axis_ratio": ratio, "tilt": tilt},
        "blobs": blobs,
        "wrinkles": wrinkles,
        "occluder": occluder,
        "noise_sigma": cfg.noise_sigma,
    }
    return image_u8, truth, meta


def generate_synthetic(cfg: SynthConfig, n: int) -> list[tuple[Sample, np.ndarray, dict]]:
    """Render `n` synthetic eyes; a pure function of (cfg, n)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    out = []
    for i in range(n):
        subject = f"S{(i % cfg.subject_count) + 1:02d}"
        image, truth, meta = _render_eye(cfg, rng)
        pmi = float(rng.uniform(*cfg.pmi_range))
        spectrum = "NIR" if rng.random() < 0.5 else "RED"
        sample = Sample(image, subject, pmi, spectrum, source_path=f"synthetic:{i:04d}")
        out.append((sample, truth, meta))
    return out


def render_overlay(image: np.ndarray, predicted: np.ndarray,
                   truth: np.ndarray | None = None) -> np.ndarray:
    """Tint TP/FP/FN pixels over the grayscale image; prediction-only when no truth."""
    predicted = np.asarray(predicted, bool)
    if predicted.shape != image.shape:
        raise ShapeError(f"mask shape {predicted.shape} != image shape {image.shape}")
    if truth is not None:
        truth = np.asarray(truth, bool)
        if truth.shape != image.shape:
            raise ShapeError(f"truth shape {truth.shape} != image shape {image.shape}")
    base = np.asarray(image, np.float32)
    rgb = np.stack([base, base, base], axis=-1)

    def tint(region: np.ndarray, color: tuple[int, int, int]) -> None:
        rgb[region] = (1.0 - OVERLAY_ALPHA) * rgb[region] + OVERLAY_ALPHA * np.float32(color)

    if truth is None:
        tint(predicted, TP_COLOR)
    else:
        tint(predicted & truth, TP_COLOR)
        tint(predicted & ~truth, FP_COLOR)
        tint(~predicted & truth, FN_COLOR)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def synth_config_as_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
