"""Synthetic multi-site "chest X-ray" corpus.

Every image is a flat background at the site's base intensity, patient-level
"anatomy" in the upper half (two darker lung fields crossed by rib stripes,
randomly sized and placed per image) and Gaussian pixel noise. Positive
images add a bright Gaussian blob in the lower third whose amplitude and
radius grow with a severity in [0.1, 1]. Each site shifts the background,
anatomy contrast, noise level, blob placement and how often the bottom rows
are cropped away, so sites are genuinely heterogeneous.

The anatomy is nuisance structure: it carries no label information but
dominates pixel-level similarity, as patient anatomy does in real radiographs.

The severity stored on every image is the ground truth used to rank
explanation candidates.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import Reader, frame, unframe, write_bytes
from .errors import ConfigError, FormatError
from .federated import ClientDataset, assign_scaling
from .model import LabeledImage

WIDTH = HEIGHT = 32
DATASET_MAGIC = b"FCDS"
DATASET_VERSION = 1
MANIFEST_SCHEMA = 1

BLOB_ROW = 24.0
BLOB_COL = 16.0
ROW_JITTER = 1.0
COL_JITTER = 3.0
MIN_SEVERITY = 0.1
MAX_CROP_ROWS = 4

# anatomy fades out between these rows and is absent below
ANATOMY_FADE = (11.0, 14.0)

# severity measurement windows
MEASURE_ROW0 = 15
SEARCH_ROW0 = 18
DISK_RADIUS = 5.0
EXCLUSION_RADIUS = 8.0

SYNTHETIC_ID_BASE = 1 << 62


def blob_amplitude(severity: float) -> float:
    return 40.0 + 80.0 * severity


def blob_radius(severity: float) -> float:
    return 1.5 + 2.0 * severity


def image_id(site_id: int, index: int) -> int:
    return (int(site_id) << 32) | int(index)


@dataclass(frozen=True)
class SiteSpec:
    site_id: int
    base_intensity: float = 90.0
    noise_std: float = 6.0
    positive_rate: float = 0.3
    blob_position_bias: tuple = (0.0, 0.0)  # (dx columns, dy rows)
    crop_probability: float = 0.1
    n_images: int = 200
    seed: int = 0
    anatomy_contrast: float = 30.0

    def __post_init__(self):
        if not 0 <= self.base_intensity <= 255:
            raise ConfigError(f"site {self.site_id}: base_intensity must lie in [0, 255], got {self.base_intensity}")
        if not self.noise_std >= 0:
            raise ConfigError(f"site {self.site_id}: noise_std must be >= 0, got {self.noise_std}")
        if not 0 <= self.positive_rate <= 1:
            raise ConfigError(f"site {self.site_id}: positive_rate must lie in [0, 1], got {self.positive_rate}")
        if not 0 <= self.crop_probability <= 1:
            raise ConfigError(f"site {self.site_id}: crop_probability must lie in [0, 1], got {self.crop_probability}")
        if int(self.n_images) < 0:
            raise ConfigError(f"site {self.site_id}: n_images must be >= 0, got {self.n_images}")
        if not self.anatomy_contrast >= 0:
            raise ConfigError(f"site {self.site_id}: anatomy_contrast must be >= 0, got {self.anatomy_contrast}")
        if len(self.blob_position_bias) != 2:
            raise ConfigError(f"site {self.site_id}: blob_position_bias must be (dx, dy)")
        object.__setattr__(self, "blob_position_bias", tuple(float(v) for v in self.blob_position_bias))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blob_position_bias"] = list(self.blob_position_bias)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SiteSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown site field(s): {sorted(extra)}")
        d = dict(d)
        if "blob_position_bias" in d:
            d["blob_position_bias"] = tuple(d["blob_position_bias"])
        return cls(**d)


def default_site_specs(seed: int = 7) -> list[SiteSpec]:
    """Three unequal client sites plus one shifted out-of-distribution site."""
    return [
        SiteSpec(0, 90.0, 6.0, 0.40, (0.0, 0.0), 0.10, 600, seed * 1000 + 0, 30.0),
        SiteSpec(1, 115.0, 8.0, 0.25, (2.0, -1.0), 0.20, 400, seed * 1000 + 1, 35.0),
        SiteSpec(2, 70.0, 5.0, 0.15, (-2.0, 1.0), 0.05, 200, seed * 1000 + 2, 25.0),
        SiteSpec(3, 100.0, 9.0, 0.35, (1.0, 1.0), 0.15, 200, seed * 1000 + 3, 32.0),
    ]


@dataclass(frozen=True)
class Anatomy:
    """Per-image lung-field geometry; ``contrast`` 0 means no anatomy."""

    contrast: float = 0.0
    row: float = 7.0
    half_height: float = 5.5
    half_width: float = 5.0
    gap: float = 7.0
    darkness: float = 1.0
    rib_period: float = 4.0
    rib_phase: float = 0.0

    @classmethod
    def draw(cls, rng: np.random.Generator, contrast: float) -> "Anatomy":
        return cls(contrast, rng.uniform(5.5, 8.5), rng.uniform(4.0, 6.5), rng.uniform(3.5, 6.0),
                   rng.uniform(5.0, 8.5), rng.uniform(0.6, 1.0), rng.uniform(3.0, 5.0),
                   rng.uniform(0.0, 2.0 * np.pi))

    def field(self) -> np.ndarray:
        if self.contrast == 0.0:
            return np.zeros((HEIGHT, WIDTH))
        rows = np.arange(HEIGHT, dtype=np.float64)[:, None]
        cols = np.arange(WIDTH, dtype=np.float64)[None, :]
        lungs = np.zeros((HEIGHT, WIDTH))
        for side in (-1.0, 1.0):
            c0 = WIDTH / 2.0 + side * (self.gap / 2.0 + self.half_width)
            e = ((rows - self.row) / self.half_height) ** 2 + ((cols - c0) / self.half_width) ** 2
            lungs += 1.0 / (1.0 + np.exp(6.0 * (e - 1.0)))
        ribs = 0.35 * np.sin(2.0 * np.pi * rows / self.rib_period + self.rib_phase)
        lo, hi = ANATOMY_FADE
        fade = np.clip((hi - rows) / (hi - lo), 0.0, 1.0)
        return self.contrast * fade * lungs * (ribs - self.darkness)


def render(base: float, noise: np.ndarray | None, severity: float, center=(BLOB_ROW, BLOB_COL),
           crop_rows: int = 0, quantize: bool = True, anatomy: Anatomy | None = None) -> np.ndarray:
    """Compose one image from its ingredients."""
    img = np.full((HEIGHT, WIDTH), float(base))
    if anatomy is not None:
        img += anatomy.field()
    if noise is not None:
        img += noise
    if severity > 0:
        rows = np.arange(HEIGHT, dtype=np.float64)[:, None]
        cols = np.arange(WIDTH, dtype=np.float64)[None, :]
        d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
        img += blob_amplitude(severity) * np.exp(-d2 / (2.0 * blob_radius(severity) ** 2))
    if crop_rows:
        img[HEIGHT - crop_rows:] = 0.0
    if not quantize:
        return img
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_site(spec: SiteSpec) -> list[LabeledImage]:
    """Deterministic images for one site.

    Random draws per image happen in a fixed order regardless of label so the
    same seed reproduces the same backgrounds.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(spec.site_id)]))
    dx, dy = spec.blob_position_bias
    out = []
    for i in range(int(spec.n_images)):
        positive = rng.random() < spec.positive_rate
        sev_draw = rng.uniform(MIN_SEVERITY, 1.0)
        jitter_r = rng.uniform(-ROW_JITTER, ROW_JITTER)
        jitter_c = rng.uniform(-COL_JITTER, COL_JITTER)
        cropped = rng.random() < spec.crop_probability
        crop_rows = int(rng.integers(1, MAX_CROP_ROWS + 1))
        anatomy = Anatomy.draw(rng, spec.anatomy_contrast)
        noise = rng.normal(0.0, spec.noise_std, size=(HEIGHT, WIDTH)) if spec.noise_std > 0 else None
        severity = float(sev_draw) if positive else 0.0
        px = render(spec.base_intensity, noise, severity,
                    (BLOB_ROW + dy + jitter_r, BLOB_COL + dx + jitter_c), crop_rows if cropped else 0, anatomy=anatomy)
        out.append(LabeledImage(px, int(positive), severity, image_id(spec.site_id, i)))
    return out


# -- severity measurement ------------------------------------------------------

def _valid_rows(px: np.ndarray) -> np.ndarray:
    keep = np.ones(px.shape[0], dtype=bool)
    # bottom crops zero whole rows; only trailing rows count
    for r in range(px.shape[0] - 1, -1, -1):
        if np.any(px[r] != 0):
            break
        keep[r] = False
    return keep


def blob_signal(pixels: np.ndarray) -> float:
    """Background-subtracted blob mass inside a disk centred on the brightest lower-third spot.

    Only rows below the anatomy are measured. The background level is the
    mean of the measured region outside a wider exclusion disk.
    """
    px = np.asarray(pixels, dtype=np.float64)
    keep = _valid_rows(px)
    keep[:MEASURE_ROW0] = False
    if not keep[SEARCH_ROW0:].any():
        return 0.0
    h, w = px.shape
    resid = px - np.median(px[keep])
    resid[~keep] = 0.0
    padded = np.pad(resid, 1, mode="edge")
    smooth = sum(padded[i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0
    window = np.where(keep[SEARCH_ROW0:, None], smooth[SEARCH_ROW0:], -np.inf)
    r, c = np.unravel_index(int(np.argmax(window)), window.shape)
    r += SEARCH_ROW0
    d2 = (np.arange(h)[:, None] - r) ** 2 + (np.arange(w)[None, :] - c) ** 2
    region = np.broadcast_to(keep[:, None], (h, w))
    outside = region & (d2 > EXCLUSION_RADIUS ** 2)
    bg = px[outside].mean() if outside.any() else np.median(px[keep])
    disk = region & (d2 <= DISK_RADIUS ** 2)
    return float((px[disk] - bg).sum())


@dataclass
class SeverityCalibration:
    """Maps measured blob mass to severity, tabulated from noiseless blob templates."""

    signals: np.ndarray = field(repr=False)
    severities: np.ndarray = field(repr=False)

    @classmethod
    def from_generator_params(cls, n_grid: int = 401, base: float = 100.0) -> "SeverityCalibration":
        sev = np.linspace(0.0, 1.0, n_grid)
        sig = np.array([blob_signal(render(base, None, s, quantize=False)) for s in sev])
        sig[0] = 0.0
        if np.any(np.diff(sig) <= 0):
            raise RuntimeError("blob templates are not monotone in severity")
        return cls(sig, sev)

    def estimate(self, pixels: np.ndarray) -> float:
        return float(np.clip(np.interp(blob_signal(pixels), self.signals, self.severities), 0.0, 1.0))


# -- corpus ----------------------------------------------------------------------

@dataclass
class Corpus:
    clients: list[ClientDataset]
    ood_test: list[LabeledImage]
    id_test: list[LabeledImage]
    specs: list[SiteSpec]

    def pooled(self) -> ClientDataset:
        from .federated import pool_clients
        return pool_clients(self.clients)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(images: Sequence[LabeledImage], fraction: float, rng: np.random.Generator):
    """(kept, held_out); the held-out total and positive counts are rounded shares."""
    images = list(images)
    pos = [i for i, im in enumerate(images) if im.label == 1]
    neg = [i for i, im in enumerate(images) if im.label == 0]
    n_out = _round_half_up(fraction * len(images))
    n_pos = min(_round_half_up(fraction * len(pos)), len(pos), n_out)
    n_neg = min(n_out - n_pos, len(neg))
    held = set(rng.permutation(pos)[:n_pos].tolist()) | set(rng.permutation(neg)[:n_neg].tolist())
    kept = [im for i, im in enumerate(images) if i not in held]
    out = [im for i, im in enumerate(images) if i in held]
    return kept, out


def split_corpus(site_images: Sequence[Sequence[LabeledImage]], specs: Sequence[SiteSpec],
                 test_fraction: float = 0.2, val_fraction: float = 0.2) -> Corpus:
    """Client sites get a stratified in-distribution test holdout and a validation split; the
    last site is out-of-distribution test data only."""
    if not 0 < test_fraction < 1:
        raise ConfigError(f"data.test_fraction must lie in (0, 1), got {test_fraction}")
    if not 0 < val_fraction < 1:
        raise ConfigError(f"data.val_fraction must lie in (0, 1), got {val_fraction}")
    if len(specs) < 2 or len(site_images) != len(specs):
        raise ConfigError("need at least one client site and one out-of-distribution site")
    clients, id_test = [], []
    for spec, images in zip(specs[:-1], site_images[:-1]):
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(spec.site_id), 1]))
        rest, test = stratified_split(images, test_fraction, rng)
        train, val = stratified_split(rest, val_fraction, rng)
        clients.append(ClientDataset(spec.site_id, train, val))
        id_test.extend(test)
    assign_scaling(clients)
    return Corpus(clients, list(site_images[-1]), id_test, list(specs))


def build_corpus(specs: Sequence[SiteSpec], test_fraction: float = 0.2, val_fraction: float = 0.2) -> Corpus:
    return split_corpus([generate_site(s) for s in specs], specs, test_fraction, val_fraction)


# -- FCDS files --------------------------------------------------------------------

def dataset_bytes(images: Sequence[LabeledImage], width: int = WIDTH, height: int = HEIGHT) -> bytes:
    parts = [struct.pack("<IHH", len(images), width, height)]
    for im in images:
        if im.pixels.shape != (height, width):
            raise FormatError(f"image {im.id} has shape {im.pixels.shape}, file is {height}x{width}")
        parts.append(struct.pack("<QBd", im.id, im.label, im.severity))
        parts.append(np.ascontiguousarray(im.pixels, dtype=np.uint8).tobytes())
    return frame(DATASET_MAGIC, DATASET_VERSION, b"".join(parts))


def images_from_bytes(blob: bytes) -> list[LabeledImage]:
    _, body = unframe(blob, DATASET_MAGIC, versions=(DATASET_VERSION,))
    r = Reader(body)
    count, width, height = r.unpack("<IHH")
    out = []
    for _ in range(count):
        iid, label, severity = r.unpack("<QBd")
        px = np.frombuffer(r.take(width * height), dtype=np.uint8).reshape(height, width).copy()
        out.append(LabeledImage(px, int(label), float(severity), int(iid)))
    r.finish()
    return out


def write_dataset(images: Sequence[LabeledImage], path) -> Path:
    return write_bytes(path, dataset_bytes(images))


def read_dataset(path) -> list[LabeledImage]:
    return images_from_bytes(Path(path).read_bytes())


def site_filename(spec: SiteSpec) -> str:
    return f"site_{spec.site_id}.fcds"


def write_manifest(specs: Sequence[SiteSpec], path, test_fraction: float, val_fraction: float,
                   meta: dict | None = None) -> Path:
    doc = dict(meta or {})
    doc.update({
        "schema_version": MANIFEST_SCHEMA,
        "image_size": [HEIGHT, WIDTH],
        "test_fraction": test_fraction,
        "val_fraction": val_fraction,
        "sites": [dict(s.to_dict(), file=site_filename(s), role="ood" if i == len(specs) - 1 else "client")
                  for i, s in enumerate(specs)],
    })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != MANIFEST_SCHEMA:
        raise FormatError(f"unsupported manifest schema {doc.get('schema_version')}")
    doc["specs"] = [SiteSpec.from_dict({k: v for k, v in s.items() if k not in ("file", "role")})
                    for s in doc["sites"]]
    return doc


def load_corpus(data_dir) -> Corpus:
    data_dir = Path(data_dir)
    man = read_manifest(data_dir / "manifest.json")
    images = [read_dataset(data_dir / s["file"]) for s in man["sites"]]
    return split_corpus(images, man["specs"], man["test_fraction"], man["val_fraction"])
