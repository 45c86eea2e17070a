"""Per-client generative models for the synthetic explanation pool.

Two stages: a linear latent space (mean image plus the top-r principal
directions of the client's images) and a class-conditional diagonal Gaussian
sampler over latent codes. Samples start at the class mean and are refined
by ``steps`` equal fractional noise updates whose variances add up to the
fitted class variance.

Anything with ``fit``/``sample`` semantics matching :class:`CaseGenerator`
can replace :class:`PcaGaussianGenerator`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ._binio import Reader, frame, unframe, write_bytes
from .data import HEIGHT, SYNTHETIC_ID_BASE, WIDTH, SeverityCalibration, dataset_bytes, images_from_bytes
from .errors import DegenerateDatasetError, FormatError, GeneratorStateError
from .federated import ClientDataset
from .model import LabeledImage

GENERATOR_MAGIC = b"FCGN"
GENERATOR_VERSION = 1
POOL_SIDECAR_SCHEMA = 1
DEFAULT_LATENT_DIM = 16
DEFAULT_PER_LABEL = 200
DEFAULT_STEPS = 150


@dataclass
class GeneratorModel:
    client_id: int
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (r, D), orthonormal rows
    class_means: np.ndarray  # (2, r)
    class_vars: np.ndarray  # (2, r)
    shape: tuple = (HEIGHT, WIDTH)

    @property
    def r(self) -> int:
        return self.basis.shape[0]

    def encode(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.basis.T

    def decode(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) @ self.basis + self.mean

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(X))


@dataclass(eq=False)
class SyntheticCase:
    image: LabeledImage
    source_client_id: int
    sampling_steps: int
    pool_index: int

    @property
    def id(self) -> int:
        return self.image.id

    @property
    def label(self) -> int:
        return self.image.label


class CaseGenerator(Protocol):
    def fit(self, data: ClientDataset, r: int, seed: int) -> GeneratorModel: ...

    def sample(self, gen: GeneratorModel, per_label: int, steps: int, seed: int) -> list[SyntheticCase]: ...


def synthetic_id(client_id: int, pool_index: int) -> int:
    return SYNTHETIC_ID_BASE | (int(client_id) << 32) | int(pool_index)


def _pixel_matrix(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([im.pixels.reshape(-1) for im in images]).astype(np.float64)


def fit_generator(data: ClientDataset, r: int = DEFAULT_LATENT_DIM, seed: int = 0) -> GeneratorModel:
    """Fit the latent basis and per-class latent Gaussians on a client's train + validation images.

    The basis comes from a thin SVD, which is deterministic; ``seed`` is kept
    for generators that need randomness. Directions are sign-fixed so their
    largest-magnitude coordinate is positive.
    """
    images = list(data.train) + list(data.validation)
    labels = np.array([im.label for im in images])
    if set(labels.tolist()) != {0, 1}:
        raise DegenerateDatasetError(f"client {data.client_id}: generator needs both classes")
    if r < 1 or len(images) < r:
        raise DegenerateDatasetError(f"client {data.client_id}: {len(images)} images cannot support r={r}")
    X = _pixel_matrix(images)
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    basis = vt[:r].copy()
    flip = np.sign(basis[np.arange(r), np.argmax(np.abs(basis), axis=1)])
    basis *= flip[:, None]
    Z = (X - mean) @ basis.T
    class_means = np.stack([Z[labels == c].mean(axis=0) for c in (0, 1)])
    class_vars = np.stack([Z[labels == c].var(axis=0) for c in (0, 1)])
    return GeneratorModel(data.client_id, mean, basis, class_means, class_vars, images[0].pixels.shape)


def sample_latents(gen: GeneratorModel, label: int, n: int, steps: int, rng: np.random.Generator) -> np.ndarray:
    z = np.repeat(gen.class_means[label][None, :], n, axis=0)
    step_std = np.sqrt(gen.class_vars[label] / steps)
    for _ in range(steps):
        z = z + step_std * rng.standard_normal(z.shape)
    return z


def sample_pool(gen: GeneratorModel | None, per_label: int = DEFAULT_PER_LABEL, steps: int = DEFAULT_STEPS,
                seed: int = 0, calibration: SeverityCalibration | None = None) -> list[SyntheticCase]:
    """``per_label`` negatives followed by ``per_label`` positives, pixels rounded and clipped to 8 bits."""
    if gen is None or getattr(gen, "basis", None) is None:
        raise GeneratorStateError("generator has not been fitted")
    if per_label < 1 or steps < 1:
        raise ValueError("per_label and steps must be >= 1")
    calibration = calibration or SeverityCalibration.from_generator_params()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(gen.client_id), 2]))
    cases = []
    for label in (0, 1):
        imgs = gen.decode(sample_latents(gen, label, per_label, steps, rng))
        imgs = np.clip(np.rint(imgs), 0, 255).astype(np.uint8).reshape((per_label,) + tuple(gen.shape))
        for px in imgs:
            idx = len(cases)
            sev = calibration.estimate(px) if label == 1 else 0.0
            cases.append(SyntheticCase(LabeledImage(px, label, sev, synthetic_id(gen.client_id, idx)),
                                       gen.client_id, steps, idx))
    return cases


def estimate_severity(case: SyntheticCase, corpus_oracle: SeverityCalibration) -> float:
    if case.image.label == 0:
        return 0.0
    return corpus_oracle.estimate(case.image.pixels)


class PcaGaussianGenerator:
    def fit(self, data, r=DEFAULT_LATENT_DIM, seed=0):
        return fit_generator(data, r, seed)

    def sample(self, gen, per_label=DEFAULT_PER_LABEL, steps=DEFAULT_STEPS, seed=0):
        return sample_pool(gen, per_label, steps, seed)


# -- persistence ---------------------------------------------------------------------

def generator_bytes(gen: GeneratorModel) -> bytes:
    d = gen.mean.size
    header = struct.pack("<qIIHH", gen.client_id, gen.r, d, gen.shape[0], gen.shape[1])
    arrays = (gen.mean, gen.basis, gen.class_means, gen.class_vars)
    return frame(GENERATOR_MAGIC, GENERATOR_VERSION,
                 header + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays))


def generator_from_bytes(blob: bytes) -> GeneratorModel:
    _, body = unframe(blob, GENERATOR_MAGIC, versions=(GENERATOR_VERSION,))
    rd = Reader(body)
    client_id, r, d, h, w = rd.unpack("<qIIHH")

    def arr(*shape):
        n = int(np.prod(shape))
        return np.frombuffer(rd.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)

    gen = GeneratorModel(client_id, arr(d), arr(r, d), arr(2, r), arr(2, r), (h, w))
    rd.finish()
    return gen


def save_generator(gen: GeneratorModel, path) -> Path:
    return write_bytes(path, generator_bytes(gen))


def load_generator(path) -> GeneratorModel:
    return generator_from_bytes(Path(path).read_bytes())


def save_pool(cases: Sequence[SyntheticCase], path, sidecar_path=None,
              meta: dict | None = None) -> tuple[Path, Path]:
    path = Path(path)
    sidecar_path = Path(sidecar_path) if sidecar_path else path.with_suffix(".json")
    write_bytes(path, dataset_bytes([c.image for c in cases]))
    doc = dict(meta or {})
    doc.update({
        "schema_version": POOL_SIDECAR_SCHEMA,
        "dataset": path.name,
        "cases": {str(c.id): {"source_client_id": c.source_client_id, "steps": c.sampling_steps,
                              "pool_index": c.pool_index} for c in cases},
    })
    sidecar_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path, sidecar_path


def load_pool(path, sidecar_path=None) -> list[SyntheticCase]:
    path = Path(path)
    sidecar_path = Path(sidecar_path) if sidecar_path else path.with_suffix(".json")
    images = images_from_bytes(path.read_bytes())
    doc = json.loads(sidecar_path.read_text())
    if doc.get("schema_version") != POOL_SIDECAR_SCHEMA:
        raise FormatError(f"unsupported pool sidecar schema {doc.get('schema_version')}")
    meta = doc["cases"]
    out = []
    for im in images:
        m = meta.get(str(im.id))
        if m is None:
            raise FormatError(f"pool sidecar has no entry for case {im.id}")
        out.append(SyntheticCase(im, int(m["source_client_id"]), int(m["steps"]), int(m["pool_index"])))
    return out
