"""Case-based explanation retrieval over the synthetic pool.

Two rankers: Euclidean distance between unit-normalised penultimate-layer
features (ascending), and mean SSIM on raw 8-bit intensities (descending).
Both keep the ``per_client`` best cases of every source client and break
ties by ascending case id.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import EmptyInputError, FeatureNormalizationError, InputShapeError
from .generator import SyntheticCase
from .model import GlobalModel, LabeledImage, forward, images_to_matrix, predict_proba

SSIM_WINDOW = 7
SSIM_L = 255.0
SSIM_C1 = (0.01 * SSIM_L) ** 2
SSIM_C2 = (0.03 * SSIM_L) ** 2
RESULT_SCHEMA = 1


class PartialResultWarning(UserWarning):
    pass


@dataclass
class RetrievedItem:
    case_id: int
    source_client_id: int
    score: float
    rank: int


@dataclass
class RetrievalResult:
    query_id: int
    predicted_label: int
    positive_probability: float
    method: str
    items: list[RetrievedItem] = field(default_factory=list)

    @property
    def case_ids(self) -> list[int]:
        return [it.case_id for it in self.items]

    def to_dict(self) -> dict:
        return {
            "schema_version": RESULT_SCHEMA,
            "query_id": self.query_id,
            "predicted_label": self.predicted_label,
            "positive_probability": self.positive_probability,
            "method": self.method,
            "items": [asdict(it) for it in self.items],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalResult":
        return cls(d["query_id"], d["predicted_label"], d["positive_probability"], d["method"],
                   [RetrievedItem(**it) for it in d["items"]])


def _as_image(x) -> LabeledImage:
    return x.image if isinstance(x, SyntheticCase) else x


def normalized_feature(model: GlobalModel, image) -> np.ndarray:
    image = _as_image(image)
    feat, _ = forward(model, image)
    norm = np.sqrt(np.dot(feat, feat))
    if norm == 0.0:
        raise FeatureNormalizationError(f"image {image.id} maps to the zero feature vector")
    return feat / norm


def feature_distance(model: GlobalModel, a, b) -> float:
    """Euclidean distance between unit-L2-normalised features; lies in [0, 2]."""
    diff = normalized_feature(model, a) - normalized_feature(model, b)
    return float(np.sqrt(np.dot(diff, diff)))


def pool_features(model: GlobalModel, pool: Iterable) -> np.ndarray:
    # one image at a time: identical pixels must give identical bits
    return np.stack([normalized_feature(model, c) for c in pool])


def _prediction(model: GlobalModel, query: LabeledImage) -> tuple[int, float]:
    p = float(predict_proba(model, images_to_matrix([query], model.input_dim))[0])
    return int(p > 0.5), p


def _select(pool: Sequence[SyntheticCase], scores: np.ndarray, per_client: int, descending: bool,
            expected_clients: Iterable[int] | None) -> list[tuple[float, int, int]]:
    if per_client < 1:
        raise ValueError("per_client must be >= 1")
    sign = -1.0 if descending else 1.0
    groups: dict[int, list[tuple[float, int, int]]] = {}
    for case, s in zip(pool, scores):
        groups.setdefault(case.source_client_id, []).append((float(s), case.id, case.source_client_id))
    chosen = []
    for cid in sorted(groups):
        chosen.extend(sorted(groups[cid], key=lambda t: (sign * t[0], t[1]))[:per_client])
    short = [cid for cid in sorted(groups) if len(groups[cid]) < per_client]
    missing = sorted(set(expected_clients or ()) - set(groups))
    if missing or short:
        warnings.warn(f"partial retrieval: clients missing {missing}, clients short of {per_client} cases {short}",
                      PartialResultWarning, stacklevel=3)
    return sorted(chosen, key=lambda t: (sign * t[0], t[1]))


def _result(model, query, method, chosen) -> RetrievalResult:
    label, prob = _prediction(model, query) if model is not None else (-1, float("nan"))
    items = [RetrievedItem(cid, src, score, rank) for rank, (score, cid, src) in enumerate(chosen, start=1)]
    return RetrievalResult(query.id, label, prob, method, items)


def retrieve(model: GlobalModel, query: LabeledImage, pool: Sequence[SyntheticCase], per_client: int = 3,
             expected_clients: Iterable[int] | None = None, pool_feats: np.ndarray | None = None) -> RetrievalResult:
    """Top ``per_client`` cases per source client by feature distance, merged in ascending distance."""
    if len(pool) == 0:
        raise EmptyInputError("empty explanation pool")
    q = normalized_feature(model, query)
    feats = pool_features(model, pool) if pool_feats is None else pool_feats
    diff = feats - q
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return _result(model, query, "feature_distance", _select(pool, dist, per_client, False, expected_clients))


def _pixels(x) -> np.ndarray:
    return np.asarray(x) if isinstance(x, np.ndarray) else np.asarray(_as_image(x).pixels)


def _mean_maps(maps: np.ndarray) -> np.ndarray:
    flat = maps.reshape(maps.shape[0], -1)
    return flat.sum(axis=1) / flat.shape[1]


def ssim_many(query, images: Sequence) -> np.ndarray:
    q = _pixels(query)
    stack = np.stack([_pixels(im) for im in images])
    if stack.shape[1:] != q.shape:
        raise InputShapeError(f"image shapes differ: {q.shape} vs {stack.shape[1:]}")
    return _mean_maps(kernels.ssim_maps(q, stack, SSIM_WINDOW, SSIM_C1, SSIM_C2))


def ssim(a, b) -> float:
    """Mean SSIM over all 7x7 windows (stride 1) with sample (co)variances, L = 255."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise InputShapeError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    return float(ssim_many(pa, [pb])[0])


def retrieve_ssim(query: LabeledImage, pool: Sequence[SyntheticCase], per_client: int = 3,
                  model: GlobalModel | None = None, expected_clients: Iterable[int] | None = None) -> RetrievalResult:
    """As :func:`retrieve` but ranked by SSIM, highest first. ``model`` only supplies the prediction."""
    if len(pool) == 0:
        raise EmptyInputError("empty explanation pool")
    scores = ssim_many(query, pool)
    return _result(model, query, "ssim", _select(pool, scores, per_client, True, expected_clients))


def rerank_ssim(query: LabeledImage, candidates: Sequence[SyntheticCase]) -> list[int]:
    """Order an already retrieved candidate set by SSIM to the query, highest first."""
    scores = ssim_many(query, candidates)
    return [c.id for s, c in sorted(zip(scores, candidates), key=lambda t: (-t[0], t[1].id))]


# -- contact sheets -------------------------------------------------------------

def write_pgm(pixels: np.ndarray, path) -> Path:
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii") + px.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def contact_sheet(query: LabeledImage, rows: Sequence[Sequence[LabeledImage]], gap: int = 2) -> np.ndarray:
    """One row per method: the query, a wider gap, then the retrieved cases in rank order."""
    h, w = query.pixels.shape
    n_cols = 1 + max((len(r) for r in rows), default=0)
    sheet = np.full((len(rows) * (h + gap) + gap, n_cols * (w + gap) + 3 * gap), 255, dtype=np.uint8)
    for ri, row in enumerate(rows):
        y = gap + ri * (h + gap)
        sheet[y:y + h, gap:gap + w] = query.pixels
        for ci, im in enumerate(row, start=1):
            x = gap + ci * (w + gap) + 2 * gap
            sheet[y:y + h, x:x + w] = im.pixels
    return sheet
