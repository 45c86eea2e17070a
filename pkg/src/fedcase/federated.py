"""Federated averaging with DP local training, weighted-F1 checkpointing and a
frozen-backbone-then-fine-tune schedule, plus the pooled centralised baseline.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dp import DpConfig, OptimizerState, PrivacyLedger, dp_step, plain_step
from .errors import (AggregationError, ConfigError, DegenerateDatasetError, FedcaseError,
                     InvalidDatasetError, TrainingError)
from .metrics import f1_score
from .model import (GlobalModel, LabeledImage, class_weights_from_labels, images_to_matrix,
                    init_model, loss_and_grads_arrays, predict, save_checkpoint)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 10
    local_epochs: int = 3
    batch_size: int = 16
    t_ft: int = 5
    unfreeze_layers: int | None = None  # None: every backbone layer
    dp: DpConfig = field(default_factory=DpConfig)
    seed: int = 7
    n_clients: int | None = None

    def __post_init__(self):
        for name in ("rounds", "local_epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"fed.{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.t_ft <= self.rounds:
            raise ConfigError(f"fed.t_ft must lie in [0, rounds={self.rounds}], got {self.t_ft}")
        if self.unfreeze_layers is not None and self.unfreeze_layers < 0:
            raise ConfigError("fed.unfreeze_layers must be >= 0")
        if self.n_clients is not None and self.n_clients < 1:
            raise ConfigError("fed.n_clients must be >= 1")


@dataclass
class ClientDataset:
    client_id: int
    train: list[LabeledImage]
    validation: list[LabeledImage] = field(default_factory=list)
    z: float = 1.0

    def __post_init__(self):
        shared = {im.id for im in self.train} & {im.id for im in self.validation}
        if shared:
            raise InvalidDatasetError(f"client {self.client_id}: {len(shared)} ids in both train and validation")

    @property
    def n_k(self) -> int:
        return len(self.train)

    def train_arrays(self):
        return images_to_matrix(self.train), np.array([im.label for im in self.train], dtype=np.int64)

    def validation_arrays(self):
        return images_to_matrix(self.validation), np.array([im.label for im in self.validation], dtype=np.int64)


@dataclass
class RoundRecord:
    round: int
    client_ids: list[int]
    f1_clients: list[float]
    f1_weighted: float
    is_best: bool
    checkpoint_path: str | None = None
    epsilon: float = math.inf


def scaling_factors(sizes: Sequence[int]) -> list[float]:
    """``z_k = n_k / sum_j n_j``."""
    sizes = list(sizes)
    if not sizes:
        raise InvalidDatasetError("no clients")
    if any(n <= 0 for n in sizes):
        raise InvalidDatasetError(f"client sizes must be positive, got {sizes}")
    total = float(sum(sizes))
    return [n / total for n in sizes]


def assign_scaling(clients: Sequence[ClientDataset]) -> list[ClientDataset]:
    for c, z in zip(clients, scaling_factors([c.n_k for c in clients])):
        c.z = z
    return list(clients)


def aggregate(models: Sequence[GlobalModel], z: Sequence[float]) -> GlobalModel:
    """Coordinate-wise z-weighted average of client models."""
    if not models:
        raise AggregationError("nothing to aggregate")
    if len(models) != len(z):
        raise AggregationError(f"{len(models)} models but {len(z)} weights")
    if abs(math.fsum(z) - 1.0) > 1e-9 or any(w < 0 for w in z):
        raise AggregationError(f"weights must be non-negative and sum to 1, got {list(z)}")
    ref = models[0]
    for m in models[1:]:
        if m.dims != ref.dims:
            raise AggregationError(f"model shapes differ: {m.dims} vs {ref.dims}")
    stacks = zip(*(m.params() for m in models))
    out = []
    for arrays in stacks:
        base = arrays[0]
        if all(a.tobytes() == base.tobytes() for a in arrays[1:]):
            out.append(base.copy())
            continue
        acc = np.zeros_like(base)
        for w, a in zip(z, arrays):
            acc += w * (a - base)
        avg = base + acc
        # rounding must not leave the convex hull
        lo = np.minimum.reduce(arrays)
        hi = np.maximum.reduce(arrays)
        out.append(np.clip(avg, lo, hi))
    return ref.with_params(out)


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(round_index), int(client_id)]))


def trainable_indices(model: GlobalModel, cfg: FedConfig, round_index: int) -> list[int]:
    idx = list(model.head_param_indices())
    if round_index > cfg.t_ft:
        idx = model.backbone_param_indices(cfg.unfreeze_layers) + idx
    return idx


def steps_per_update(n: int, cfg: FedConfig) -> int:
    return cfg.local_epochs * math.ceil(n / cfg.batch_size)


def client_update(k: int, global_model: GlobalModel, data: ClientDataset, cfg: FedConfig,
                  round_index: int, rng: np.random.Generator | None = None) -> GlobalModel:
    """Train a local copy of the broadcast model for E epochs of shuffled minibatches."""
    if not 1 <= round_index <= cfg.rounds:
        raise ValueError(f"round {round_index} outside 1..{cfg.rounds}")
    X, y = data.train_arrays()
    weights = class_weights_from_labels(y)
    if rng is None:
        rng = client_rng(cfg.seed, round_index, data.client_id)
    idx = trainable_indices(global_model, cfg, round_index)
    dp = cfg.dp
    model = global_model.copy()
    state = OptimizerState()
    n = X.shape[0]
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            if dp.enabled:
                _, grads = loss_and_grads_arrays(model, X[sel], y[sel], weights, "per_example", idx)
                model, state = dp_step(model, grads, dp, state, rng, idx)
            else:
                _, grads = loss_and_grads_arrays(model, X[sel], y[sel], weights, "batch_mean", idx)
                model, state = plain_step(model, grads, dp, state, idx)
    return model


def evaluate_f1(model: GlobalModel, images: Sequence[LabeledImage]) -> float:
    X = images_to_matrix(images, model.input_dim)
    return f1_score(predict(model, X), [im.label for im in images])


def _check_client(c: ClientDataset):
    for split in ("train", "validation"):
        labels = {im.label for im in getattr(c, split)}
        if labels != {0, 1}:
            raise DegenerateDatasetError(f"client {c.client_id}: {split} split must contain both classes")


def _persist(model, out_dir, t, is_best):
    if out_dir is None:
        return None
    path = save_checkpoint(model, Path(out_dir) / f"round_{t}.fckp")
    if is_best:
        save_checkpoint(model, Path(out_dir) / "best.fckp")
    return str(path)


def run_federated(clients: Sequence[ClientDataset], cfg: FedConfig, out_dir=None,
                  init: GlobalModel | None = None, workers: int = 1):
    """Run T rounds of federated averaging; returns (best model, round records)."""
    clients = list(clients)
    if not clients:
        raise InvalidDatasetError("federation has no clients")
    if cfg.n_clients is not None and cfg.n_clients != len(clients):
        raise ConfigError(f"fed.n_clients={cfg.n_clients} but {len(clients)} client datasets given")
    for c in clients:
        _check_client(c)
    z = scaling_factors([c.n_k for c in clients])
    model = init if init is not None else init_model(clients[0].train[0].pixels.size, seed=cfg.seed)
    ledgers = [PrivacyLedger(min(1.0, cfg.batch_size / c.n_k), cfg.dp.noise_multiplier, cfg.dp.delta)
               for c in clients]
    best_f1, best_model, records = -math.inf, model.copy(), []

    def update(args):
        k, c = args
        try:
            return client_update(k, model, c, cfg, t)
        except FedcaseError as exc:
            raise TrainingError(f"client {c.client_id} failed in round {t}: {exc}", c.client_id, t) from exc

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            jobs = list(enumerate(clients))
            local = list(pool.map(update, jobs)) if pool else [update(j) for j in jobs]
            model = aggregate(local, z)
            f1s = [evaluate_f1(model, c.validation) for c in clients]
            f1_t = float(sum(zk * f for zk, f in zip(z, f1s)))
            is_best = f1_t > best_f1
            if is_best:
                best_f1, best_model = f1_t, model.copy()
            if cfg.dp.enabled:
                for led, c in zip(ledgers, clients):
                    led.record(steps_per_update(c.n_k, cfg))
                eps = max(led.epsilon_estimate for led in ledgers)
            else:
                eps = math.inf
            path = _persist(model, out_dir, t, is_best)
            records.append(RoundRecord(t, [c.client_id for c in clients], f1s, f1_t, is_best, path, eps))
            log.info("round %d  F1=%.4f%s  eps=%.3g", t, f1_t, " *" if is_best else "", eps)
    finally:
        if pool:
            pool.shutdown()
    return best_model, records


def run_centralized(pooled: ClientDataset, cfg: FedConfig, out_dir=None, init: GlobalModel | None = None):
    """Same schedule on one pooled dataset without differential privacy."""
    _check_client(pooled)
    cfg = replace(cfg, dp=replace(cfg.dp, enabled=False), n_clients=None)
    model = init if init is not None else init_model(pooled.train[0].pixels.size, seed=cfg.seed)
    best_f1, best_model, records = -math.inf, model.copy(), []
    for t in range(1, cfg.rounds + 1):
        model = client_update(0, model, pooled, cfg, t)
        f1_t = evaluate_f1(model, pooled.validation)
        is_best = f1_t > best_f1
        if is_best:
            best_f1, best_model = f1_t, model.copy()
        path = _persist(model, out_dir, t, is_best)
        records.append(RoundRecord(t, [pooled.client_id], [f1_t], f1_t, is_best, path, math.inf))
    return best_model, records


def pool_clients(clients: Sequence[ClientDataset], client_id: int = 0) -> ClientDataset:
    return ClientDataset(client_id, [im for c in clients for im in c.train],
                         [im for c in clients for im in c.validation])


ROUND_LOG_FIELDS = ("round", "client_id", "f1_client", "f1_weighted", "epsilon", "is_best")


def write_round_log(records: Sequence[RoundRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_LOG_FIELDS)
        for r in records:
            for cid, f1 in zip(r.client_ids, r.f1_clients):
                w.writerow([r.round, cid, repr(f1), repr(r.f1_weighted), repr(r.epsilon), int(r.is_best)])
    return path


def read_round_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
