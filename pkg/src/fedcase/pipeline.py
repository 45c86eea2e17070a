"""Experiment stages, each reading and writing files under the run directory.

Layout of ``cfg.out``::

    config.yaml                 resolved settings
    data/manifest.json          site specs + split fractions
    data/site_<k>.fcds          one dataset file per site
    federated/round_<t>.fckp    per-round global checkpoints, best.fckp, rounds.csv, train.json
    centralized/...             same for the pooled baseline
    generators/client_<k>.fcgn  fitted per-client generators
    pool/pool.fcds, pool.json   explanation pool + provenance sidecar
    explain/retrieval.json      per-query ranked explanations for both methods
    explain/evaluation.json     per-query nDCG and means
    explain/sheets/*.pgm        contact sheets and saliency maps
    report/classification.json  F1 table for both training modes
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, dump_config
from .data import (Corpus, SeverityCalibration, generate_site, load_corpus, site_filename, write_dataset,
                   write_manifest)
from .errors import ConfigError
from .federated import evaluate_f1, run_centralized, run_federated, write_round_log
from .generator import fit_generator, load_generator, load_pool, sample_pool, save_generator, save_pool
from .metrics import evaluate_ranking, f1_score, severity_ground_truth
from .model import LabeledImage, init_model, load_checkpoint, saliency
from .retrieval import contact_sheet, pool_features, rerank_ssim, retrieve, retrieve_ssim, write_pgm

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
MODES = ("federated", "centralized")


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    def train(self, mode: str) -> Path:
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        return self.root / mode

    @property
    def generators(self) -> Path:
        return self.root / "generators"

    @property
    def pool(self) -> Path:
        return self.root / "pool" / "pool.fcds"

    @property
    def explain(self) -> Path:
        return self.root / "explain"

    @property
    def report(self) -> Path:
        return self.root / "report"


def layout(cfg: RunConfig) -> Layout:
    return Layout(Path(cfg.out))


def _finite(x):
    return float(x) if math.isfinite(x) else None


def run_metadata(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "tool_version": __version__}


def write_json(path, doc: dict, cfg: RunConfig) -> Path:
    body = {"schema_version": REPORT_SCHEMA, **run_metadata(cfg)}
    body.update(doc)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


# -- stages -----------------------------------------------------------------------

def gen_data(cfg: RunConfig) -> list[Path]:
    lay = layout(cfg)
    dump_config(cfg, lay.root / "config.yaml")
    paths = [write_dataset(generate_site(s), lay.data / site_filename(s)) for s in cfg.sites]
    paths.append(write_manifest(cfg.sites, lay.data / "manifest.json", cfg.test_fraction, cfg.val_fraction,
                                run_metadata(cfg)))
    log.info("wrote %d site files to %s", len(cfg.sites), lay.data)
    return paths


def corpus_for(cfg: RunConfig) -> Corpus:
    return load_corpus(layout(cfg).data)


def initial_model(cfg: RunConfig, corpus: Corpus):
    input_dim = corpus.clients[0].train[0].pixels.size
    return init_model(input_dim, cfg.hidden_dims, cfg.feature_dim, seed=cfg.seed)


def train(cfg: RunConfig, mode: str = "federated", corpus: Corpus | None = None):
    """Train one mode; writes checkpoints, the round log and a summary. Returns (best model, records)."""
    out = layout(cfg).train(mode)
    corpus = corpus or corpus_for(cfg)
    init = initial_model(cfg, corpus)
    if mode == "federated":
        best, records = run_federated(corpus.clients, cfg.fed, out, init=init, workers=cfg.workers)
    else:
        best, records = run_centralized(corpus.pooled(), cfg.fed, out, init=init)
    write_round_log(records, out / "rounds.csv")
    best_round = max((r for r in records if r.is_best), key=lambda r: r.round)
    write_json(out / "train.json", {
        "mode": mode,
        "rounds": len(records),
        "best_round": best_round.round,
        "best_f1_weighted": best_round.f1_weighted,
        "f1_weighted_by_round": [r.f1_weighted for r in records],
        "epsilon": _finite(records[-1].epsilon),
        "dp_enabled": bool(cfg.dp.enabled and mode == "federated"),
        "checkpoint": "best.fckp",
    }, cfg)
    return best, records


def fit_generators(cfg: RunConfig, corpus: Corpus | None = None) -> list[Path]:
    corpus = corpus or corpus_for(cfg)
    out = layout(cfg).generators
    return [save_generator(fit_generator(c, cfg.latent_dim, cfg.seed), out / f"client_{c.client_id}.fcgn")
            for c in corpus.clients]


def sample_explanation_pool(cfg: RunConfig, corpus: Corpus | None = None):
    corpus = corpus or corpus_for(cfg)
    lay = layout(cfg)
    calibration = SeverityCalibration.from_generator_params()
    pool = []
    for c in corpus.clients:
        path = lay.generators / f"client_{c.client_id}.fcgn"
        pool.extend(sample_pool(load_generator(path), cfg.per_label, cfg.steps, cfg.seed, calibration))
    save_pool(pool, lay.pool, meta=run_metadata(cfg))
    log.info("pool of %d synthetic cases written to %s", len(pool), lay.pool)
    return pool


def select_queries(ood: list[LabeledImage], n_negative: int, n_positive: int, seed: int) -> list[LabeledImage]:
    """Negatives first, then positives, each drawn without replacement from the OOD set."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    picked = []
    for label, n in ((0, n_negative), (1, n_positive)):
        group = sorted((im for im in ood if im.label == label), key=lambda im: im.id)
        if n > len(group):
            raise ConfigError(f"eval asks for {n} queries with label {label} but the OOD set has {len(group)}")
        picked.extend(group[i] for i in rng.choice(len(group), size=n, replace=False))
    return picked


def _saliency_pgm(sal: np.ndarray) -> np.ndarray:
    mag = np.abs(sal)
    top = mag.max()
    return np.zeros(mag.shape, np.uint8) if top == 0 else np.rint(255.0 * mag / top).astype(np.uint8)


def explain(cfg: RunConfig, corpus: Corpus | None = None) -> dict:
    """Retrieve explanations for the selected OOD queries and score both rankings.

    ``ndcg_ssim`` orders the feature method's candidates by SSIM, so both methods
    rank the same nine cases; ``ndcg_ssim_retrieval`` scores SSIM's own top-3
    per client against the ground truth of its own candidates.
    """
    lay = layout(cfg)
    corpus = corpus or corpus_for(cfg)
    model = load_checkpoint(lay.train(cfg.explain_model) / "best.fckp")
    pool = load_pool(lay.pool)
    byid = {c.id: c for c in pool}
    clients = [c.client_id for c in corpus.clients]
    feats = pool_features(model, pool)
    queries = select_queries(corpus.ood_test, cfg.n_negative, cfg.n_positive, cfg.seed)
    sheets = lay.explain / "sheets"
    retrieval_docs, evals = [], []
    for q in queries:
        r_feat = retrieve(model, q, pool, cfg.per_client, expected_clients=clients, pool_feats=feats)
        cands = [byid[i] for i in r_feat.case_ids]
        gt = severity_ground_truth(q.severity, [(c.id, c.image.severity) for c in cands])
        p = len(cands)
        ev_feat = evaluate_ranking(r_feat.case_ids, gt, p, q.id)
        ev_ssim = evaluate_ranking(rerank_ssim(q, cands), gt, p, q.id)
        results = {"feature_distance": r_feat.to_dict()}
        rows = [[c.image for c in cands]]
        entry = {
            "query_id": q.id, "label": q.label, "severity": q.severity,
            "predicted_label": r_feat.predicted_label, "positive_probability": r_feat.positive_probability,
            "p": p, "ground_truth_order": gt,
            "ndcg_feature": ev_feat.ndcg, "ndcg_ssim": ev_ssim.ndcg,
            "relevances_feature": ev_feat.relevances, "relevances_ssim": ev_ssim.relevances,
            "ssim_order": ev_ssim.method_order,
        }
        if "ssim" in cfg.methods:
            r_ssim = retrieve_ssim(q, pool, cfg.per_client, model=model, expected_clients=clients)
            own = [byid[i] for i in r_ssim.case_ids]
            gt_own = severity_ground_truth(q.severity, [(c.id, c.image.severity) for c in own])
            entry["ndcg_ssim_retrieval"] = evaluate_ranking(r_ssim.case_ids, gt_own, len(own), q.id).ndcg
            results["ssim"] = r_ssim.to_dict()
            rows.append([c.image for c in own])
        write_pgm(contact_sheet(q, rows), sheets / f"query_{q.id}.pgm")
        write_pgm(_saliency_pgm(saliency(model, q)), sheets / f"query_{q.id}_saliency.pgm")
        retrieval_docs.append({"query_id": q.id, "label": q.label, "severity": q.severity, "results": results})
        evals.append(entry)
    write_json(lay.explain / "retrieval.json", {"model": cfg.explain_model, "queries": retrieval_docs}, cfg)
    summary = {
        "model": cfg.explain_model,
        "n_queries": len(evals),
        "queries": evals,
        "mean_ndcg_feature": math.fsum(e["ndcg_feature"] for e in evals) / len(evals),
        "mean_ndcg_ssim": math.fsum(e["ndcg_ssim"] for e in evals) / len(evals),
        "feature_wins": sum(e["ndcg_feature"] > e["ndcg_ssim"] for e in evals),
    }
    if "ssim" in cfg.methods:
        summary["mean_ndcg_ssim_retrieval"] = math.fsum(e["ndcg_ssim_retrieval"] for e in evals) / len(evals)
    write_json(lay.explain / "evaluation.json", summary, cfg)
    log.info("nDCG feature %.4f  ssim %.4f over %d queries", summary["mean_ndcg_feature"],
             summary["mean_ndcg_ssim"], len(evals))
    return summary


def report(cfg: RunConfig, corpus: Corpus | None = None) -> dict:
    """F1 on the in-distribution and OOD test sets for both trained models."""
    lay = layout(cfg)
    corpus = corpus or corpus_for(cfg)
    doc = {}
    for mode in MODES:
        model = load_checkpoint(lay.train(mode) / "best.fckp")
        train_doc = read_json(lay.train(mode) / "train.json")
        doc[mode] = {
            "f1_in_distribution": evaluate_f1(model, corpus.id_test),
            "f1_ood": evaluate_f1(model, corpus.ood_test),
            "best_round": train_doc["best_round"],
            "epsilon": train_doc["epsilon"],
        }
    doc["always_positive"] = {
        "f1_in_distribution": f1_score([1] * len(corpus.id_test), [im.label for im in corpus.id_test]),
        "f1_ood": f1_score([1] * len(corpus.ood_test), [im.label for im in corpus.ood_test]),
    }
    ev_path = lay.explain / "evaluation.json"
    if ev_path.exists():
        ev = read_json(ev_path)
        doc["retrieval"] = {k: ev[k] for k in ("model", "n_queries", "mean_ndcg_feature", "mean_ndcg_ssim")}
    write_json(lay.report / "classification.json", doc, cfg)
    return doc


def run_all(cfg: RunConfig) -> dict:
    gen_data(cfg)
    corpus = corpus_for(cfg)
    for mode in MODES:
        train(cfg, mode, corpus)
    fit_generators(cfg, corpus)
    sample_explanation_pool(cfg, corpus)
    evaluation = explain(cfg, corpus)
    return {"evaluation": evaluation, "classification": report(cfg, corpus)}
