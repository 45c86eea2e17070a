"""Experiment configuration: one YAML file of flat dotted keys.

Keys absent from the file keep their defaults. Site parameters are addressed
as ``sites.<site_id>.<field>``; sites not mentioned come from the default
layout derived from the global seed. Nested mappings are flattened, so
``fed: {rounds: 4}`` and ``fed.rounds: 4`` mean the same thing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SiteSpec, default_site_specs
from .dp import DpConfig
from .errors import ConfigError
from .federated import FedConfig

METHODS = ("feature_distance", "ssim")

# dotted key -> (section, attribute, type)
_KEYS = {
    "seed": ("run", "seed", int),
    "out": ("run", "out", str),
    "data.test_fraction": ("run", "test_fraction", float),
    "data.val_fraction": ("run", "val_fraction", float),
    "model.hidden_dims": ("run", "hidden_dims", list),
    "model.feature_dim": ("run", "feature_dim", int),
    "fed.rounds": ("fed", "rounds", int),
    "fed.local_epochs": ("fed", "local_epochs", int),
    "fed.batch_size": ("fed", "batch_size", int),
    "fed.t_ft": ("fed", "t_ft", int),
    "fed.unfreeze_layers": ("fed", "unfreeze_layers", (int, type(None))),
    "fed.n_clients": ("fed", "n_clients", (int, type(None))),
    "fed.workers": ("run", "workers", int),
    "dp.enabled": ("dp", "enabled", bool),
    "dp.clip_norm": ("dp", "clip_norm", float),
    "dp.sigma": ("dp", "noise_multiplier", float),
    "dp.lr": ("dp", "learning_rate", (float, type(None))),
    "dp.optimizer": ("dp", "optimizer", str),
    "dp.beta1": ("dp", "beta1", float),
    "dp.beta2": ("dp", "beta2", float),
    "dp.adam_eps": ("dp", "adam_eps", float),
    "dp.delta": ("dp", "delta", float),
    "gen.r": ("run", "latent_dim", int),
    "gen.per_label": ("run", "per_label", int),
    "gen.steps": ("run", "steps", int),
    "retrieval.per_client": ("run", "per_client", int),
    "retrieval.methods": ("run", "methods", list),
    "eval.p": ("run", "p", int),
    "eval.n_negative": ("run", "n_negative", int),
    "eval.n_positive": ("run", "n_positive", int),
    "eval.model": ("run", "explain_model", str),
}

_SITE_FIELDS = {f.name: f.type for f in dataclasses.fields(SiteSpec) if f.name != "site_id"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    out: str = "runs/default"
    sites: tuple = ()
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    hidden_dims: tuple = (128,)
    feature_dim: int = 64
    fed: FedConfig = field(default_factory=FedConfig)
    workers: int = 1
    latent_dim: int = 16
    per_label: int = 200
    steps: int = 150
    per_client: int = 3
    methods: tuple = METHODS
    p: int = 9
    n_negative: int = 1
    n_positive: int = 4
    explain_model: str = "federated"

    def __post_init__(self):
        if not self.sites:
            object.__setattr__(self, "sites", tuple(default_site_specs(self.seed)))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.fed.seed != self.seed:
            object.__setattr__(self, "fed", dataclasses.replace(self.fed, seed=self.seed))
        checks = [
            (self.seed >= 0, "seed must be a non-negative integer"),
            (len(self.sites) >= 2, "sites: need at least one client and one out-of-distribution site"),
            (len({s.site_id for s in self.sites}) == len(self.sites), "sites: site ids must be unique"),
            (all(h >= 1 for h in self.hidden_dims), "model.hidden_dims entries must be >= 1"),
            (self.feature_dim >= 1, "model.feature_dim must be >= 1"),
            (self.workers >= 1, "fed.workers must be >= 1"),
            (self.latent_dim >= 1, "gen.r must be >= 1"),
            (self.per_label >= 1, "gen.per_label must be >= 1"),
            (self.steps >= 1, "gen.steps must be >= 1"),
            (self.per_client >= 1, "retrieval.per_client must be >= 1"),
            (set(self.methods) <= set(METHODS) and self.methods, f"retrieval.methods must be drawn from {METHODS}"),
            (self.p >= 2, "eval.p must be >= 2"),
            (self.n_negative >= 0 and self.n_positive >= 0 and self.n_negative + self.n_positive >= 1,
             "eval.n_negative and eval.n_positive must be >= 0 and not both 0"),
            (self.explain_model in ("federated", "centralized"), "eval.model must be 'federated' or 'centralized'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        n_clients = len(self.sites) - 1
        if self.fed.n_clients is not None and self.fed.n_clients != n_clients:
            raise ConfigError(f"fed.n_clients={self.fed.n_clients} but the corpus has {n_clients} client sites")
        if self.fed.unfreeze_layers is not None and self.fed.unfreeze_layers > len(self.hidden_dims) + 1:
            raise ConfigError(f"fed.unfreeze_layers={self.fed.unfreeze_layers} exceeds the "
                              f"{len(self.hidden_dims) + 1} backbone layers")
        if self.p != self.per_client * n_clients:
            raise ConfigError(f"eval.p={self.p} must equal retrieval.per_client x clients = "
                              f"{self.per_client * n_clients}")

    @property
    def dp(self) -> DpConfig:
        return self.fed.dp

    def to_flat(self, include_out: bool = True) -> dict:
        """Every setting as a dotted key, the form the config file uses."""
        d = self.fed.dp
        flat = {
            "seed": self.seed,
            "data.test_fraction": self.test_fraction,
            "data.val_fraction": self.val_fraction,
            "model.hidden_dims": list(self.hidden_dims),
            "model.feature_dim": self.feature_dim,
            "fed.rounds": self.fed.rounds,
            "fed.local_epochs": self.fed.local_epochs,
            "fed.batch_size": self.fed.batch_size,
            "fed.t_ft": self.fed.t_ft,
            "fed.unfreeze_layers": self.fed.unfreeze_layers,
            "fed.n_clients": self.fed.n_clients,
            "fed.workers": self.workers,
            "dp.enabled": d.enabled,
            "dp.clip_norm": d.clip_norm,
            "dp.sigma": d.noise_multiplier,
            "dp.lr": d.learning_rate,
            "dp.optimizer": d.optimizer,
            "dp.beta1": d.adam_betas[0],
            "dp.beta2": d.adam_betas[1],
            "dp.adam_eps": d.adam_eps,
            "dp.delta": d.delta,
            "gen.r": self.latent_dim,
            "gen.per_label": self.per_label,
            "gen.steps": self.steps,
            "retrieval.per_client": self.per_client,
            "retrieval.methods": list(self.methods),
            "eval.p": self.p,
            "eval.n_negative": self.n_negative,
            "eval.n_positive": self.n_positive,
            "eval.model": self.explain_model,
        }
        for s in self.sites:
            for k, v in s.to_dict().items():
                if k != "site_id":
                    flat[f"sites.{s.site_id}.{k}"] = v
        if include_out:
            flat["out"] = self.out
        return flat

    def config_hash(self) -> str:
        """SHA-256 of the canonical settings; the output directory does not count."""
        doc = json.dumps(self.to_flat(include_out=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()


def _coerce(key: str, value, typ, line: int | None):
    where = f" (line {line})" if line else ""
    types = typ if isinstance(typ, tuple) else (typ,)
    if value is None and type(None) in types:
        return None
    base = next(t for t in types if t is not type(None))
    if base is bool:
        if isinstance(value, bool):
            return value
    elif base is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif base is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif base is str:
        if isinstance(value, str):
            return value
    elif base in (list, tuple):
        if isinstance(value, (list, tuple)):
            return list(value)
    raise ConfigError(f"{key}{where}: expected {base.__name__}, got {value!r}")


def _walk(loader, prefix: str, node, line: int, out: dict, lines: dict):
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            key = str(loader.construct_object(key_node, deep=True))
            _walk(loader, f"{prefix}.{key}" if prefix else key, value_node, key_node.start_mark.line + 1,
                  out, lines)
        return
    if prefix in out:
        raise ConfigError(f"{prefix} (line {line}): key given twice")
    out[prefix] = loader.construct_object(node, deep=True)
    lines[prefix] = line


def parse_config_text(text: str, source: str = "<config>") -> tuple[dict, dict]:
    """Flat {dotted key: value} plus {dotted key: 1-based line number}."""
    flat, lines = {}, {}
    try:
        loader = yaml.SafeLoader(text)
        try:
            node = loader.get_single_node()
            if node is None:
                return flat, lines
            if not isinstance(node, yaml.MappingNode):
                raise ConfigError(f"{source}: top level must be a mapping of dotted keys")
            _walk(loader, "", node, 1, flat, lines)
        finally:
            loader.dispose()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}:{where} invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    return flat, lines


def config_from_flat(flat: dict, lines: dict | None = None, seed: int | None = None,
                     out: str | None = None) -> RunConfig:
    lines = lines or {}
    run, fed, dp, sites = {}, {}, {}, {}
    for key, value in flat.items():
        line = lines.get(key)
        where = f" (line {line})" if line else ""
        if key.startswith("sites."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _SITE_FIELDS:
                raise ConfigError(f"{key}{where}: unknown site setting; fields are {sorted(_SITE_FIELDS)}")
            try:
                sid = int(parts[1])
            except ValueError:
                raise ConfigError(f"{key}{where}: site id must be an integer") from None
            sites.setdefault(sid, {})[parts[2]] = (value, line)
            continue
        if key not in _KEYS:
            raise ConfigError(f"{key}{where}: unknown setting")
        section, attr, typ = _KEYS[key]
        {"run": run, "fed": fed, "dp": dp}[section][attr] = _coerce(key, value, typ, line)
    if seed is not None:
        run["seed"] = int(seed)
    if out is not None:
        run["out"] = str(out)
    base_seed = run.get("seed", RunConfig.seed)
    specs = {s.site_id: s for s in default_site_specs(base_seed)}
    for sid, fields in sorted(sites.items()):
        d = specs[sid].to_dict() if sid in specs else {"site_id": sid}
        for name, (value, line) in fields.items():
            if name == "blob_position_bias":
                value = _coerce(f"sites.{sid}.{name}", value, list, line)
            else:
                typ = int if name in ("n_images", "seed") else float
                value = _coerce(f"sites.{sid}.{name}", value, typ, line)
            d[name] = value
        try:
            specs[sid] = SiteSpec.from_dict(d)
        except ConfigError as exc:
            named = [n for n in fields if n in str(exc)]
            line = fields[named[0]][1] if named else min((ln for _, ln in fields.values() if ln), default=None)
            key = f"sites.{sid}.{named[0]}" if named else f"sites.{sid}"
            raise ConfigError(f"{key}{f' (line {line})' if line else ''}: {exc}") from exc
    if "beta1" in dp or "beta2" in dp:
        b1, b2 = DpConfig.adam_betas
        dp["adam_betas"] = (dp.pop("beta1", b1), dp.pop("beta2", b2))
    dp_cfg = DpConfig(**dp)
    fed_cfg = FedConfig(dp=dp_cfg, seed=base_seed, **fed)
    run["hidden_dims"] = tuple(run.get("hidden_dims", RunConfig.hidden_dims))
    return RunConfig(sites=tuple(specs[k] for k in sorted(specs)), fed=fed_cfg, **run)


def load_config(path=None, seed: int | None = None, out: str | None = None) -> RunConfig:
    """Read a config file (or only defaults when ``path`` is None) and apply CLI overrides."""
    if path is None:
        return config_from_flat({}, seed=seed, out=out)
    path = Path(path)
    text = path.read_text()
    flat, lines = parse_config_text(text, str(path))
    return config_from_flat(flat, lines, seed=seed, out=out)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True, default_flow_style=None))
    return path
