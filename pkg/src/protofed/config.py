"""Experiment configuration.

Configs are JSON documents parsed into dataclasses with explicit
validation; error messages carry the dotted field path. Defaults follow
the reference training setup (20 clients, 200 rounds, one local epoch,
batch 4, lr 0.01, lambda 1, p=5, q=100, std=2).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError

DATASET_KINDS = ("blobs", "digits", "idx")
ATTACK_KINDS = ("none", "static_trigger", "dba_fragments", "proto_scale", "bapfl")
FLIP_STRATEGIES = ("pfs", "obf", "gpf")
PATCH_PLACEMENTS = ("corner", "center")
TARGET_MAPS = ("complement", "fixed")
EVAL_RULES = ("head", "prototype")
MAX_SEED = (1 << 64) - 1


@dataclass
class DataConfig:
    kind: str = "digits"
    num_classes: int = 10
    per_class: int = 200
    dim: int = 16
    separation: float = 3.0
    spread: float = 0.6
    images_path: str | None = None
    labels_path: str | None = None
    cache_dir: str = ".protofed-data"


@dataclass
class PartitionConfig:
    num_clients: int = 20
    p: float = 5.0
    q: float = 100.0
    std: float = 2.0
    test_fraction: float = 0.25


@dataclass
class ModelConfig:
    hidden_sizes: list = field(default_factory=lambda: [128, 64])


@dataclass
class AttackConfig:
    kind: str = "none"
    attack_rate: float = 0.0
    alpha: float = 0.75
    target_map: str = "complement"
    fixed_target: int = 0
    k_fraction: float | None = None  # None: defaults to alpha
    k_count: int | None = None  # absolute override of k_fraction
    flip_strategy: str = "pfs"
    use_pps: bool = False  # PPS add-on for the fixed-patch baselines
    trigger_pretrain_steps: int = 50
    trigger_steps_per_round: int = 0  # 0: one pass over the local data
    lr_trigger: float = 0.5
    lam1: float = 0.1
    lam2: float = 0.01
    lam3: float = 0.001
    scale_factor: float = 5.0  # proto_scale multiplier
    patch_size: int = 3
    patch_placement: str = "corner"
    count_scale: float = 1.0  # multiplier on flipped uploads' reported counts


@dataclass
class ExperimentConfig:
    dataset: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    rounds: int = 200
    local_epochs: int = 1
    batch_size: int = 4
    lr: float = 0.01
    lam: float = 1.0
    seed: int = 0
    eval_every: int = 1
    workers: int = 1
    eval_rule: str = "head"
    dump_prototypes: bool = False
    out_dir: str | None = None


def _fail(path: str, msg: str):
    raise ConfigError("%s: %s" % (path, msg))


def _section(obj: dict, key: str, path: str) -> dict:
    sub = obj.get(key, {})
    if not isinstance(sub, dict):
        _fail("%s.%s" % (path, key) if path else key, "must be an object")
    return sub


def _reject_unknown(obj: dict, allowed, path: str) -> None:
    extra = sorted(set(obj) - set(allowed))
    if extra:
        where = "%s.%s" % (path, extra[0]) if path else extra[0]
        _fail(where, "unknown field")


def _get(obj: dict, key: str, default, path: str, kind: str):
    """Fetch and type-check one field. kind: int, num, str, bool, or opt_str."""
    full = "%s.%s" % (path, key) if path else key
    if key not in obj:
        return default
    val = obj[key]
    if kind == "bool":
        if not isinstance(val, bool):
            _fail(full, "must be a boolean")
    elif kind == "int":
        if isinstance(val, bool) or not isinstance(val, int):
            _fail(full, "must be an integer")
    elif kind == "num":
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            _fail(full, "must be a number")
        val = float(val)
    elif kind == "str":
        if not isinstance(val, str):
            _fail(full, "must be a string")
    elif kind == "opt_str":
        if val is not None and not isinstance(val, str):
            _fail(full, "must be a string or null")
    return val


def _parse_dataset(obj: dict) -> DataConfig:
    path = "dataset"
    _reject_unknown(obj, ("kind", "num_classes", "per_class", "dim", "separation",
                          "spread", "images_path", "labels_path", "cache_dir"), path)
    cfg = DataConfig(
        kind=_get(obj, "kind", "digits", path, "str"),
        num_classes=_get(obj, "num_classes", 10, path, "int"),
        per_class=_get(obj, "per_class", 200, path, "int"),
        dim=_get(obj, "dim", 16, path, "int"),
        separation=_get(obj, "separation", 3.0, path, "num"),
        spread=_get(obj, "spread", 0.6, path, "num"),
        images_path=_get(obj, "images_path", None, path, "opt_str"),
        labels_path=_get(obj, "labels_path", None, path, "opt_str"),
        cache_dir=_get(obj, "cache_dir", ".protofed-data", path, "str"),
    )
    if cfg.kind not in DATASET_KINDS:
        _fail("dataset.kind", "must be one of %s" % (DATASET_KINDS,))
    if cfg.kind == "blobs":
        if cfg.num_classes < 2:
            _fail("dataset.num_classes", "must be >= 2")
        if cfg.per_class < 2:
            _fail("dataset.per_class", "must be >= 2")
        if cfg.dim < 1:
            _fail("dataset.dim", "must be >= 1")
        if cfg.spread <= 0:
            _fail("dataset.spread", "must be > 0")
    if cfg.kind == "idx":
        if not cfg.images_path:
            _fail("dataset.images_path", "required for kind 'idx'")
        if not cfg.labels_path:
            _fail("dataset.labels_path", "required for kind 'idx'")
    return cfg


def _parse_partition(obj: dict) -> PartitionConfig:
    path = "partition"
    _reject_unknown(obj, ("num_clients", "p", "q", "std", "test_fraction"), path)
    cfg = PartitionConfig(
        num_clients=_get(obj, "num_clients", 20, path, "int"),
        p=_get(obj, "p", 5.0, path, "num"),
        q=_get(obj, "q", 100.0, path, "num"),
        std=_get(obj, "std", 2.0, path, "num"),
        test_fraction=_get(obj, "test_fraction", 0.25, path, "num"),
    )
    if cfg.num_clients < 1:
        _fail("partition.num_clients", "must be >= 1")
    if cfg.p < 1:
        _fail("partition.p", "must be >= 1")
    if cfg.q < 1:
        _fail("partition.q", "must be >= 1")
    if cfg.std < 0:
        _fail("partition.std", "must be >= 0")
    if not (0.0 < cfg.test_fraction < 1.0):
        _fail("partition.test_fraction", "must be in (0, 1)")
    return cfg


def _parse_model(obj: dict) -> ModelConfig:
    path = "model"
    _reject_unknown(obj, ("hidden_sizes",), path)
    hidden = obj.get("hidden_sizes", [128, 64])
    if (not isinstance(hidden, list) or not hidden
            or any(isinstance(h, bool) or not isinstance(h, int) or h < 1 for h in hidden)):
        _fail("model.hidden_sizes", "must be a non-empty list of positive integers")
    return ModelConfig(hidden_sizes=list(hidden))


def _parse_attack(obj: dict) -> AttackConfig:
    path = "attack"
    _reject_unknown(obj, ("kind", "attack_rate", "alpha", "target_map", "fixed_target",
                          "k_fraction", "k_count", "flip_strategy", "use_pps",
                          "trigger_pretrain_steps", "trigger_steps_per_round",
                          "lr_trigger", "lam1", "lam2", "lam3", "scale_factor",
                          "patch_size", "patch_placement", "count_scale"), path)
    kind = _get(obj, "kind", "none", path, "str")
    if kind not in ATTACK_KINDS:
        _fail("attack.kind", "must be one of %s" % (ATTACK_KINDS,))
    default_map = "complement" if kind in ("none", "bapfl") else "fixed"
    cfg = AttackConfig(
        kind=kind,
        attack_rate=_get(obj, "attack_rate", 0.0, path, "num"),
        alpha=_get(obj, "alpha", 0.75, path, "num"),
        target_map=_get(obj, "target_map", default_map, path, "str"),
        fixed_target=_get(obj, "fixed_target", 0, path, "int"),
        k_fraction=obj.get("k_fraction"),
        k_count=obj.get("k_count"),
        flip_strategy=_get(obj, "flip_strategy", "pfs", path, "str"),
        use_pps=_get(obj, "use_pps", False, path, "bool"),
        trigger_pretrain_steps=_get(obj, "trigger_pretrain_steps", 50, path, "int"),
        trigger_steps_per_round=_get(obj, "trigger_steps_per_round", 0, path, "int"),
        lr_trigger=_get(obj, "lr_trigger", 0.5, path, "num"),
        lam1=_get(obj, "lam1", 0.1, path, "num"),
        lam2=_get(obj, "lam2", 0.01, path, "num"),
        lam3=_get(obj, "lam3", 0.001, path, "num"),
        scale_factor=_get(obj, "scale_factor", 5.0, path, "num"),
        patch_size=_get(obj, "patch_size", 3, path, "int"),
        patch_placement=_get(obj, "patch_placement", "corner", path, "str"),
        count_scale=_get(obj, "count_scale", 1.0, path, "num"),
    )
    if not (0.0 <= cfg.attack_rate <= 1.0):
        _fail("attack.attack_rate", "must be in [0, 1]")
    if not (0.0 <= cfg.alpha <= 1.0):
        _fail("attack.alpha", "must be in [0, 1]")
    if cfg.target_map not in TARGET_MAPS:
        _fail("attack.target_map", "must be one of %s" % (TARGET_MAPS,))
    if kind in ("static_trigger", "dba_fragments", "proto_scale") and cfg.target_map != "fixed":
        _fail("attack.target_map", "fixed-patch baselines require 'fixed'")
    if cfg.fixed_target < 0:
        _fail("attack.fixed_target", "must be >= 0")
    if cfg.k_fraction is not None:
        if isinstance(cfg.k_fraction, bool) or not isinstance(cfg.k_fraction, (int, float)):
            _fail("attack.k_fraction", "must be a number or null")
        cfg.k_fraction = float(cfg.k_fraction)
        if not (0.0 < cfg.k_fraction <= 1.0):
            _fail("attack.k_fraction", "must be in (0, 1]")
    if cfg.k_count is not None:
        if isinstance(cfg.k_count, bool) or not isinstance(cfg.k_count, int):
            _fail("attack.k_count", "must be an integer or null")
        if cfg.k_count < 1:
            _fail("attack.k_count", "must be >= 1")
    if cfg.flip_strategy not in FLIP_STRATEGIES:
        _fail("attack.flip_strategy", "must be one of %s" % (FLIP_STRATEGIES,))
    if cfg.trigger_pretrain_steps < 0:
        _fail("attack.trigger_pretrain_steps", "must be >= 0")
    if cfg.trigger_steps_per_round < 0:
        _fail("attack.trigger_steps_per_round", "must be >= 0")
    if cfg.lr_trigger <= 0:
        _fail("attack.lr_trigger", "must be > 0")
    for name in ("lam1", "lam2", "lam3"):
        if getattr(cfg, name) < 0:
            _fail("attack.%s" % name, "must be >= 0")
    if cfg.scale_factor <= 0:
        _fail("attack.scale_factor", "must be > 0")
    if cfg.patch_size < 1:
        _fail("attack.patch_size", "must be >= 1")
    if cfg.patch_placement not in PATCH_PLACEMENTS:
        _fail("attack.patch_placement", "must be one of %s" % (PATCH_PLACEMENTS,))
    if cfg.count_scale <= 0:
        _fail("attack.count_scale", "must be > 0")
    return cfg


def parse_config(obj: dict) -> ExperimentConfig:
    """Validate a JSON-shaped dict into an ExperimentConfig."""
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    allowed = ("dataset", "partition", "model", "attack", "rounds", "local_epochs",
               "batch_size", "lr", "lam", "seed", "eval_every", "workers",
               "eval_rule", "dump_prototypes", "out_dir")
    _reject_unknown(obj, allowed, "")
    cfg = ExperimentConfig(
        dataset=_parse_dataset(_section(obj, "dataset", "")),
        partition=_parse_partition(_section(obj, "partition", "")),
        model=_parse_model(_section(obj, "model", "")),
        attack=_parse_attack(_section(obj, "attack", "")),
        rounds=_get(obj, "rounds", 200, "", "int"),
        local_epochs=_get(obj, "local_epochs", 1, "", "int"),
        batch_size=_get(obj, "batch_size", 4, "", "int"),
        lr=_get(obj, "lr", 0.01, "", "num"),
        lam=_get(obj, "lam", 1.0, "", "num"),
        seed=_get(obj, "seed", 0, "", "int"),
        eval_every=_get(obj, "eval_every", 1, "", "int"),
        workers=_get(obj, "workers", 1, "", "int"),
        eval_rule=_get(obj, "eval_rule", "head", "", "str"),
        dump_prototypes=_get(obj, "dump_prototypes", False, "", "bool"),
        out_dir=_get(obj, "out_dir", None, "", "opt_str"),
    )
    if cfg.rounds < 1:
        _fail("rounds", "must be >= 1")
    if cfg.local_epochs < 0:
        _fail("local_epochs", "must be >= 0")
    if cfg.batch_size < 1:
        _fail("batch_size", "must be >= 1")
    if cfg.lr <= 0:
        _fail("lr", "must be > 0")
    if cfg.lam < 0:
        _fail("lam", "must be >= 0")
    if not (0 <= cfg.seed <= MAX_SEED):
        _fail("seed", "must be in [0, 2^64)")
    if cfg.eval_every < 1:
        _fail("eval_every", "must be >= 1")
    if cfg.workers < 1:
        _fail("workers", "must be >= 1")
    if cfg.eval_rule not in EVAL_RULES:
        _fail("eval_rule", "must be one of %s" % (EVAL_RULES,))
    return cfg


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    if not os.path.exists(path):
        raise ConfigError("%s: config file not found" % path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError("%s: invalid JSON (%s)" % (path, exc)) from exc
    return parse_config(obj)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Full JSON-shaped echo; parse_config round-trips it."""
    return {
        "dataset": {
            "kind": cfg.dataset.kind,
            "num_classes": cfg.dataset.num_classes,
            "per_class": cfg.dataset.per_class,
            "dim": cfg.dataset.dim,
            "separation": cfg.dataset.separation,
            "spread": cfg.dataset.spread,
            "images_path": cfg.dataset.images_path,
            "labels_path": cfg.dataset.labels_path,
            "cache_dir": cfg.dataset.cache_dir,
        },
        "partition": {
            "num_clients": cfg.partition.num_clients,
            "p": cfg.partition.p,
            "q": cfg.partition.q,
            "std": cfg.partition.std,
            "test_fraction": cfg.partition.test_fraction,
        },
        "model": {"hidden_sizes": list(cfg.model.hidden_sizes)},
        "attack": {
            "kind": cfg.attack.kind,
            "attack_rate": cfg.attack.attack_rate,
            "alpha": cfg.attack.alpha,
            "target_map": cfg.attack.target_map,
            "fixed_target": cfg.attack.fixed_target,
            "k_fraction": cfg.attack.k_fraction,
            "k_count": cfg.attack.k_count,
            "flip_strategy": cfg.attack.flip_strategy,
            "use_pps": cfg.attack.use_pps,
            "trigger_pretrain_steps": cfg.attack.trigger_pretrain_steps,
            "trigger_steps_per_round": cfg.attack.trigger_steps_per_round,
            "lr_trigger": cfg.attack.lr_trigger,
            "lam1": cfg.attack.lam1,
            "lam2": cfg.attack.lam2,
            "lam3": cfg.attack.lam3,
            "scale_factor": cfg.attack.scale_factor,
            "patch_size": cfg.attack.patch_size,
            "patch_placement": cfg.attack.patch_placement,
            "count_scale": cfg.attack.count_scale,
        },
        "rounds": cfg.rounds,
        "local_epochs": cfg.local_epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "lam": cfg.lam,
        "seed": cfg.seed,
        "eval_every": cfg.eval_every,
        "workers": cfg.workers,
        "eval_rule": cfg.eval_rule,
        "dump_prototypes": cfg.dump_prototypes,
        "out_dir": cfg.out_dir,
    }
