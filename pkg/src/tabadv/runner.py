"""Config-driven experiment pipeline.

Stages run in order: ``preprocess`` (load, drop correlated columns,
split, optional oversampling), ``train`` (targets, surrogate, importance
sources, dependency regressors), ``attack`` (attack-set construction and
every configured attack against every target), ``evaluate`` (detector
banks, SHAP range tables and all metric families) and ``stats``.

Randomness fans out from one master seed: every consumer gets
``derive_seed(master, *keys)``, a SHA-256 hash of the master seed and a
stable key path such as ``("attack", "boundary", "gb", 17)``. Per-sample
seeds therefore do not depend on execution order or on ``jobs``.

Artifacts written under the output directory::

    models/        versioned JSON model documents
    ledgers/       one JSON ledger per (attack, target)
    report.json    the deterministic report
    timing.json    wall-clock measurements (not reproducible)
    plots/         tidy CSVs for box plots and detection-rate bars
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy
import yaml

import tabadv
from tabadv import kernels
from tabadv.attacks.base import BlackBoxHandle, InitFailed
from tabadv.attacks.boundary import BoundaryConfig, boundary_attack
from tabadv.attacks.hopskipjump import HsjConfig, hopskipjump_attack
from tabadv.attacks.transfer import FeatureSelector, TransferConfig, transfer_attack
from tabadv.coherence import ConstraintSet, DependencyRegistry, fit_dependency_models
from tabadv.csad import BankConfig, fit_bank
from tabadv.learners import serialize
from tabadv.learners.nn import TrainConfig, train_surrogate
from tabadv.learners.trees import fit_gradient_boosting, fit_random_forest, predict
from tabadv.metrics import (EffortModel, LedgerRow, RunLedger, l0, l2, query_stats, success_rates,
                            time_query_attack, time_transfer_attack)
from tabadv.schema import (DataError, Dataset, Schema, correlation_matrix,
                           drop_correlated, load_csv, load_schema, oversample_minority,
                           train_test_split)
from tabadv.shap_eval import anomalous_counts, build_range_table, shap_matrix
from tabadv import stats as st

SCHEMA_VERSION = 1
STAGES = ("preprocess", "train", "attack", "evaluate", "stats")
ATTACK_TYPES = {"boundary": "query", "hopskipjump": "query", "transfer": "transfer"}
MODEL_KINDS = ("gradient_boosting", "random_forest")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` keeps the original error."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(master, *keys) -> int:
    text = ":".join([str(int(master))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


# -- configuration ------------------------------------------------------------

@dataclass
class ModelSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class AttackSpec:
    name: str
    type: str
    params: dict = field(default_factory=dict)
    selector: str = "random"  # transfer only: "random" or an importance source name
    k: int = 2
    n_corr: int = 1

    @property
    def family(self) -> str:
        return ATTACK_TYPES[self.type]


def _get(d, key, default, kind=None):
    v = d.get(key, default)
    if kind is not None and v is not None and not isinstance(v, kind):
        raise ConfigError(f"key {key!r}: expected {getattr(kind, '__name__', kind)}, got {v!r}")
    return v


@dataclass
class ExperimentConfig:
    data_csv: Path
    schema_path: Path
    targets: list
    attacks: list
    seed: int = 0
    train_fraction: float = 0.75
    surrogate_fraction: float = 0.5
    drop_correlated: float | None = 0.9
    oversample: bool = False
    importance_sources: list = field(default_factory=list)
    surrogate: dict = field(default_factory=dict)
    dependents: list = field(default_factory=list)
    dependency_model: dict = field(default_factory=dict)
    per_class_count: int = 20
    detector_kinds: tuple = ("if", "ae")
    detector_modes: tuple = ("csad", "standard")
    bank: BankConfig = field(default_factory=BankConfig)
    shap_modes: tuple = ("csad", "standard")
    stats: bool = True
    effort: dict = field(default_factory=dict)
    output: Path | None = None
    jobs: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        base = Path(base_dir)
        try:
            data = _get(d, "data", None, dict)
            if data is None or "csv" not in data or "schema" not in data:
                raise ConfigError("config needs data.csv and data.schema")
            pre = _get(d, "preprocess", {}, dict)
            targets = [ModelSpec(str(m["name"]), str(m["kind"]), dict(m.get("params") or {}))
                       for m in _get(d, "targets", [], list)]
            sources = [ModelSpec(str(m["name"]), str(m["kind"]), dict(m.get("params") or {}))
                       for m in _get(d, "importance_sources", [], list)]
            attacks = []
            for a in _get(d, "attacks", [], list):
                attacks.append(AttackSpec(str(a["name"]), str(a["type"]), dict(a.get("params") or {}),
                                          str(a.get("selector", "random")), int(a.get("k", 2)),
                                          int(a.get("n_corr", 1))))
            det = _get(d, "detectors", {}, dict)
            ae = _get(det, "ae", {}, dict)
            bank = BankConfig(
                min_samples=int(det.get("min_class_size", 20)),
                validation_fraction=float(det.get("validation_fraction", 0.2)),
                n_trees=int(det.get("n_trees", 100)),
                psi=int(det.get("psi", 256)),
                ae_epochs=int(ae.get("epochs", 10)),
                ae_learning_rate=float(ae.get("learning_rate", 1e-3)),
                ae_weight_decay=float(ae.get("weight_decay", 1e-8)),
                ae_batch_size=int(ae.get("batch_size", 32)),
                ae_hidden=int(ae.get("hidden", 64)),
            )
            stats_cfg = d.get("stats", True)
            stats_on = bool(stats_cfg.get("enabled", True)) if isinstance(stats_cfg, dict) else bool(stats_cfg)
            out = d.get("output")
            cfg = cls(
                data_csv=base / str(data["csv"]),
                schema_path=base / str(data["schema"]),
                targets=targets,
                attacks=attacks,
                seed=int(d.get("seed", 0)),
                train_fraction=float(pre.get("train_fraction", 0.75)),
                surrogate_fraction=float(pre.get("surrogate_fraction", 0.5)),
                drop_correlated=None if pre.get("drop_correlated", 0.9) is None
                else float(pre.get("drop_correlated", 0.9)),
                oversample=bool(pre.get("oversample", False)),
                importance_sources=sources,
                surrogate=dict(_get(d, "surrogate", {}, dict)),
                dependents=[str(x) for x in _get(d, "dependents", [], list)],
                dependency_model=dict(_get(d, "dependency_model", {}, dict)),
                per_class_count=int(_get(d, "attack_set", {}, dict).get("per_class_count", 20)),
                detector_kinds=tuple(det.get("kinds", ("if", "ae"))),
                detector_modes=tuple(det.get("modes", ("csad", "standard"))),
                bank=bank,
                shap_modes=tuple(_get(d, "shap", {}, dict).get("modes", ("csad", "standard"))),
                stats=stats_on,
                effort=dict(_get(d, "effort", {}, dict)),
                output=None if out is None else base / str(out),
                jobs=int(d.get("jobs", 1)),
                raw=d,
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed config: {exc}") from None
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        return cls.from_dict(d, path.parent)

    def check(self) -> None:
        """Structural checks that need no data."""
        if not self.targets:
            raise ConfigError("at least one target model is required")
        if not self.attacks:
            raise ConfigError("at least one attack is required")
        if not 0 < self.train_fraction < 1 or not 0 < self.surrogate_fraction < 1:
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.drop_correlated is not None and not 0 < self.drop_correlated <= 1:
            raise ConfigError("drop_correlated must lie in (0, 1]")
        if self.per_class_count < 1:
            raise ConfigError("attack_set.per_class_count must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        names = [m.name for m in self.targets]
        snames = [m.name for m in self.importance_sources]
        anames = [a.name for a in self.attacks]
        for label, lst in (("target", names), ("importance source", snames), ("attack", anames)):
            if len(set(lst)) != len(lst):
                raise ConfigError(f"duplicate {label} names")
        for m in self.targets + self.importance_sources:
            if m.kind not in MODEL_KINDS:
                raise ConfigError(f"model {m.name!r}: unknown kind {m.kind!r}")
            for key, low in (("n_estimators", 1), ("max_depth", 1)):
                if key in m.params and not int(m.params[key]) >= low:
                    raise ConfigError(f"model {m.name!r}: {key} must be >= {low}")
            if "learning_rate" in m.params and not float(m.params["learning_rate"]) > 0:
                raise ConfigError(f"model {m.name!r}: learning_rate must be > 0")
        for a in self.attacks:
            if a.type not in ATTACK_TYPES:
                raise ConfigError(f"attack {a.name!r}: unknown type {a.type!r}")
            if a.type == "transfer" and a.selector != "random" and a.selector not in snames:
                raise ConfigError(f"attack {a.name!r}: unknown importance source {a.selector!r}")
        for k in self.detector_kinds:
            if k not in ("if", "ae"):
                raise ConfigError(f"unknown detector kind {k!r}")
        for m in tuple(self.detector_modes) + tuple(self.shap_modes):
            if m not in ("csad", "standard"):
                raise ConfigError(f"unknown mode {m!r}")
        # fail early on bad attack parameters
        for a in self.attacks:
            try:
                _attack_config(a, None, None)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"attack {a.name!r}: {exc}") from None

    def validate(self, schema: Schema) -> None:
        """Checks against the dataset schema; run before any training."""
        names = schema.names
        for dep in self.dependents:
            if dep not in names:
                raise ConfigError(f"dependent feature {dep!r} is not in the schema")
            if not schema.features[names.index(dep)].dependent:
                raise ConfigError(f"feature {dep!r} is not flagged dependent in the schema")

    def to_dict(self) -> dict:
        return _clean(self.raw)


def _attack_config(a: AttackSpec, mean, std):
    p = dict(a.params)
    if a.type == "boundary":
        return BoundaryConfig(**p, init_mean=mean, init_std=std)
    if a.type == "hopskipjump":
        return HsjConfig(**p, init_mean=mean, init_std=std)
    return TransferConfig(**p)


# -- stage 1: preprocess ---------------------------------------------------

@dataclass
class Prepared:
    schema: Schema
    train: Dataset  # benign reference: every training row
    target_train: Dataset
    surrogate_train: Dataset
    test: Dataset
    dropped: list
    n_rows: int


def preprocess(cfg: ExperimentConfig) -> Prepared:
    schema = load_schema(cfg.schema_path)
    cfg.validate(schema)
    ds = load_csv(cfg.data_csv, schema)
    dropped = []
    if cfg.drop_correlated is not None:
        ds, dropped, _ = drop_correlated(ds, cfg.drop_correlated, derive_seed(cfg.seed, "drop_correlated"))
        lost = [d for d in cfg.dependents if d in dropped]
        if lost:
            raise DataError(f"dependent feature(s) {lost} removed by correlation dropping")
    train, test = train_test_split(ds, cfg.train_fraction, derive_seed(cfg.seed, "split"))
    if cfg.oversample:
        counts = train.class_counts()
        present = np.flatnonzero(counts)
        minority = int(present[np.argmin(counts[present])])
        train = oversample_minority(train, minority)
    tgt, sur = train_test_split(train, 1.0 - cfg.surrogate_fraction, derive_seed(cfg.seed, "surrogate_split"))
    return Prepared(ds.schema, train, tgt, sur, test, list(dropped), len(ds))


# -- stage 2: train ----------------------------------------------------------

@dataclass
class Models:
    targets: dict
    surrogate: object
    sources: dict
    registry: DependencyRegistry
    test_accuracy: dict = field(default_factory=dict)


def _fit_tree_model(spec: ModelSpec, data: Dataset, seed: int):
    params = dict(spec.params)
    params.pop("seed", None)
    try:
        if spec.kind == "gradient_boosting":
            return fit_gradient_boosting(data, seed=seed, **params)
        return fit_random_forest(data, seed=seed, **params)
    except TypeError as exc:
        raise ConfigError(f"model {spec.name!r}: {exc}") from None


def _surrogate_args(cfg: ExperimentConfig):
    s = dict(cfg.surrogate)
    arch = tuple((int(w), str(a)) for w, a in s.get("arch", ((256, "relu"), (16, "linear"))))
    tc = dict(s.get("train", {}))
    tc["seed"] = derive_seed(cfg.seed, "surrogate") % 2**32
    try:
        train_cfg = TrainConfig(**tc)
    except TypeError as exc:
        raise ConfigError(f"surrogate.train: {exc}") from None
    return arch, train_cfg, str(s.get("head_activation", "relu")), float(s.get("dropout", 0.1))


def train_models(cfg: ExperimentConfig, prep: Prepared) -> Models:
    targets = {m.name: _fit_tree_model(m, prep.target_train, derive_seed(cfg.seed, "target", m.name) % 2**32)
               for m in cfg.targets}
    arch, tc, head, drop = _surrogate_args(cfg)
    surrogate = train_surrogate(prep.surrogate_train, arch, tc, head, drop)
    sources = {m.name: _fit_tree_model(m, prep.surrogate_train, derive_seed(cfg.seed, "source", m.name) % 2**32)
               for m in cfg.importance_sources}
    dep_idx = [prep.schema.index(n) for n in cfg.dependents]
    dm = dict(cfg.dependency_model)
    registry = fit_dependency_models(prep.surrogate_train, dep_idx, int(dm.get("n_estimators", 200)),
                                     int(dm.get("max_depth", 6)), float(dm.get("learning_rate", 0.1)),
                                     seed=derive_seed(cfg.seed, "dependency") % 2**32, schema=prep.schema)
    acc = {name: float(np.mean(predict(m, prep.test.rows) == prep.test.labels)) for name, m in targets.items()}
    acc["surrogate"] = float(np.mean(predict(surrogate, prep.test.rows) == prep.test.labels))
    return Models(targets, surrogate, sources, registry, acc)


def save_models(models: Models, out: Path) -> None:
    d = out / "models"
    for sub in ("targets", "sources", "dependency"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    for name, m in models.targets.items():
        (d / "targets" / f"{name}.json").write_text(serialize.dumps(m))
    for name, m in models.sources.items():
        (d / "sources" / f"{name}.json").write_text(serialize.dumps(m))
    for j, m in models.registry.models.items():
        (d / "dependency" / f"{j}.json").write_text(serialize.dumps(m))
    (d / "surrogate.json").write_text(serialize.dumps(models.surrogate))
    meta = {"dependents": list(models.registry.dependents), "n_features": models.registry.n_features,
            "test_accuracy": models.test_accuracy}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True))


def load_models(cfg: ExperimentConfig, out: Path) -> Models:
    d = Path(out) / "models"
    if not (d / "meta.json").exists():
        raise FileNotFoundError(f"no saved models under {d}")
    meta = json.loads((d / "meta.json").read_text())
    targets = {m.name: serialize.loads((d / "targets" / f"{m.name}.json").read_text()) for m in cfg.targets}
    sources = {m.name: serialize.loads((d / "sources" / f"{m.name}.json").read_text())
               for m in cfg.importance_sources}
    regs = {int(j): serialize.loads((d / "dependency" / f"{j}.json").read_text()) for j in meta["dependents"]}
    registry = DependencyRegistry(regs, tuple(meta["dependents"]), meta["n_features"])
    surrogate = serialize.loads((d / "surrogate.json").read_text())
    return Models(targets, surrogate, sources, registry, meta.get("test_accuracy", {}))


# -- stage 3: attack ---------------------------------------------------------

def build_attack_set(test: Dataset, target, surrogate, per_class_count: int, seed):
    """Correctly classified, class-balanced subset of ``test``.

    Returns ``(subset, info)``; ``info`` holds the retention rate and any
    per-class shortfall (fewer eligible rows than ``per_class_count``).
    Raises ValueError naming the first class with no eligible row.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    ok = predict(target, test.rows) == test.labels
    if surrogate is not None:
        ok &= predict(surrogate, test.rows) == test.labels
    rng = np.random.default_rng(seed)
    picks, shortfall = [], {}
    for c in range(test.schema.n_classes):
        idx = np.flatnonzero(ok & (test.labels == c))
        if idx.size == 0:
            raise ValueError(f"class {c} has no correctly classified rows for the attack set")
        n = min(per_class_count, idx.size)
        if n < per_class_count:
            shortfall[c] = per_class_count - n
        picks.append(np.sort(rng.choice(idx, size=n, replace=False)))
    sel = np.sort(np.concatenate(picks))
    info = {"eligible": int(ok.sum()), "test_rows": len(test), "retention_rate": float(ok.mean()),
            "per_class_count": per_class_count, "size": int(sel.size),
            "shortfall": {str(k): v for k, v in shortfall.items()}, "indices": sel.tolist()}
    return test.take(sel), info


_CTX: dict = {}


def _init_worker(ctx):
    global _CTX
    _CTX = ctx


def _attack_task(task):
    attack_name, target_name, index, x, y, seed = task
    spec, acfg, sel = _CTX["attacks"][attack_name]
    target = _CTX["targets"][target_name]
    c, reg, sur = _CTX["constraints"], _CTX["registry"], _CTX["surrogate"]
    h = BlackBoxHandle(target)
    t0 = time.perf_counter()
    try:
        if spec.type == "boundary":
            o = boundary_attack(h, x, y, acfg, c, reg, rng=seed)
        elif spec.type == "hopskipjump":
            o = hopskipjump_attack(h, x, y, acfg, c, reg, rng=seed)
        else:
            o = transfer_attack(sur, h, x, y, acfg, sel, c, reg, rng=seed)
    except InitFailed:
        return LedgerRow(index, x, x.copy(), False, h.queries, None if spec.family == "query" else False,
                         time.perf_counter() - t0, y)
    return LedgerRow(index, x, o.x_adv, bool(o.success), int(o.queries),
                     o.surrogate_success, time.perf_counter() - t0, y, int(o.iterations),
                     int(o.surrogate_queries), [float(v) for v in o.l2_trace])


def attack_context(cfg: ExperimentConfig, prep: Prepared, models: Models) -> dict:
    c = ConstraintSet.from_schema(prep.schema)
    X = prep.surrogate_train.rows
    mean, std = X.mean(axis=0), X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    corr = correlation_matrix(X)
    attacks = {}
    for a in cfg.attacks:
        acfg = _attack_config(a, mean, std)
        sel = None
        if a.type == "transfer":
            if a.selector == "random":
                sel = FeatureSelector("random", corr, a.k, a.n_corr, name="random")
            else:
                sel = FeatureSelector.from_source(models.sources[a.selector], X, corr, a.k, a.n_corr,
                                                  name=a.selector)
        attacks[a.name] = (a, acfg, sel)
    return {"attacks": attacks, "targets": models.targets, "surrogate": models.surrogate,
            "constraints": c, "registry": models.registry}


def run_attacks(cfg: ExperimentConfig, prep: Prepared, models: Models, jobs=None):
    """Every attack against every target; returns (ledgers, attack_set_info)."""
    ctx = attack_context(cfg, prep, models)
    sets, tasks = {}, []
    for t in cfg.targets:
        aset, info = build_attack_set(prep.test, models.targets[t.name], models.surrogate,
                                      cfg.per_class_count, derive_seed(cfg.seed, "attack_set", t.name))
        sets[t.name] = info
        for a in cfg.attacks:
            for i, (x, y) in zip(info["indices"], zip(aset.rows, aset.labels)):
                tasks.append((a.name, t.name, int(i), np.array(x), int(y),
                              derive_seed(cfg.seed, "attack", a.name, t.name, int(i))))
    jobs = jobs or cfg.jobs
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(ctx,)) as ex:
            rows = list(ex.map(_attack_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        _init_worker(ctx)
        rows = [_attack_task(task) for task in tasks]
    ledgers = {}
    for a in cfg.attacks:
        for t in cfg.targets:
            ledgers[(a.name, t.name)] = RunLedger(a.name, a.family, [])
    for task, row in zip(tasks, rows):
        ledgers[(task[0], task[1])].rows.append(row)
    for led in ledgers.values():
        led.rows.sort(key=lambda r: r.index)
    return ledgers, sets


def _ledger_to_dict(led: RunLedger, target: str) -> dict:
    return {"attack": led.attack, "target": target, "kind": led.kind, "rows": [
        {"index": r.index, "y": r.y, "x": r.x.tolist(), "x_adv": np.asarray(r.x_adv).tolist(),
         "target_success": r.target_success, "surrogate_success": r.surrogate_success,
         "queries": r.queries, "surrogate_queries": r.surrogate_queries, "iterations": r.iterations,
         "l2_trace": list(r.l2_trace), "wall_time": r.wall_time} for r in led.rows]}


def _ledger_from_dict(d: dict) -> RunLedger:
    rows = [LedgerRow(r["index"], np.array(r["x"]), np.array(r["x_adv"]), r["target_success"],
                      r["queries"], r["surrogate_success"], r["wall_time"], r["y"], r["iterations"],
                      r["surrogate_queries"], r["l2_trace"]) for r in d["rows"]]
    return RunLedger(d["attack"], d["kind"], rows)


def save_ledgers(ledgers: dict, sets: dict, out: Path) -> None:
    d = Path(out) / "ledgers"
    d.mkdir(parents=True, exist_ok=True)
    for (a, t), led in ledgers.items():
        (d / f"{a}__{t}.json").write_text(json.dumps(_ledger_to_dict(led, t)))
    (d / "attack_sets.json").write_text(json.dumps(sets, sort_keys=True))


def load_ledgers(cfg: ExperimentConfig, out: Path):
    d = Path(out) / "ledgers"
    ledgers = {}
    for a in cfg.attacks:
        for t in cfg.targets:
            p = d / f"{a.name}__{t.name}.json"
            if not p.exists():
                raise FileNotFoundError(f"missing ledger {p}")
            ledgers[(a.name, t.name)] = _ledger_from_dict(json.loads(p.read_text()))
    sets = json.loads((d / "attack_sets.json").read_text())
    return ledgers, sets


# -- stage 4: evaluate -------------------------------------------------------

def fit_banks(cfg: ExperimentConfig, prep: Prepared) -> dict:
    """Detector banks on every benign training row; IF banks FPR-matched to the AE bank."""
    banks = {}
    bcfg = replace(cfg.bank, seed=derive_seed(cfg.seed, "detectors") % 2**32)
    for mode in cfg.detector_modes:
        ae = fit_bank(prep.train, "ae", mode, bcfg)
        if "ae" in cfg.detector_kinds:
            banks[("ae", mode)] = ae
        if "if" in cfg.detector_kinds:
            banks[("if", mode)] = fit_bank(prep.train, "if", mode, bcfg, match=ae)
    return banks


def _quartiles(v):
    if len(v) == 0:
        return None
    return [float(q) for q in np.percentile(np.asarray(v, dtype=np.float64), [25, 50, 75])]


def _effort(cfg: ExperimentConfig, family: str, led: RunLedger) -> dict:
    e = cfg.effort
    t, aq, b = float(e.get("t_query", 1e-3)), float(e.get("alpha_q", 1.0)), float(e.get("beta", 1.0))
    if family == "query":
        n = float(np.mean([r.queries for r in led.rows]))
        return {"model": "query", "n": n, "t": t, "alpha_q": aq, "beta": b,
                "time": time_query_attack(EffortModel(n, t, aq, b))}
    n = float(np.mean([r.surrogate_queries for r in led.rows]))
    ts = float(e.get("t_surrogate", 0.0))
    return {"model": "transfer", "n": n, "t": t, "alpha_q": aq, "beta": b, "t_surrogate": ts,
            "time": time_transfer_attack(EffortModel(n, t, aq, b, ts))}


def evaluate(cfg: ExperimentConfig, prep: Prepared, models: Models, ledgers: dict) -> list:
    c = ConstraintSet.from_schema(prep.schema)
    banks = fit_banks(cfg, prep)
    tables = {}
    for t in cfg.targets:
        e = models.targets[t.name]
        phi = shap_matrix(e, prep.train.rows)
        for mode in cfg.shap_modes:
            tables[(t.name, mode)] = build_range_table(e, prep.train, mode, attributions=phi,
                                                       n_classes=prep.schema.n_classes)
    spec = {a.name: a for a in cfg.attacks}
    cells = []
    for a in cfg.attacks:
        for t in cfg.targets:
            led = ledgers[(a.name, t.name)]
            e = models.targets[t.name]
            succ = led.successful()
            XA = np.array([r.x_adv for r in succ]).reshape(len(succ), prep.schema.n_features)
            pred = predict(e, XA) if len(succ) else np.zeros(0, dtype=np.int64)
            l0s = [l0(r.x, r.x_adv, c) for r in succ]
            l2s = [l2(r.x, r.x_adv) for r in succ]
            sr = success_rates(led)
            sr["n_attack"] = len(led)
            sr["n_success"] = len(succ)
            sr["n_surrogate_success"] = sum(1 for r in led.rows if r.surrogate_success)
            det = {}
            for (kind, mode), bank in sorted(banks.items()):
                flags = bank.flags(XA, pred) if len(succ) else np.zeros(0, dtype=bool)
                det.setdefault(kind, {})[mode] = {
                    "rate": float(flags.mean()) if len(succ) else None,
                    "flags": [bool(f) for f in flags]}
            imp = {}
            phi = shap_matrix(e, XA) if len(succ) else np.zeros((0, prep.schema.n_features))
            for mode in cfg.shap_modes:
                counts = anomalous_counts(tables[(t.name, mode)], phi, pred) if len(succ) else np.zeros(0)
                imp[mode] = {"rate": float(np.mean(counts > 0)) if len(succ) else None,
                             "avg_count": float(np.mean(counts)) if len(succ) else None,
                             "counts": [int(v) for v in counts]}
            q = query_stats(led)
            q["values"] = [int(r.queries) for r in led.rows]
            cells.append({
                "attack": a.name, "target": t.name, "type": spec[a.name].type, "family": led.kind,
                "selector": spec[a.name].selector if a.type == "transfer" else None,
                "success": sr,
                "samples": [int(r.index) for r in succ],
                "predicted_class": [int(p) for p in pred],
                "l0": {"quartiles": _quartiles(l0s), "values": [int(v) for v in l0s]},
                "l2": {"quartiles": _quartiles(l2s), "values": [float(v) for v in l2s]},
                "queries": q,
                "detection": det,
                "importance": imp,
                "effort": _effort(cfg, led.kind, led),
            })
    return cells


# -- stage 5: stats ----------------------------------------------------------

METRICS = {
    "overall_sr": "proportions_ztest",
    "l0": "mann_whitney_u",
    "l2": "mann_whitney_u",
    "if_rate": "proportions_ztest",
    "ae_rate": "proportions_ztest",
    "shap_rate": "proportions_ztest",
    "shap_count": "mann_whitney_u",
}


def _metric_data(cell: dict, metric: str):
    """(values or (k, n)) for one cell, or None when the cell has no data."""
    if metric == "overall_sr":
        s = cell["success"]
        return (s["n_success"], s["n_attack"]) if s["n_attack"] else None
    if metric in ("l0", "l2"):
        v = cell[metric]["values"]
        return v if v else None
    if metric in ("if_rate", "ae_rate"):
        det = cell["detection"].get(metric[:2])
        if not det:
            return None
        flags = det.get("csad", next(iter(det.values())))["flags"]
        return (sum(flags), len(flags)) if flags else None
    imp = cell["importance"]
    if not imp:
        return None
    counts = imp.get("csad", next(iter(imp.values())))["counts"]
    if not counts:
        return None
    if metric == "shap_rate":
        return (sum(1 for v in counts if v > 0), len(counts))
    return counts


def _compare(test, a, b):
    if test == "proportions_ztest":
        return st.proportions_ztest(a[0], a[1], b[0], b[1])
    return st.mann_whitney_u(a, b)


def _pairwise(cells_by_attack, pairs, metric):
    res, skipped = [], []
    for group, a, b in pairs:
        da = _metric_data(cells_by_attack[a], metric)
        db = _metric_data(cells_by_attack[b], metric)
        if da is None or db is None:
            skipped.append({"group": group, "a": a, "b": b, "skipped": "no data in one of the groups"})
            continue
        res.append(({"group": group, "a": a, "b": b}, _compare(METRICS[metric], da, db)))
    return res, skipped


def _adjusted(pairs) -> list:
    adj = st.adjust_family([r for _, r in pairs])
    return [{**meta, **r.to_dict()} for (meta, _), r in zip(pairs, adj)]


def _paired(cell, which):
    """Aligned csad/standard outcome arrays for one cell."""
    if which == "importance":
        imp = cell["importance"]
        if "csad" not in imp or "standard" not in imp:
            return None
        return np.array(imp["csad"]["counts"]), np.array(imp["standard"]["counts"])
    det = cell["detection"].get(which)
    if not det or "csad" not in det or "standard" not in det:
        return None
    return np.array(det["csad"]["flags"], dtype=bool), np.array(det["standard"]["flags"], dtype=bool)


def compute_stats(cells: list, doubled_g=False) -> dict:
    """Pairwise attack comparisons per (target, metric) plus paired CSAD vs standard tests.

    Each (target, metric) table is one Holm family. Transfer-attack
    heterogeneity is flagged when any Holm-adjusted pairwise comparison
    inside the transfer group is significant.
    """
    targets = sorted({c["target"] for c in cells})
    families = []
    for t in targets:
        by = {c["attack"]: c for c in cells if c["target"] == t}
        query = [a for a, c in by.items() if c["family"] == "query"]
        trans = [a for a, c in by.items() if c["family"] == "transfer"]
        pairs = [(f"{q} vs transfer", q, tr) for q in query for tr in trans]
        pairs += [("query vs query", q1, q2) for i, q1 in enumerate(query) for q2 in query[i + 1:]]
        het_pairs = [("transfer vs transfer", a, b) for i, a in enumerate(trans) for b in trans[i + 1:]]
        for metric in METRICS:
            res, skipped = _pairwise(by, pairs, metric)
            hres, hskipped = _pairwise(by, het_pairs, metric)
            het = _adjusted(hres)
            families.append({
                "target": t, "metric": metric, "test": METRICS[metric],
                "comparisons": _adjusted(res) + skipped,
                "heterogeneity": {"significant": any(r["significant"] for r in het) if het else None,
                                  "comparisons": het + hskipped},
            })
    paired = []
    for which in ("importance", "if", "ae"):
        for test in (("mcnemar_exact", "wilcoxon_signed_rank") if which == "importance" else ("mcnemar_exact",)):
            res, skipped = [], []
            for cell in cells:
                data = _paired(cell, which)
                meta = {"attack": cell["attack"], "target": cell["target"]}
                if data is None or data[0].size == 0:
                    skipped.append({**meta, "skipped": "no successful adversarials"})
                    continue
                a, b = data
                try:
                    if test == "mcnemar_exact":
                        fa, fb = (a > 0, b > 0) if which == "importance" else (a, b)
                        r = st.mcnemar_exact(int(np.sum(fa & ~fb)), int(np.sum(~fa & fb)), doubled=doubled_g)
                    else:
                        r = st.wilcoxon_signed_rank(a - b)
                except ValueError as exc:
                    skipped.append({**meta, "skipped": str(exc)})
                    continue
                res.append((meta, r))
            paired.append({"metric": f"{which}_{'rate' if test == 'mcnemar_exact' else 'count'}",
                           "test": test, "comparisons": _adjusted(res) + skipped})
    return {"present": True, "alpha": st.ALPHA, "families": families, "csad_vs_standard": paired}


# -- report --------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


@dataclass
class Report:
    body: dict
    timing: dict = field(default_factory=dict)

    @property
    def cells(self) -> list:
        return self.body.get("cells", [])

    def cell(self, attack, target) -> dict:
        for c in self.cells:
            if c["attack"] == attack and c["target"] == target:
                return c
        raise KeyError((attack, target))

    def to_json(self) -> str:
        return json.dumps(_clean(self.body), sort_keys=True, indent=1)


def environment_stamp(cfg: ExperimentConfig) -> dict:
    stages = {s: derive_seed(cfg.seed, s) for s in ("split", "surrogate_split", "drop_correlated",
                                                  "surrogate", "dependency", "detectors")}
    return {"master_seed": cfg.seed, "stage_seeds": stages,
            "versions": {"tabadv": tabadv.__version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "kernel_backend": kernels.BACKEND}


def make_report(cfg, prep, models, sets, cells, stats_block) -> Report:
    body = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "environment": environment_stamp(cfg),
        "data": {"n_rows": prep.n_rows, "n_train": len(prep.train), "n_target_train": len(prep.target_train),
                 "n_surrogate_train": len(prep.surrogate_train), "n_test": len(prep.test),
                 "dropped_features": prep.dropped, "features": prep.schema.names},
        "models": {"test_accuracy": models.test_accuracy},
        "attack_sets": {k: {kk: vv for kk, vv in v.items() if kk != "indices"} for k, v in sets.items()},
        "cells": cells,
        "stats": stats_block if stats_block is not None else {"present": False},
    }
    return Report(_clean(body))


REQUIRED_CELL_KEYS = ("attack", "target", "success", "l0", "l2", "queries", "detection", "importance", "effort")


def check_report(d: dict, cfg: ExperimentConfig | None = None) -> None:
    """Raise ValueError unless ``d`` is a well-formed report document."""
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError("unsupported or missing schema_version")
    for key in ("config", "environment", "cells", "stats", "attack_sets", "data", "models"):
        if key not in d:
            raise ValueError(f"report is missing {key!r}")
    seen = set()
    for c in d["cells"]:
        missing = [k for k in REQUIRED_CELL_KEYS if k not in c]
        if missing:
            raise ValueError(f"cell {c.get('attack')}/{c.get('target')} is missing {missing}")
        key = (c["attack"], c["target"])
        if key in seen:
            raise ValueError(f"duplicate cell {key}")
        seen.add(key)
        if c["family"] == "transfer" and any(q not in (0, 1) for q in c["queries"]["values"]):
            raise ValueError(f"transfer cell {key} spent more than one target query on a sample")
    if cfg is not None:
        want = {(a.name, t.name) for a in cfg.attacks for t in cfg.targets}
        if want != seen:
            raise ValueError("report cells do not match the configured attack/model pairs")


def emit_report(r: Report, out) -> list:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "timing.json"]
    paths[0].write_text(r.to_json() + "\n", encoding="utf-8")
    paths[1].write_text(json.dumps(_clean(r.timing), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return paths


def load_report(path) -> Report:
    return Report(json.loads(Path(path).read_text(encoding="utf-8")))


def emit_plot_data(r: Report, out) -> list:
    """Tidy CSVs: one row per successful adversarial per metric."""
    d = Path(out) / "plots"
    d.mkdir(parents=True, exist_ok=True)
    pert, det, imp = d / "perturbation.csv", d / "detection.csv", d / "importance.csv"
    with pert.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "target", "sample", "metric", "value"])
        for c in r.cells:
            for metric in ("l0", "l2"):
                for s, v in zip(c["samples"], c[metric]["values"]):
                    w.writerow([c["attack"], c["target"], s, metric, repr(v)])
    with det.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "target", "sample", "detector", "mode", "flag"])
        for c in r.cells:
            for kind, modes in sorted(c["detection"].items()):
                for mode, block in sorted(modes.items()):
                    for s, f in zip(c["samples"], block["flags"]):
                        w.writerow([c["attack"], c["target"], s, kind, mode, int(f)])
    with imp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "target", "sample", "mode", "anomalous_count", "flag"])
        for c in r.cells:
            for mode, block in sorted(c["importance"].items()):
                for s, n in zip(c["samples"], block["counts"]):
                    w.writerow([c["attack"], c["target"], s, mode, n, int(n > 0)])
    return [pert, det, imp]


def export_explanations(e, samples, X, path) -> None:
    """Columnar SHAP export: sample id, feature index, attribution."""
    phi = shap_matrix(e, X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "feature", "attribution"])
        for s, row in zip(samples, phi):
            for j, v in enumerate(row):
                w.writerow([s, j, repr(float(v))])


# -- driver ---------------------------------------------------------------------

def _write_error(out, stage, exc):
    if out is None:
        return
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.json").write_text(json.dumps({"stage": stage, "error": f"{type(exc).__name__}: {exc}"}))


def run_experiment(cfg: ExperimentConfig, out=None, until: str | None = None, jobs=None) -> Report | None:
    """Full pipeline. Stops after stage ``until`` when given (no report is built then).

    Any failure is re-raised as StageError tagged with the failing stage,
    after ``error.json`` is written next to the artifacts already flushed.
    """
    if until is not None and until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}; expected one of {STAGES}")
    out = Path(out) if out is not None else cfg.output
    timing = {"stages": {}}
    stage = "preprocess"

    def clock(name, fn, *args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        timing["stages"][name] = time.perf_counter() - t0
        return res

    try:
        prep = clock(stage, preprocess, cfg)
        if until == stage:
            return None
        stage = "train"
        models = clock(stage, train_models, cfg, prep)
        if out is not None:
            save_models(models, out)
        if until == stage:
            return None
        stage = "attack"
        ledgers, sets = clock(stage, run_attacks, cfg, prep, models, jobs)
        if out is not None:
            save_ledgers(ledgers, sets, out)
        if until == stage:
            return None
        stage = "evaluate"
        cells = clock(stage, evaluate, cfg, prep, models, ledgers)
        stage = "stats"
        sblock = clock(stage, compute_stats, cells) if cfg.stats and until != "evaluate" else None
        report = make_report(cfg, prep, models, sets, cells, sblock)
        report.timing = _timing(timing, ledgers, cfg)
        if out is not None:
            emit_report(report, out)
            emit_plot_data(report, out)
        return report
    except Exception as exc:
        _write_error(out, stage, exc)
        raise StageError(stage, exc) from exc


def _timing(timing: dict, ledgers: dict, cfg: ExperimentConfig) -> dict:
    cells = {}
    for (a, t), led in ledgers.items():
        wall = float(sum(r.wall_time for r in led.rows))
        q = int(sum(r.queries for r in led.rows))
        cells[f"{a}/{t}"] = {"wall_time": wall, "queries": q,
                             "time_per_query": wall / q if q else None}
    timing["cells"] = cells
    timing["created"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    timing["jobs"] = cfg.jobs
    return timing


def evaluate_saved(cfg: ExperimentConfig, out) -> Report:
    """Metrics (and stats, when enabled) from saved models and ledgers."""
    prep = preprocess(cfg)
    models = load_models(cfg, out)
    ledgers, sets = load_ledgers(cfg, out)
    cells = evaluate(cfg, prep, models, ledgers)
    report = make_report(cfg, prep, models, sets, cells, compute_stats(cells) if cfg.stats else None)
    report.timing = _timing({"stages": {}}, ledgers, cfg)
    emit_report(report, out)
    emit_plot_data(report, out)
    return report


def attack_saved(cfg: ExperimentConfig, out, jobs=None):
    prep = preprocess(cfg)
    models = load_models(cfg, out)
    ledgers, sets = run_attacks(cfg, prep, models, jobs)
    save_ledgers(ledgers, sets, out)
    return ledgers, sets


def restat_report(path) -> Report:
    """Recompute the stats block of a saved report from its per-sample values."""
    r = load_report(path)
    check_report(r.body)
    r.body["stats"] = _clean(compute_stats(r.cells))
    Path(path).write_text(r.to_json() + "\n", encoding="utf-8")
    return r
