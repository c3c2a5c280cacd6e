"""Run configuration and the train / predict / evaluate steps shared by the CLI."""

from __future__ import annotations

import copy
import hashlib
import json
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import __version__
from .annotate import bundled_lexicon, bundled_persistency, load_annotations, load_lexicon, load_persistency
from .cohort import Episode, GeneratorConfig, read_episodes, train_test_split, kfold_split
from .evaluation import (auc_pr, auc_roc, brier, calibration_curve, kappa, mad, sliced_eval, with_ci)
from .features import (FeatureConfig, FeatureMatrix, annotations_from_lexicon, annotations_from_notes, assemble,
                       group_annotations)
from .models.container import loads_container
from .models.forest import Forest, ForestConfig, train_forest
from .models.lstm import LstmConfig, LstmModel, fit_standardizer, train_lstm
from .ontology import bundled_ontology, load_obo
from .tasks import MORTALITY_HOUR, N_LOS_CLASSES, Task, TaskLabels, build_labels, remaining_hours


class ConfigError(ValueError):
    def __init__(self, msg: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {msg}")


DEFAULTS: dict[str, Any] = {
    "task": "mortality",
    "features": "S+annotations",
    "annotation_source": "notes",
    "propagation": True,
    "aggregation_levels": 1,
    "aggregation_replace": False,
    "one_hot": False,
    "model": "rf",
    "seed": 0,
    "obs_start": 4,
    "require_notes": True,
    "split": {"train_fraction": 0.85, "seed": 0, "cv_folds": 0},
    "rf": {"n_estimators": 300, "criterion": "gini", "max_depth": None, "min_samples_split": 2,
           "min_samples_leaf": 1, "max_features": "sqrt", "max_train_rows": 50000},
    "lstm": {"hidden_size": 128, "epochs": 30, "batch_size": 8, "learning_rate": 1e-4, "weight_decay": 0.0,
             "patience": 10, "balance_classes": False},
    "eval": {"n_resamples": None, "level": 0.95, "calibration_bins": 10},
    "explain": {"max_rows": 200, "episodes": [], "top_features": 20, "output": None, "background_size": 100},
    "significance": {"runs": [{"name": "S", "features": "S"},
                              {"name": "S+Ours", "features": "S+annotations"}],
                     "n_resamples": None},
    "ablation": {"tasks": ["mortality", "decompensation", "los"]},
    "paths": {"cohort": "cohort.jsonl", "ontology": None, "persistency": None, "lexicon": None,
              "annotations": None},
    "generator": {},
    "output_dir": "out",
}

_NULLABLE_STR = {"type": ["string", "null"]}
SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "task": {"enum": [t.value for t in Task]},
        "features": {"enum": ["S", "S+annotations"]},
        "annotation_source": {"enum": ["notes", "lexicon", "file"]},
        "propagation": {"type": "boolean"},
        "aggregation_levels": {"type": "integer", "minimum": 0, "maximum": 10},
        "aggregation_replace": {"type": "boolean"},
        "one_hot": {"type": "boolean"},
        "model": {"enum": ["rf", "lstm"]},
        "seed": {"type": "integer", "minimum": 0},
        "obs_start": {"type": "integer", "minimum": 0},
        "require_notes": {"type": "boolean"},
        "split": {"type": "object", "additionalProperties": False, "properties": {
            "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "seed": {"type": "integer", "minimum": 0},
            "cv_folds": {"type": "integer", "minimum": 0}}},
        "rf": {"type": "object", "additionalProperties": False, "properties": {
            "n_estimators": {"type": "integer", "minimum": 1},
            "criterion": {"const": "gini"},
            "max_depth": {"type": ["integer", "null"], "minimum": 1},
            "min_samples_split": {"type": "integer", "minimum": 2},
            "min_samples_leaf": {"type": "integer", "minimum": 1},
            "max_features": {"type": ["string", "integer", "null"]},
            "max_train_rows": {"type": ["integer", "null"], "minimum": 1}}},
        "lstm": {"type": "object", "additionalProperties": False, "properties": {
            "hidden_size": {"type": "integer", "minimum": 1},
            "epochs": {"type": "integer", "minimum": 0},
            "batch_size": {"type": "integer", "minimum": 1},
            "learning_rate": {"type": "number", "minimum": 0},
            "weight_decay": {"type": "number", "minimum": 0},
            "patience": {"type": "integer", "minimum": 1},
            "balance_classes": {"type": "boolean"}}},
        "eval": {"type": "object", "additionalProperties": False, "properties": {
            "n_resamples": {"type": ["integer", "null"], "minimum": 100},
            "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "calibration_bins": {"type": "integer", "minimum": 1}}},
        "explain": {"type": "object", "additionalProperties": False, "properties": {
            "max_rows": {"type": "integer", "minimum": 1},
            "episodes": {"type": "array", "items": {"type": "string"}},
            "top_features": {"type": "integer", "minimum": 1},
            "output": {"type": ["integer", "array", "null"], "items": {"type": "integer"}},
            "background_size": {"type": "integer", "minimum": 0}}},
        "significance": {"type": "object", "additionalProperties": False, "properties": {
            "runs": {"type": "array", "minItems": 2, "items": {
                "type": "object", "required": ["name"], "properties": {"name": {"type": "string"}}}},
            "n_resamples": {"type": ["integer", "null"], "minimum": 100}}},
        "ablation": {"type": "object", "additionalProperties": False, "properties": {
            "tasks": {"type": "array", "items": {"enum": [t.value for t in Task]}, "minItems": 1}}},
        "paths": {"type": "object", "additionalProperties": False, "properties": {
            "cohort": {"type": "string"}, "ontology": _NULLABLE_STR, "persistency": _NULLABLE_STR,
            "lexicon": _NULLABLE_STR, "annotations": _NULLABLE_STR}},
        "generator": {"type": "object"},
        "output_dir": {"type": "string"},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "generator":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _pointer(path) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path) if path else ""


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.data[key]

    @property
    def task(self) -> Task:
        return Task(self.data["task"])

    def path(self, key: str) -> Path | None:
        value = self.data["paths"].get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        p = Path(self.data["output_dir"])
        return p if p.is_absolute() else self.base_dir / p

    def with_overrides(self, **over) -> "RunConfig":
        return RunConfig(_merge(self.data, over), self.base_dir)

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def feature_config(self) -> FeatureConfig:
        d = self.data
        return FeatureConfig(phenotypes=d["features"] != "S", propagation=d["propagation"],
                             aggregation_levels=d["aggregation_levels"],
                             aggregation_replace=d["aggregation_replace"], one_hot=d["one_hot"])

    def generator_config(self) -> GeneratorConfig:
        try:
            d = dict(self.data["generator"])
            d.setdefault("seed", self.data["seed"])
            gen = GeneratorConfig.from_dict(d)
            gen.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "/generator") from None
        return gen


def validate_config(data: dict) -> None:
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _pointer(err.absolute_path))
    if data.get("annotation_source") == "file" and not (data.get("paths") or {}).get("annotations"):
        raise ConfigError("annotation_source 'file' needs paths.annotations", "/paths/annotations")
    for k, run in enumerate((data.get("significance") or {}).get("runs", [])):
        extra = {key: val for key, val in run.items() if key != "name"}
        try:
            validate_config(_merge({k2: v for k2, v in data.items() if k2 != "significance"}, extra))
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"/significance/runs/{k}" + exc.pointer) from None


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file, then ``overrides`` (command-line flags)."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        base = path.resolve().parent
    validate_config(raw)
    data = _merge(DEFAULTS, raw)
    if overrides:
        data = _merge(data, overrides)
    validate_config(data)
    return RunConfig(data, base)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def manifest(command: str, cfg: RunConfig, inputs: list[Path], outputs: list[Path]) -> dict:
    """Everything needed to rerun a command; contains no timestamps."""
    return {
        "command": command,
        "config_sha256": cfg.digest(),
        "config": cfg.data,
        "seed": cfg["seed"],
        "inputs": {p.name: sha256_file(p) for p in sorted(set(inputs)) if p.exists()},
        "outputs": {p.name: sha256_file(p) for p in sorted(set(outputs)) if p.exists()},
        "versions": {"phenoicu": __version__, "numpy": np.__version__,
                     "python": ".".join(platform.python_version_tuple()[:2])},
    }


# ---------------------------------------------------------------------------
# inputs and features


@dataclass
class Inputs:
    episodes: list[Episode]
    ontology: Any
    persistency: Any
    lexicon: Any
    files: list[Path]


def load_inputs(cfg: RunConfig, episodes: list[Episode] | None = None) -> Inputs:
    files = []
    if episodes is None:
        cohort = cfg.path("cohort")
        if cohort is None or not cohort.exists():
            raise FileNotFoundError(f"cohort file {cohort} not found")
        episodes = read_episodes(cohort, require_notes=cfg["require_notes"])
        files.append(cohort)
    onto_path = cfg.path("ontology")
    ontology = load_obo(onto_path) if onto_path else bundled_ontology()
    pm_path = cfg.path("persistency")
    persistency = load_persistency(pm_path) if pm_path else bundled_persistency()
    lex_path = cfg.path("lexicon")
    lexicon = load_lexicon(lex_path) if lex_path else bundled_lexicon()
    files += [p for p in (onto_path, pm_path, lex_path) if p]
    return Inputs(episodes, ontology, persistency, lexicon, files)


def resolve_annotations(cfg: RunConfig, inp: Inputs) -> dict | None:
    if cfg["features"] == "S":
        return None
    source = cfg["annotation_source"]
    if source == "notes":
        return annotations_from_notes(inp.episodes)
    if source == "lexicon":
        return annotations_from_lexicon(inp.episodes, inp.lexicon)
    path = cfg.path("annotations")
    if path is None or not path.exists():
        raise FileNotFoundError(f"annotation file {path} not found")
    inp.files.append(path)
    with open(path, encoding="utf-8") as fh:
        return group_annotations(load_annotations(fh), inp.episodes)


def build_features(cfg: RunConfig, inp: Inputs) -> FeatureMatrix:
    return assemble(inp.episodes, inp.ontology, resolve_annotations(cfg, inp), inp.persistency,
                    cfg.feature_config())


@dataclass
class TaskData:
    task: Task
    episodes: list[Episode]
    labels: TaskLabels
    X: np.ndarray
    y: np.ndarray
    episode_ids: np.ndarray


def task_data(cfg: RunConfig, fm: FeatureMatrix, episodes: list[Episode]) -> TaskData:
    labels = build_labels(cfg.task, episodes, cfg["obs_start"])
    X, y = fm.task_arrays(labels)
    ids = np.array([r[0] for r in labels.rows], dtype=object)
    return TaskData(cfg.task, episodes, labels, X, y, ids)


def split_episodes(cfg: RunConfig, episodes: list[Episode]) -> tuple[list[Episode], list[Episode]]:
    s = cfg["split"]
    return train_test_split(episodes, s["train_fraction"], s["seed"])


def n_classes(task: Task) -> int:
    return N_LOS_CLASSES if task is Task.LOS else 2


# ---------------------------------------------------------------------------
# models


def forest_config(cfg: RunConfig) -> ForestConfig:
    rf = cfg["rf"]
    return ForestConfig(n_estimators=rf["n_estimators"], criterion=rf["criterion"], max_depth=rf["max_depth"],
                        min_samples_split=rf["min_samples_split"], min_samples_leaf=rf["min_samples_leaf"],
                        max_features=rf["max_features"], seed=cfg["seed"])


def lstm_config(cfg: RunConfig) -> LstmConfig:
    d = cfg["lstm"]
    return LstmConfig(hidden_size=d["hidden_size"], epochs=d["epochs"], batch_size=d["batch_size"],
                      learning_rate=d["learning_rate"], weight_decay=d["weight_decay"], patience=d["patience"],
                      seed=cfg["seed"], balance_classes=d["balance_classes"])


def _sequences(cfg: RunConfig, fm: FeatureMatrix, episodes: list[Episode], labels: TaskLabels):
    """Per-episode feature sequences with label and loss-mask vectors."""
    by_ep: dict[str, list[tuple[int, int]]] = {}
    for eid, h, y in labels.rows:
        by_ep.setdefault(eid, []).append((h, y))
    seqs, labs, masks, keys = [], [], [], []
    for e in episodes:
        rows = by_ep.get(e.episode_id)
        if not rows:
            continue
        X = fm.episode(e.episode_id)
        if cfg.task is Task.MORTALITY:
            X = X[:MORTALITY_HOUR]
            lab = np.zeros(len(X), dtype=np.int64)
            mask = np.zeros(len(X))
            lab[-1] = rows[0][1]
            mask[-1] = 1.0
            positions = [len(X) - 1]
        else:
            lab = np.zeros(len(X), dtype=np.int64)
            mask = np.zeros(len(X))
            positions = []
            for h, y in rows:
                lab[h] = y
                mask[h] = 1.0
                positions.append(h)
        seqs.append(X)
        labs.append(lab)
        masks.append(mask)
        keys.append((e.episode_id, positions))
    return seqs, labs, masks, keys


def fit(cfg: RunConfig, fm: FeatureMatrix, train: list[Episode]):
    data = task_data(cfg, fm, train)
    K = n_classes(cfg.task)
    if cfg["model"] == "rf":
        X, y = data.X, data.y
        cap = cfg["rf"]["max_train_rows"]
        if cap is not None and len(X) > cap:
            sel = np.sort(np.random.default_rng(cfg["seed"]).choice(len(X), cap, replace=False))
            X, y = X[sel], y[sel]
        return train_forest(X, y, forest_config(cfg), K, fm.schema.version)
    seqs, labs, masks, _ = _sequences(cfg, fm, train, data.labels)
    mean, std = fit_standardizer(seqs)
    lcfg = lstm_config(cfg)
    params = train_lstm([(s - mean) / std for s in seqs], labs, masks, K, lcfg)
    return LstmModel(params, K, mean, std, lcfg, cfg.task is Task.MORTALITY, fm.schema.version)


def predict(cfg: RunConfig, model, fm: FeatureMatrix, episodes: list[Episode]) -> tuple[TaskData, np.ndarray]:
    """Class probabilities for every label row of ``episodes``."""
    data = task_data(cfg, fm, episodes)
    if isinstance(model, Forest):
        return data, model.predict_proba(data.X)
    seqs, _, _, keys = _sequences(cfg, fm, episodes, data.labels)
    probs = model.predict_proba_sequences(seqs)
    lookup = {}
    for (eid, positions), p in zip(keys, probs):
        for pos in positions:
            lookup[(eid, pos)] = p[pos]
    K = n_classes(cfg.task)
    out = np.empty((len(data.labels.rows), K))
    for k, (eid, h, _) in enumerate(data.labels.rows):
        pos = MORTALITY_HOUR - 1 if cfg.task is Task.MORTALITY else h
        out[k] = lookup[(eid, pos)]
    return data, out


def load_model(path: Path):
    data = path.read_bytes()
    header, _ = loads_container(data)
    if header.get("model") == "lstm":
        return LstmModel.from_bytes(data)
    return Forest.from_bytes(data)


# ---------------------------------------------------------------------------
# evaluation


def default_resamples(cfg: RunConfig, section: str = "eval") -> int:
    n = cfg[section]["n_resamples"]
    if n is not None:
        return n
    return 10000 if cfg.task is Task.MORTALITY else 1000


def primary_metric(task: Task):
    if task is Task.LOS:
        def kappa_of_probs(probs, y):
            return kappa(np.asarray(probs).argmax(axis=1), y, n_classes=N_LOS_CLASSES)
        return kappa_of_probs, "Kappa"

    def auc_of_probs(probs, y):
        return auc_roc(np.asarray(probs)[:, 1], y)
    return auc_of_probs, "AUC-ROC"


def evaluate(cfg: RunConfig, data: TaskData, probs: np.ndarray) -> dict:
    """Metrics with bootstrap CIs, calibration and sliced results for one task."""
    n_res = default_resamples(cfg)
    seed = cfg["seed"]
    level = cfg["eval"]["level"]
    y = data.y
    report: dict[str, Any] = {"task": cfg.task.value, "n_samples": int(len(y)),
                              "n_episodes": int(len(set(data.episode_ids))), "metrics": {}}
    if cfg.task is Task.LOS:
        pred = probs.argmax(axis=1)
        rem = np.asarray(remaining_hours(data.episodes, data.labels), dtype=float)
        metrics = {
            "Kappa": with_ci(lambda p, t: kappa(p, t, n_classes=N_LOS_CLASSES), (pred, y), n_res, seed, level),
            "MAD": with_ci(mad, (pred, rem), n_res, seed, level),
        }
        slice_metrics = {"Kappa": lambda p, t: kappa(p, t, n_classes=N_LOS_CLASSES)}
        slice_pred = pred
    else:
        p1 = probs[:, 1]
        metrics = {
            "AUC-ROC": with_ci(auc_roc, (p1, y), n_res, seed, level),
            "AUC-PR": with_ci(auc_pr, (p1, y), n_res, seed, level),
            "Brier": with_ci(brier, (p1, y), n_res, seed, level),
        }
        report["calibration"] = [
            {"mean_predicted": m, "observed": o, "count": c}
            for m, o, c in calibration_curve(p1, y, cfg["eval"]["calibration_bins"])]
        slice_metrics = {"AUC-ROC": auc_roc, "AUC-PR": auc_pr}
        slice_pred = p1
    report["metrics"] = {k: v.to_dict() for k, v in metrics.items()}
    report["slices"] = {}
    for slicer in ("cohort_tag", "los_bucket"):
        res = sliced_eval(data.episode_ids, y, slice_pred, data.episodes, slicer, slice_metrics)
        report["slices"][slicer] = {k: {"n_samples": r.n_samples, "n_episodes": r.n_episodes, "metrics": r.metrics}
                                    for k, r in res.items()}
    return report


def cross_validate(cfg: RunConfig, fm: FeatureMatrix, train: list[Episode]) -> dict:
    k = cfg["split"]["cv_folds"]
    folds = kfold_split(train, k, cfg["split"]["seed"])
    metric, name = primary_metric(cfg.task)
    out = []
    for i in range(k):
        fold_train = [e for j, f in enumerate(folds) if j != i for e in f]
        model = fit(cfg, fm, fold_train)
        data, probs = predict(cfg, model, fm, folds[i])
        try:
            value = float(metric(probs, data.y))
        except ValueError:
            value = None
        out.append({"fold": i + 1, "n_patients": len({e.patient_id for e in folds[i]}),
                    "n_samples": int(len(data.y)), name: value})
    values = [f[name] for f in out if f[name] is not None]
    return {"metric": name, "folds": out, "mean": float(np.mean(values)) if values else None}
