"""Command-line driver: ``phenoicu <command> --config cfg.json [--seed N] [--out DIR]``.

Precedence of settings: built-in defaults < config file < command-line flags.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from . import plotting
from .annotate import AnnotationError, dump_annotations
from .cohort import CohortError, generate, save_episodes
from .evaluation import MetricError, significance_matrix
from .explain import ExplainError, importance_report, patient_timeline
from .features import FeatureError, export_matrix
from .models.container import ContainerError
from .models.forest import Forest, ModelError
from .models.lstm import NumericError
from .ontology import OntologyError
from .tasks import MORTALITY_HOUR, Task

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("generate", "ingest", "train", "eval", "explain", "significance", "ablation")


class _Run:
    """Collects written files so the manifest can hash them."""

    def __init__(self, command: str, cfg: pl.RunConfig, config_path: Path | None):
        self.command = command
        self.cfg = cfg
        self.inputs = [config_path] if config_path else []
        self.outputs: list[Path] = []
        self.out = cfg.output_dir
        self.out.mkdir(parents=True, exist_ok=True)

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text, encoding="utf-8", newline="\n")
        self.outputs.append(path)
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")

    def add(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def finish(self) -> None:
        m = pl.manifest(self.command, self.cfg, self.inputs, self.outputs)
        path = self.out / f"manifest_{self.command}.json"
        path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _model_name(cfg: pl.RunConfig) -> str:
    return f"model_{cfg['task']}_{cfg['model']}.bin"


def _prepare(run: _Run):
    inp = pl.load_inputs(run.cfg)
    run.inputs += inp.files
    fm = pl.build_features(run.cfg, inp)
    return inp, fm


def cmd_generate(run: _Run) -> None:
    gen = run.cfg.generator_config()
    episodes = generate(gen)
    path = run.cfg.path("cohort")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_episodes(episodes, path)
    run.add(path)
    n_pat = len({e.patient_id for e in episodes})
    died = sum(e.died_in_hospital for e in episodes)
    run.write_json("generate_summary.json", {
        "n_patients": n_pat, "n_episodes": len(episodes), "n_in_hospital_deaths": int(died),
        "n_hours": int(sum(e.length_hours for e in episodes)), "generator": gen.to_dict()})


def cmd_ingest(run: _Run) -> None:
    inp, fm = _prepare(run)
    matrix = run.add(run.out / "features.bin")
    export_matrix(fm, matrix)
    run.add(matrix.with_suffix(".schema.json"))
    for task in Task:
        labels = pl.build_labels(task, inp.episodes, run.cfg["obs_start"])
        run.write_text(f"labels_{task.value}.csv", labels.to_csv())
    anns = pl.resolve_annotations(run.cfg, inp)
    if anns is not None:
        run.write_text("annotations.jsonl", dump_annotations(a for eid in sorted(anns) for a in anns[eid]))


def cmd_train(run: _Run) -> None:
    cfg = run.cfg
    inp, fm = _prepare(run)
    train, test = pl.split_episodes(cfg, inp.episodes)
    if cfg["split"]["cv_folds"] > 1:
        run.write_json(f"cv_{cfg['task']}.json", pl.cross_validate(cfg, fm, train))
    model = pl.fit(cfg, fm, train)
    run.add(run.out / _model_name(cfg)).write_bytes(model.to_bytes())
    run.write_text("split.csv", _csv(["episode_id", "part"],
                                     [(e.episode_id, "train") for e in train] + [(e.episode_id, "test") for e in test]))
    if not isinstance(model, Forest):
        run.write_text(f"loss_{cfg['task']}.csv", _csv(["epoch", "loss"],
                                                         [(i + 1, repr(v)) for i, v in enumerate(model.params.loss_curve)]))


def _trained_model(run: _Run, fm):
    path = run.out / _model_name(run.cfg)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'train' first")
    run.inputs.append(path)
    model = pl.load_model(path)
    if model.schema_version != fm.schema.version:
        raise FeatureError("model was trained on a different feature schema")
    return model


def _prediction_rows(data: pl.TaskData, probs: np.ndarray):
    for (eid, h, y), p in zip(data.labels.rows, probs):
        yield [eid, h, y, *(repr(float(v)) for v in p)]


def cmd_eval(run: _Run) -> None:
    cfg = run.cfg
    inp, fm = _prepare(run)
    model = _trained_model(run, fm)
    _, test = pl.split_episodes(cfg, inp.episodes)
    data, probs = pl.predict(cfg, model, fm, test)
    report = pl.evaluate(cfg, data, probs)
    report.update(model=cfg["model"], features=cfg["features"], propagation=cfg["propagation"])
    task = cfg["task"]
    run.write_json(f"report_{task}.json", report)
    run.write_text(f"predictions_{task}.csv", _csv(["episode_id", "hour", "label"] +
                                                   [f"p{k}" for k in range(probs.shape[1])],
                                                   _prediction_rows(data, probs)))
    if "calibration" in report:
        cal = report["calibration"]
        run.write_text(f"calibration_{task}.csv", _csv(["mean_predicted", "observed", "count"],
                                                       [(repr(c["mean_predicted"]), repr(c["observed"]), c["count"])
                                                        for c in cal]))
        path = run.out / f"calibration_{task}.svg"
        plotting.calibration_plot([(c["mean_predicted"], c["observed"], c["count"]) for c in cal], path,
                                  f"{task} (Brier {report['metrics']['Brier']['value']:.4f})")
        run.add(path)
    rows = []
    for slicer, slices in report["slices"].items():
        for name, s in slices.items():
            for metric, value in s["metrics"].items():
                rows.append([slicer, name, s["n_samples"], s["n_episodes"], metric,
                             "" if value is None else repr(value)])
    run.write_text(f"slices_{task}.csv", _csv(["slicer", "slice", "n_samples", "n_episodes", "metric", "value"],
                                              rows))
    by_tag = report["slices"]["cohort_tag"]
    if by_tag:
        metric = next(iter(next(iter(by_tag.values()))["metrics"]))
        path = run.out / f"slices_{task}.svg"
        plotting.bar_table(list(by_tag), {metric: [s["metrics"][metric] for s in by_tag.values()]}, path, metric)
        run.add(path)


def _default_output(cfg: pl.RunConfig):
    out = cfg["explain"]["output"]
    if out is None and cfg.task is Task.LOS:
        return 9
    return out


def _timeline_rows(cfg: pl.RunConfig, fm, episode) -> tuple[np.ndarray, np.ndarray]:
    X = fm.episode(episode.episode_id)
    if cfg.task is Task.MORTALITY:
        X = X[:MORTALITY_HOUR]
    return X, np.arange(len(X))


def cmd_explain(run: _Run) -> None:
    cfg = run.cfg
    if cfg["model"] != "rf":
        raise ExplainError("explanations are only available for the random forest")
    inp, fm = _prepare(run)
    model = _trained_model(run, fm)
    train, test = pl.split_episodes(cfg, inp.episodes)
    ex = cfg["explain"]
    output = _default_output(cfg)
    rng = np.random.default_rng(cfg["seed"])
    data = pl.task_data(cfg, fm, test)
    X = data.X
    if len(X) > ex["max_rows"]:
        X = X[np.sort(rng.choice(len(X), ex["max_rows"], replace=False))]
    background = None
    if ex["background_size"] > 0:
        tr = pl.task_data(cfg, fm, train).X
        background = tr[np.sort(rng.choice(len(tr), min(len(tr), ex["background_size"]), replace=False))]
    names = list(fm.schema.names)
    rep = importance_report(model, X, names, output, background)
    task = cfg["task"]
    run.write_text(f"importance_{task}.csv", rep.to_csv())
    run.write_text(f"beeswarm_{task}.csv", rep.beeswarm_csv())
    top = ex["top_features"]
    order = [names.index(n) for n in rep.ranking]
    path = run.out / f"importance_{task}.svg"
    plotting.importance_bar(rep.ranking, rep.mean_abs[order], path, top)
    run.add(path)
    path = run.out / f"beeswarm_{task}.svg"
    plotting.beeswarm(rep.ranking, rep.explanation.phi[:, order], rep.explanation.values[:, order], path, top)
    run.add(path)

    wanted = ex["episodes"] or sorted(e.episode_id for e in test)[:1]
    by_id = {e.episode_id: e for e in inp.episodes}
    for eid in wanted:
        if eid not in by_id:
            raise CohortError(f"explain.episodes: unknown episode {eid}")
        rows, hours = _timeline_rows(cfg, fm, by_id[eid])
        tl = patient_timeline(model, rows, names, hours, output, background)
        run.write_text(f"timeline_{task}_{eid}.csv", tl.heatmap_csv(top))
        last = int(hours[-1])
        run.write_text(f"force_{task}_{eid}.csv", tl.force_csv(last, top))
        keep = [names.index(n) for n in tl.ordered_features()[:top]]
        path = run.out / f"timeline_{task}_{eid}.svg"
        plotting.timeline_heatmap(hours, [names[j] for j in keep], tl.phi[:, keep], tl.explanation.prediction, path)
        run.add(path)
        t = len(hours) - 1
        force = sorted(range(len(names)), key=lambda j: (-abs(tl.phi[t, j]), names[j]))[:top]
        path = run.out / f"force_{task}_{eid}.svg"
        plotting.force_plot([names[j] for j in force], tl.phi[t, force], tl.explanation.base_value, path)
        run.add(path)


def _run_predictions(cfg: pl.RunConfig, inp) -> tuple[pl.TaskData, np.ndarray]:
    fm = pl.build_features(cfg, inp)
    train, test = pl.split_episodes(cfg, inp.episodes)
    model = pl.fit(cfg, fm, train)
    return pl.predict(cfg, model, fm, test)


def cmd_significance(run: _Run) -> None:
    cfg = run.cfg
    inp = pl.load_inputs(cfg)
    run.inputs += inp.files
    preds = {}
    labels = None
    for spec in cfg["significance"]["runs"]:
        sub = cfg.with_overrides(**{k: v for k, v in spec.items() if k != "name"})
        data, probs = _run_predictions(sub, inp)
        if labels is not None and not np.array_equal(labels, data.y):
            raise FeatureError(f"run {spec['name']!r} does not share the test set")
        labels = data.y
        preds[spec["name"]] = probs
    metric, name = pl.primary_metric(cfg.task)
    n_res = pl.default_resamples(cfg, "significance")
    sig = significance_matrix(preds, labels, metric, n_res, cfg["seed"], name=name)
    task = cfg["task"]
    out = sig.to_dict()
    out["task"] = task
    out["point_estimates"] = {k: float(metric(p, labels)) for k, p in preds.items()}
    run.write_json(f"significance_{task}.json", out)
    run.write_text(f"significance_{task}.csv", sig.to_csv())


def cmd_ablation(run: _Run) -> None:
    cfg = run.cfg
    inp = pl.load_inputs(cfg)
    run.inputs += inp.files
    rows = []
    table = {}
    for task in cfg["ablation"]["tasks"]:
        res = {}
        for prop in (True, False):
            sub = cfg.with_overrides(task=task, propagation=prop, features="S+annotations")
            data, probs = _run_predictions(sub, inp)
            rep = pl.evaluate(sub, data, probs)
            res[prop] = {k: v["value"] for k, v in rep["metrics"].items()}
        table[task] = {"with_propagation": res[True], "without_propagation": res[False],
                       "delta": {k: res[True][k] - res[False][k] for k in res[True]}}
        for k in res[True]:
            rows.append([task, cfg["model"], k, repr(res[True][k]), repr(res[False][k]),
                         repr(res[True][k] - res[False][k])])
    run.write_json("ablation.json", {"model": cfg["model"], "tasks": table})
    run.write_text("ablation.csv", _csv(["task", "model", "metric", "with_propagation", "without_propagation",
                                         "delta"], rows))
    labels = [f"{r[0]}:{r[2]}" for r in rows]
    path = run.out / "ablation.svg"
    plotting.bar_table(labels, {"delta (with - without)": [float(r[5]) for r in rows]}, path, "delta")
    run.add(path)


HANDLERS = {"generate": cmd_generate, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
            "explain": cmd_explain, "significance": cmd_significance, "ablation": cmd_ablation}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phenoicu", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", help="overrides the config output directory")
    return parser


def run_command(command: str, config: str | None = None, seed: int | None = None, out: str | None = None) -> int:
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["output_dir"] = str(Path(out).resolve())
    try:
        cfg = pl.load_config(config, overrides)
        run = _Run(command, cfg, Path(config).resolve() if config else None)
        HANDLERS[command](run)
        run.finish()
    except (pl.ConfigError, ExplainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CohortError, AnnotationError, OntologyError, FeatureError, ContainerError, ModelError, MetricError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return run_command(args.command, args.config, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
