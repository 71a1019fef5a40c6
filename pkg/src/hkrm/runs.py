"""Run-level plumbing shared by the CLI: train-to-directory, model restore, metric files."""

import csv
import dataclasses
import io
import json
import logging
import os

from hkrm import tensorio
from hkrm.config import CONFIG_SCHEMA_VERSION, config_from_dict
from hkrm.harness.evaluation import evaluate
from hkrm.harness.model import HkrmModel, load_checkpoint, save_checkpoint
from hkrm.harness.training import build_priors, eval_scenes, train
from hkrm.harness.world import WorldSpec, generate_world
from hkrm.nn_core import derive_seed

METRICS_SCHEMA = "hkrm-metrics"
METRICS_SCHEMA_VERSION = 1
MODEL_SCHEMA = "hkrm-model"
MODEL_SCHEMA_VERSION = 1

log = logging.getLogger("hkrm.runs")


def dumps_json(obj):
    """Stable JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def run_meta(config, world):
    return {
        "schema": MODEL_SCHEMA,
        "schema_version": MODEL_SCHEMA_VERSION,
        "config_schema_version": CONFIG_SCHEMA_VERSION,
        "config": config.to_dict(),
        "world": world.to_dict(),
    }


def train_run(config, out_dir, jobs=None):
    """Train per ``config`` and write model.ckpt, metrics.json and metrics.csv to ``out_dir``.

    Returns the metrics document. ``jobs`` changes only how per-scene
    gradients are scheduled, so it is kept out of the recorded config and the
    outputs are byte-identical for any thread count.
    """
    train_config = config.train if jobs is None else dataclasses.replace(config.train, jobs=jobs)
    seed = config.run.seed
    world = generate_world(config.world, derive_seed(seed, "world"))
    priors = build_priors(world, config.train, seed)
    meta = run_meta(config, world)
    os.makedirs(out_dir, exist_ok=True)
    model, history = train(
        world,
        config.model_config(),
        train_config,
        seed,
        out_dir=out_dir,
        priors=priors,
        checkpoint_meta=meta,
    )
    save_checkpoint(os.path.join(out_dir, "model.ckpt"), model, meta)
    doc = {
        "schema": METRICS_SCHEMA,
        "schema_version": METRICS_SCHEMA_VERSION,
        "seed": seed,
        "ablation": config.run.ablation,
        "eval_seed": config.train.eval_seed,
        "eval_scenes": config.train.eval_scenes,
        "prior_reports": {name: prior.report for name, prior in priors.items()},
        "epochs": history["epochs"],
        "steps": history["steps"],
        "final": history["final"],
    }
    tensorio.atomic_write_text(os.path.join(out_dir, "metrics.json"), dumps_json(doc))
    tensorio.atomic_write_text(os.path.join(out_dir, "metrics.csv"), steps_csv(doc))
    return doc


def load_model(path):
    """Rebuild (model, world, config) from a checkpoint written by train_run."""
    tensors, priors, meta = load_checkpoint(path)
    if meta.get("schema") != MODEL_SCHEMA:
        raise tensorio.ContainerError(f"{path} is not a model checkpoint")
    if meta.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise tensorio.ContainerError(f"unsupported model schema version {meta.get('schema_version')!r}")
    config = config_from_dict(meta["config"])
    world = WorldSpec.from_dict(meta["world"])
    model = HkrmModel(
        world.num_classes, world.feature_dim, config.model_config(), derive_seed(config.run.seed, "model"), priors
    )
    model.load_state_dict(tensors)
    model.enabled = set(model.branches)
    return model, world, config


def evaluate_checkpoint(path, count, seed):
    """Metrics of a checkpoint on ``count`` held-out scenes drawn with ``seed``."""
    model, world, config = load_model(path)
    scenes = eval_scenes(world, seed, count)
    return evaluate(model, world, scenes, config.train.rare_quantile).to_dict()


def _edge_columns(doc):
    names = set()
    for step in doc["steps"]:
        names.update(step["edge"])
    return sorted(names)


def steps_csv(doc):
    """Per-step time series: step, epoch, phase, loss, ce and one column per edge loss."""
    edges = _edge_columns(doc)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "epoch", "phase", "loss", "ce"] + [f"edge_{k}" for k in edges])
    for s in doc["steps"]:
        row = [s["step"], s["epoch"], s["phase"], repr(s["loss"]), repr(s["ce"])]
        row += [repr(s["edge"][k]) if k in s["edge"] else "" for k in edges]
        writer.writerow(row)
    return buf.getvalue()


def epochs_csv(doc):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "phase", "train_loss", "train_accuracy"])
    for e in doc["epochs"]:
        writer.writerow([e["epoch"], e["phase"], repr(e["train_loss"]), repr(e["train_accuracy"])])
    return buf.getvalue()


FINAL_COLUMNS = (
    "accuracy",
    "rare_accuracy",
    "context_pair_accuracy",
    "spatial_pair_accuracy",
    "confusable_accuracy",
    "num_regions",
)


def final_csv(docs):
    """One row per run with the headline held-out metrics."""
    edge_names = sorted({k for d in docs for k in d["final"]["edge_mae"]})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["source", "seed", "ablation"] + list(FINAL_COLUMNS) + [f"edge_mae_{k}" for k in edge_names])
    for d in docs:
        final = d["final"]
        row = [d.get("source", ""), d["seed"], d["ablation"]]
        row += ["" if final[c] is None else repr(final[c]) for c in FINAL_COLUMNS]
        row += [repr(final["edge_mae"][k]) if final["edge_mae"].get(k) is not None else "" for k in edge_names]
        writer.writerow(row)
    return buf.getvalue()


def load_metrics(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict) or doc.get("schema") != METRICS_SCHEMA:
        raise ValueError(f"{path} is not a metrics file")
    if doc.get("schema_version") != METRICS_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported metrics schema version {doc.get('schema_version')!r}")
    return doc
