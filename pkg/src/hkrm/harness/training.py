"""Training loop: prior rebuilding, two-phase schedule, SGD, checkpoints."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from hkrm import knowledge_graphs as kg
from hkrm.harness.evaluation import evaluate
from hkrm.harness.model import ABLATIONS, HkrmModel, ModelConfig, save_checkpoint, scene_loss
from hkrm.harness.world import generate_annotations, generate_scenes
from hkrm.nn_core import NumericError, SgdState, derive_seed, sgd_step

log = logging.getLogger("hkrm.train")


@dataclass
class TrainConfig:
    epochs: int = 4
    baseline_epochs: int = 2
    train_scenes: int = 200
    batch_size: int = 2
    learning_rate: float = 0.01
    lr_milestones: list = field(default_factory=list)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    edge_weight: float = 1.0
    edge_scale: str = "sum"
    grad_clip: float = 5.0
    annotation_scenes: int = 1000
    attribute_similarity: bool = False
    per_predicate: bool = False
    top_attrs: int = 200
    top_predicates: int = 200
    eval_scenes: int = 100
    eval_seed: int = 1
    rare_quantile: float = 0.25
    jobs: int = 1

    def validate(self):
        def fail(key, msg):
            raise ValueError(f"train.{key}: {msg}")

        if self.epochs < 0:
            fail("epochs", "must be >= 0")
        if not 0 <= self.baseline_epochs <= self.epochs:
            fail("baseline_epochs", "must lie in [0, epochs]")
        if self.train_scenes < 1:
            fail("train_scenes", "need at least one training scene")
        if self.batch_size < 1:
            fail("batch_size", "must be >= 1")
        if self.learning_rate < 0:
            fail("learning_rate", "must be >= 0")
        if any(m < 1 for m in self.lr_milestones) or list(self.lr_milestones) != sorted(self.lr_milestones):
            fail("lr_milestones", "must be increasing epoch indices >= 1")
        if not 0 < self.lr_decay <= 1:
            fail("lr_decay", "must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            fail("momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            fail("weight_decay", "must be >= 0")
        if self.edge_weight < 0:
            fail("edge_weight", "must be >= 0")
        if self.grad_clip < 0:
            fail("grad_clip", "must be >= 0 (0 disables clipping)")
        if self.edge_scale not in ("sum", "mean"):
            fail("edge_scale", "must be 'sum' or 'mean'")
        if self.annotation_scenes < 1:
            fail("annotation_scenes", "must be >= 1")
        if self.top_attrs < 1 or self.top_predicates < 1:
            fail("top_attrs", "top-K vocabulary sizes must be >= 1")
        if self.eval_scenes < 1:
            fail("eval_scenes", "must be >= 1")
        if not 0 < self.rare_quantile <= 1:
            fail("rare_quantile", "must lie in (0, 1]")
        if self.jobs < 1:
            fail("jobs", "must be >= 1")


class TrainingDiverged(NumericError):
    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


def clip_grad_norm(grads, max_norm):
    """Scale all gradients in place so their global L2 norm is at most max_norm."""
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if np.isfinite(norm) and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def param_group(name):
    """Clipping group of a parameter: the classifier or the branch that owns it."""
    return name.split(".", 1)[0]


def clip_grad_groups(grads, max_norm):
    """Clip each parameter group to max_norm separately; returns {group: norm}.

    Per-group clipping keeps a branch with a large edge-loss gradient from
    shrinking the task gradient reaching the other branches.
    """
    groups = {}
    for k, g in grads.items():
        groups.setdefault(param_group(k), {})[k] = g
    return {name: clip_grad_norm(members, max_norm) for name, members in sorted(groups.items())}


def build_priors(world, train_config, seed):
    """Rebuild the attribute and relationship graphs from generated annotations."""
    records = generate_annotations(world, derive_seed(seed, "annotations"), train_config.annotation_scenes)
    table, triples = kg.ingest_annotations(
        records,
        classes=world.class_names,
        top_attrs=train_config.top_attrs,
        top_predicates=train_config.top_predicates,
    )
    return {
        "attr": kg.build_attribute_graph(table, similarity=train_config.attribute_similarity),
        "rel": kg.build_relationship_graph(triples, per_predicate=train_config.per_predicate),
    }


def eval_scenes(world, seed, count):
    return generate_scenes(world, seed, count, namespace="eval")


def build_model(world, model_config, seed, priors):
    return HkrmModel(world.num_classes, world.feature_dim, model_config, derive_seed(seed, "model"), priors)


def train(
    world, model_config, train_config, seed, ablation=None, out_dir=None, priors=None, scenes=None, checkpoint_meta=None
):
    """Train a model; returns (model, history).

    ``history`` holds per-step losses, per-epoch summaries and the final
    held-out metrics. ``scenes`` overrides the generated training set.
    ``checkpoint_meta`` is merged into every checkpoint header.
    """
    checkpoint_meta = dict(checkpoint_meta or {})
    train_config.validate()
    if ablation is not None:
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
        model_config = ModelConfig(model_config.explicit, model_config.implicit, ABLATIONS[ablation])
    if priors is None:
        priors = build_priors(world, train_config, seed)
    model = build_model(world, model_config, seed, priors)
    if scenes is None:
        scenes = generate_scenes(world, derive_seed(seed, "train"), train_config.train_scenes)
    state = SgdState(train_config.learning_rate, train_config.momentum, train_config.weight_decay)
    params = model.parameters()
    history = {"steps": [], "epochs": []}
    pool = ThreadPoolExecutor(train_config.jobs) if train_config.jobs > 1 else None
    last_good = model.state_dict()
    branches = set(model.branches)
    try:
        for epoch in range(train_config.epochs):
            phase = 1 if epoch < train_config.baseline_epochs else 2
            model.enabled = set() if phase == 1 else set(branches)
            decays = sum(1 for m in train_config.lr_milestones if epoch >= m)
            state.learning_rate = train_config.learning_rate * train_config.lr_decay**decays
            order = np.random.default_rng(derive_seed(seed, "order", epoch)).permutation(len(scenes))
            ep_loss, ep_correct, ep_regions = 0.0, 0, 0
            for start in range(0, len(order), train_config.batch_size):
                batch = [scenes[i] for i in order[start:start + train_config.batch_size]]
                fn = lambda s: scene_loss(model, s, train_config.edge_weight, train_config.edge_scale)  # noqa: E731
                results = list(pool.map(fn, batch)) if pool else [fn(s) for s in batch]
                loss = sum(r[0] for r in results) / len(results)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {len(history['steps'])}", last_good)
                grads = {k: sum(r[1][k] for r in results) / len(results) for k in params}
                if train_config.grad_clip:
                    clip_grad_groups(grads, train_config.grad_clip)
                try:
                    sgd_step(params, grads, state)
                except NumericError as exc:
                    raise TrainingDiverged(str(exc), last_good) from exc
                edge = {}
                for r in results:
                    for k, v in r[2]["edge"].items():
                        edge[k] = edge.get(k, 0.0) + v / len(results)
                history["steps"].append(
                    {
                        "step": len(history["steps"]),
                        "epoch": epoch,
                        "phase": phase,
                        "loss": loss,
                        "ce": sum(r[2]["ce"] for r in results) / len(results),
                        "edge": edge,
                    }
                )
                ep_loss += loss * len(results)
                ep_correct += sum(r[2]["correct"] for r in results)
                ep_regions += sum(r[2]["regions"] for r in results)
            summary = {
                "epoch": epoch,
                "phase": phase,
                "train_loss": ep_loss / len(scenes),
                "train_accuracy": ep_correct / ep_regions,
            }
            history["epochs"].append(summary)
            log.info("epoch done", extra={"fields": summary})
            last_good = model.state_dict()
            if out_dir is not None:
                save_checkpoint(
                    os.path.join(out_dir, f"epoch{epoch:03d}.ckpt"), model, {**checkpoint_meta, "epoch": epoch}
                )
    except TrainingDiverged:
        if out_dir is not None:
            model.load_state_dict(last_good)
            save_checkpoint(os.path.join(out_dir, "last_good.ckpt"), model, {**checkpoint_meta, "diverged": True})
        raise
    finally:
        if pool is not None:
            pool.shutdown()
    model.enabled = set(branches)
    held_out = eval_scenes(world, train_config.eval_seed, train_config.eval_scenes)
    history["final"] = evaluate(model, world, held_out, train_config.rare_quantile).to_dict()
    return model, history
