"""Accuracy breakdowns and the class-mean cluster cohesion ratio."""

from dataclasses import dataclass, field

import numpy as np

from hkrm.explicit_module import BACKGROUND, supervision_mask, target_edges
from hkrm.harness.model import forward_model


@dataclass
class Metrics:
    """Counts-backed metrics, so merging scene sets is exact."""

    class_names: list
    correct: np.ndarray  # per class
    total: np.ndarray  # per class
    rare_classes: list = field(default_factory=list)
    context_classes: list = field(default_factory=list)
    spatial_classes: list = field(default_factory=list)
    edge_abs_err: dict = field(default_factory=dict)  # branch -> summed |pred - target|
    edge_pairs: dict = field(default_factory=dict)  # branch -> supervised pair count

    @staticmethod
    def _ratio(num, den):
        return float(num) / float(den) if den else None

    def _slice_acc(self, classes):
        idx = list(classes)
        return self._ratio(self.correct[idx].sum(), self.total[idx].sum()) if idx else None

    @property
    def num_regions(self):
        return int(self.total.sum())

    @property
    def accuracy(self):
        return self._ratio(self.correct.sum(), self.total.sum())

    @property
    def rare_accuracy(self):
        return self._slice_acc(self.rare_classes)

    @property
    def context_pair_accuracy(self):
        return self._slice_acc(self.context_classes)

    @property
    def spatial_pair_accuracy(self):
        return self._slice_acc(self.spatial_classes)

    @property
    def confusable_accuracy(self):
        return self._slice_acc(sorted(set(self.context_classes) | set(self.spatial_classes)))

    def per_class_accuracy(self):
        return {n: self._ratio(c, t) for n, c, t in zip(self.class_names, self.correct, self.total)}

    def edge_mae(self):
        return {k: self._ratio(self.edge_abs_err[k], self.edge_pairs[k]) for k in sorted(self.edge_abs_err)}

    def merge(self, other):
        err = dict(self.edge_abs_err)
        pairs = dict(self.edge_pairs)
        for k in other.edge_abs_err:
            err[k] = err.get(k, 0.0) + other.edge_abs_err[k]
            pairs[k] = pairs.get(k, 0) + other.edge_pairs[k]
        return Metrics(
            self.class_names,
            self.correct + other.correct,
            self.total + other.total,
            self.rare_classes,
            self.context_classes,
            self.spatial_classes,
            err,
            pairs,
        )

    def to_dict(self):
        return {
            "num_regions": self.num_regions,
            "accuracy": self.accuracy,
            "rare_accuracy": self.rare_accuracy,
            "context_pair_accuracy": self.context_pair_accuracy,
            "spatial_pair_accuracy": self.spatial_pair_accuracy,
            "confusable_accuracy": self.confusable_accuracy,
            "per_class_accuracy": self.per_class_accuracy(),
            "per_class_counts": {
                n: [int(c), int(t)] for n, c, t in zip(self.class_names, self.correct, self.total)
            },
            "edge_mae": self.edge_mae(),
        }


def empty_metrics(world, rare_quantile=0.25):
    C = world.num_classes
    context = sorted({c for c, _, _, _ in world.context_rules})
    spatial = sorted({c for pair in world.spatial_pairs for c in pair})
    return Metrics(
        list(world.class_names),
        np.zeros(C, dtype=np.int64),
        np.zeros(C, dtype=np.int64),
        world.rare_classes(rare_quantile),
        context,
        spatial,
    )


def scene_metrics(model, world, scene, rare_quantile=0.25):
    logits, _, _, cache = forward_model(model, scene, supervise=False)
    gt = scene.regions.gt_classes
    pred = logits.argmax(axis=1)
    m = empty_metrics(world, rare_quantile)
    np.add.at(m.total, gt, 1)
    np.add.at(m.correct, gt[pred == gt], 1)
    for name, bcache in cache["branches"].items():
        branch = model.branches[name]
        if name == "spatial" or branch.prior is None:
            continue
        target = target_edges(gt, branch.prior)
        mask = supervision_mask(gt)
        m.edge_abs_err[name] = float(np.sum(np.abs(bcache["raw"] - target) * mask))
        m.edge_pairs[name] = int(mask.sum())
    return m


def evaluate(model, world, scenes, rare_quantile=0.25):
    """Metrics over a list of scenes, merged in order."""
    if not scenes:
        raise ValueError("evaluate needs at least one scene")
    total = None
    for scene in scenes:
        m = scene_metrics(model, world, scene, rare_quantile)
        total = m if total is None else total.merge(m)
    return total


def branch_embeddings(model, scenes, branch="f"):
    """Stack per-region embeddings of one branch ('f' for raw features) and labels."""
    embs, labels = [], []
    for scene in scenes:
        _, outputs, _, _ = forward_model(model, scene, supervise=False)
        emb = scene.regions.features if branch == "f" else outputs[branch]
        embs.append(emb)
        labels.append(scene.regions.gt_classes)
    return np.vstack(embs), np.concatenate(labels)


def cluster_cohesion(embeddings, labels, groups, exclude=(BACKGROUND,)):
    """Mean within-group / mean between-group distance of class-mean embeddings.

    ``groups`` maps class id -> group id. Lower means tighter grouping.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = [c for c in np.unique(labels) if c not in exclude and c in groups]
    if len(classes) < 2:
        raise ValueError("cluster cohesion needs at least two classes")
    means = np.array([embeddings[labels == c].mean(axis=0) for c in classes])
    gid = np.array([groups[c] for c in classes])
    if np.unique(gid).size < 2:
        raise ValueError("cluster cohesion needs at least two groups")
    dist = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    iu = np.triu_indices(len(classes), 1)
    same = gid[iu[0]] == gid[iu[1]]
    if not same.any():
        raise ValueError("cluster cohesion needs a group with two classes")
    between = dist[iu][~same].mean()
    if between == 0:
        raise ValueError("all class means coincide")
    return float(dist[iu][same].mean() / between)
