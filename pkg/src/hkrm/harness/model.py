"""Composed classifier: baseline features plus any subset of knowledge branches.

logits = [f | f'_attr | f'_rel | g'] @ W + b
"""

from dataclasses import dataclass, field

import numpy as np

from hkrm import tensorio
from hkrm.explicit_module import ExplicitBranch, ExplicitConfig
from hkrm.implicit_module import ImplicitBranch, ImplicitConfig, geometry_features
from hkrm.knowledge_graphs import PriorGraph
from hkrm.nn_core import ShapeError, derive_seed

BRANCHES = ("attr", "rel", "spatial")
ABLATIONS = {
    "baseline": (),
    "attr": ("attr",),
    "rel": ("rel",),
    "spatial": ("spatial",),
    "all": BRANCHES,
}


@dataclass
class ModelConfig:
    explicit: ExplicitConfig = field(default_factory=ExplicitConfig)
    implicit: ImplicitConfig = field(default_factory=ImplicitConfig)
    branches: tuple = BRANCHES


class HkrmModel:
    def __init__(self, num_classes, feature_dim, config, seed, priors=None):
        priors = priors or {}
        self.config = config
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.branches = {}
        for name in BRANCHES:
            if name not in config.branches:
                continue
            branch_seed = derive_seed(seed, name)
            if name == "spatial":
                self.branches[name] = ImplicitBranch(feature_dim, config.implicit, branch_seed)
            else:
                prior = priors.get(name)
                if prior is not None and prior.num_classes != num_classes:
                    raise ShapeError(f"{name} prior has {prior.num_classes} classes, model has {num_classes}")
                self.branches[name] = ExplicitBranch(feature_dim, config.explicit, branch_seed, prior)
        self.enabled = set(self.branches)
        self.slices = {"f": slice(0, feature_dim)}
        start = feature_dim
        for name, branch in self.branches.items():
            width = branch.transform.shape[1]
            self.slices[name] = slice(start, start + width)
            start += width
        rng = np.random.default_rng(derive_seed(seed, "classifier"))
        bound = np.sqrt(6.0 / (feature_dim + num_classes))
        # branch rows start at zero so enabling a branch leaves the baseline function unchanged
        self.cls_weight = np.zeros((start, num_classes))
        self.cls_weight[:feature_dim] = rng.uniform(-bound, bound, size=(feature_dim, num_classes))
        self.cls_bias = np.zeros(num_classes)

    @property
    def input_dim(self):
        return self.cls_weight.shape[0]

    def parameters(self):
        params = {"classifier.weight": self.cls_weight, "classifier.bias": self.cls_bias}
        for name, branch in self.branches.items():
            for k, v in branch.parameters().items():
                params[f"{name}.{k}"] = v
        return params

    def set_priors(self, priors):
        for name, prior in priors.items():
            if name in self.branches and name != "spatial":
                self.branches[name].prior = prior

    def state_dict(self):
        return {k: v.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} vs model {p.shape}")
            p[...] = state[name]


def forward_model(model, scene, supervise=True, edge_scale=1.0):
    """Returns (logits, branch outputs, edge losses, cache).

    Edge losses are reported for enabled explicit branches whose prior is set
    and only when the scene carries labels and ``supervise`` is true.
    """
    regions = getattr(scene, "regions", scene)
    f = regions.features
    if f.shape[1] != model.feature_dim:
        raise ShapeError(f"scene features have {f.shape[1]} dims, model expects {model.feature_dim}")
    n = f.shape[0]
    gt = regions.gt_classes if supervise else None
    x = np.zeros((n, model.input_dim))
    x[:, model.slices["f"]] = f
    outputs = {}
    losses = {}
    caches = {}
    for name, branch in model.branches.items():
        if name not in model.enabled:
            continue
        if name == "spatial":
            q = geometry_features(regions.boxes, regions.image_size, regions.fg_prob)
            out, cache = branch.forward(f, q)
        else:
            out, loss, cache = branch.forward(f, gt, edge_scale)
            if loss is not None:
                losses[name] = loss
        outputs[name] = out
        caches[name] = cache
        x[:, model.slices[name]] = out
    logits = x @ model.cls_weight + model.cls_bias
    return logits, outputs, losses, {"x": x, "branches": caches}


def backward_model(model, cache, d_logits, edge_weight=1.0):
    """Gradients of (task loss + edge_weight * sum of edge losses)."""
    x = cache["x"]
    grads = {"classifier.weight": x.T @ d_logits, "classifier.bias": d_logits.sum(axis=0)}
    d_x = d_logits @ model.cls_weight.T
    for name, branch in model.branches.items():
        if name in cache["branches"]:
            if name == "spatial":
                bgrads, _ = branch.backward(cache["branches"][name], d_x[:, model.slices[name]])
            else:
                bgrads, _ = branch.backward(cache["branches"][name], d_x[:, model.slices[name]], edge_weight)
        else:
            bgrads = {k: np.zeros_like(v) for k, v in branch.parameters().items()}
        for k, v in bgrads.items():
            grads[f"{name}.{k}"] = v
    return grads


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over rows. Returns (loss, dloss/dlogits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def scene_loss(model, scene, edge_weight=1.0, edge_scale_mode="sum"):
    """Total loss and gradients for one labelled scene."""
    regions = scene.regions
    n = regions.num_regions
    scale = 1.0 / (n * n) if edge_scale_mode == "mean" else 1.0
    logits, _, losses, cache = forward_model(model, scene, True, scale)
    ce, d_logits = softmax_cross_entropy(logits, regions.gt_classes)
    grads = backward_model(model, cache, d_logits, edge_weight)
    total = ce + edge_weight * sum(losses.values())
    correct = int((logits.argmax(axis=1) == regions.gt_classes).sum())
    return total, grads, {"ce": ce, "edge": dict(losses), "correct": correct, "regions": n}


# --------------------------------------------------------------------------
# checkpoints


PRIOR_PREFIX = "prior."


def save_checkpoint(path, model, meta):
    """Parameters plus the explicit branches' prior graphs in one container.

    Priors are stored as tensors named ``prior.<branch>``; their kind, class
    names and build report go into ``meta["priors"]``.
    """
    meta = dict(meta)
    meta["enabled"] = sorted(model.enabled)
    meta["branches"] = list(model.branches)
    tensors = dict(model.parameters())
    priors = {}
    for name, branch in model.branches.items():
        prior = getattr(branch, "prior", None)
        if prior is not None:
            tensors[PRIOR_PREFIX + name] = prior.edges
            priors[name] = {"kind": prior.kind, "class_names": list(prior.class_names), "report": prior.report}
    meta["priors"] = priors
    tensorio.save(path, tensors, meta)


def load_checkpoint(path):
    """Returns (parameter tensors, prior graphs by branch, meta)."""
    tensors, meta = tensorio.load(path)
    priors = {}
    for name, info in meta.get("priors", {}).items():
        key = PRIOR_PREFIX + name
        if key not in tensors:
            raise tensorio.ContainerError(f"checkpoint lists prior {name!r} but has no {key!r} tensor")
        priors[name] = PriorGraph(tensors.pop(key), info["kind"], info["class_names"], info.get("report", {}))
    return tensors, priors, meta
