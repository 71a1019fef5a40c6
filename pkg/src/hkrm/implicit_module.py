"""Implicit knowledge branch over relative box geometry.

M small edge MLPs read |q_i - q_j| for the scale-free geometry feature
q = (x/W, y/H, w/W, h/H, p). Their clamped outputs are averaged, the identity
is added, and the result (row-normalized by default) propagates the visual
features:  g' = E_I f W_g. Edges learn only from the downstream task loss.
"""

from dataclasses import dataclass

import numpy as np

from hkrm import explicit_module as em
from hkrm.nn_core import MlpStack, ShapeError, derive_seed

GEOMETRY_DIM = 5


@dataclass
class ImplicitConfig:
    num_graphs: int = 10
    mlp_dims: tuple = (5, 1)
    embed_dim: int = 256
    normalize: bool = True

    def __post_init__(self):
        self.mlp_dims = list(self.mlp_dims)
        if self.num_graphs < 1:
            raise ValueError("implicit.num_graphs: must be >= 1")
        if not self.mlp_dims or self.mlp_dims[-1] != 1:
            raise ValueError("implicit.mlp_dims: must end with 1")
        if self.embed_dim < 1:
            raise ValueError("implicit.embed_dim: must be >= 1")


def geometry_features(boxes, image_size, fg_prob):
    """(x/W, y/H, w/W, h/H, p) per region."""
    width, height = image_size
    if not (width > 0 and height > 0):
        raise ValueError(f"image size must be positive, got {image_size}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    fg_prob = np.asarray(fg_prob, dtype=np.float64).reshape(-1)
    if fg_prob.shape[0] != boxes.shape[0]:
        raise ShapeError(f"{boxes.shape[0]} boxes but {fg_prob.shape[0]} foreground scores")
    q = np.empty((boxes.shape[0], GEOMETRY_DIM))
    q[:, 0] = boxes[:, 0] / width
    q[:, 1] = boxes[:, 1] / height
    q[:, 2] = boxes[:, 2] / width
    q[:, 3] = boxes[:, 3] / height
    q[:, 4] = fg_prob
    return q


def implicit_edges(q, predictors):
    """E_I = mean_m relu(E_m) + I, before any normalization. Returns (E_I, cache)."""
    if len(predictors) == 0:
        raise ValueError("implicit edges need at least one graph predictor")
    n = q.shape[0]
    acc = np.zeros((n, n))
    caches = []
    for predictor in predictors:
        raw, cache = em.predict_edges(q, predictor)
        acc += np.maximum(raw, 0.0)
        caches.append((raw, cache))
    out = acc / len(predictors) + np.eye(n)
    return out, {"graphs": caches, "num_graphs": len(predictors)}


def implicit_edges_backward(cache, d_out):
    """Gradients for each predictor, as a list of dicts."""
    m = cache["num_graphs"]
    grads = []
    for raw, edge_cache in cache["graphs"]:
        d_raw = np.where(raw > 0.0, d_out / m, 0.0)
        g, _ = em.predict_edges_backward(edge_cache, d_raw, need_input_grad=False)
        grads.append(g)
    return grads


def propagate_implicit(edges, f, weight, normalize=True):
    """g' = A f W_g where A is E_I, row-normalized when ``normalize``."""
    if normalize:
        adj, norm_cache = em.normalize_rows(edges)
    else:
        adj, norm_cache = edges, None
    out, prop_cache = em.propagate(adj, f, weight)
    return out, {"norm": norm_cache, "prop": prop_cache}


def propagate_implicit_backward(cache, d_out):
    """Returns (d_edges, d_f, d_weight)."""
    d_adj, d_f, d_w = em.propagate_backward(cache["prop"], d_out)
    if cache["norm"] is not None:
        d_adj = em.normalize_rows_backward(cache["norm"], d_adj)
    return d_adj, d_f, d_w


class ImplicitBranch:
    def __init__(self, feature_dim, config, seed):
        self.config = config
        self.predictors = [
            MlpStack.init(GEOMETRY_DIM, config.mlp_dims, derive_seed(seed, "graph", m))
            for m in range(config.num_graphs)
        ]
        rng = np.random.default_rng(derive_seed(seed, "transform"))
        bound = np.sqrt(6.0 / (feature_dim + config.embed_dim))
        self.transform = rng.uniform(-bound, bound, size=(feature_dim, config.embed_dim))

    def parameters(self):
        params = {}
        for m, predictor in enumerate(self.predictors):
            for k, v in predictor.parameters().items():
                params[f"graph{m}.{k}"] = v
        params["transform"] = self.transform
        return params

    def forward(self, f, q):
        edges, edge_cache = implicit_edges(q, self.predictors)
        out, prop_cache = propagate_implicit(edges, f, self.transform, self.config.normalize)
        return out, {"edges": edge_cache, "prop": prop_cache, "raw": edges}

    def backward(self, cache, d_out):
        d_edges, d_f, d_transform = propagate_implicit_backward(cache["prop"], d_out)
        grads = {}
        for m, g in enumerate(implicit_edges_backward(cache["edges"], d_edges)):
            for k, v in g.items():
                grads[f"graph{m}.{k}"] = v
        grads["transform"] = d_transform
        return grads, d_f
