"""Explicit knowledge branch.

An edge MLP maps the absolute difference of two region features to an edge
weight. The edges are regressed toward a prior class-to-class graph looked up
at the regions' ground-truth classes, clamped, row-normalized and used to
propagate features:  f' = A f W_e.
"""

from dataclasses import dataclass, field

import numpy as np

from hkrm import kernels
from hkrm.nn_core import MlpStack, ShapeError, derive_seed, mlp_backward, mlp_forward

# Row normalization divides by (row sum + NORM_EPS). The default 0 makes every
# row with positive mass sum to 1 up to rounding; all-zero rows stay zero.
NORM_EPS = 0.0
BACKGROUND = 0


@dataclass
class RegionBatch:
    """Regions of one scene. Boxes are (x, y, w, h) in pixels."""

    features: np.ndarray
    boxes: np.ndarray
    fg_prob: np.ndarray
    gt_classes: np.ndarray = None
    image_size: tuple = (1.0, 1.0)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.fg_prob = np.asarray(self.fg_prob, dtype=np.float64).reshape(-1)
        n = self.features.shape[0]
        if n < 1:
            raise ShapeError("a region batch needs at least one region")
        if self.boxes.shape[0] != n or self.fg_prob.shape[0] != n:
            raise ShapeError(f"{n} features but {self.boxes.shape[0]} boxes and {self.fg_prob.shape[0]} scores")
        if self.gt_classes is not None:
            self.gt_classes = np.asarray(self.gt_classes, dtype=np.int64).reshape(-1)
            if self.gt_classes.shape[0] != n:
                raise ShapeError(f"{n} features but {self.gt_classes.shape[0]} labels")

    @property
    def num_regions(self):
        return self.features.shape[0]


@dataclass
class ExplicitConfig:
    mlp_dims: list = field(default_factory=lambda: [256, 128, 64, 1])
    embed_dim: int = 256
    final_activation: str = "linear"

    def __post_init__(self):
        self.mlp_dims = list(self.mlp_dims)
        if not self.mlp_dims or self.mlp_dims[-1] != 1:
            raise ValueError("explicit.mlp_dims: must end with 1")
        if self.embed_dim < 1:
            raise ValueError("explicit.embed_dim: must be >= 1")
        if self.final_activation not in ("linear", "sigmoid"):
            raise ValueError("explicit.final_activation: must be 'linear' or 'sigmoid'")


def pairwise_l1(f):
    """out[i, j, d] = |f[i, d] - f[j, d]|."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ShapeError("features must be an (N_r, D) matrix with N_r >= 1")
    return kernels.pairwise_l1(f)


def _upper_pairs(n):
    return np.triu_indices(n)


def predict_edges(f, predictor):
    """Raw edge matrix from the edge MLP applied to pairwise L1 differences.

    The MLP is evaluated once per unordered pair (i <= j) and mirrored, so the
    result is exactly symmetric. Returns (edges, cache).
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != predictor.in_dim:
        raise ShapeError(f"features have {f.shape[-1]} columns, edge predictor expects {predictor.in_dim}")
    n = f.shape[0]
    ii, jj = _upper_pairs(n)
    diffs = kernels.pairwise_l1_pairs(f, ii, jj)
    out, mlp_cache = mlp_forward(predictor, diffs)
    edges = np.empty((n, n))
    edges[ii, jj] = out[:, 0]
    edges[jj, ii] = out[:, 0]
    return edges, {"f": f, "ii": ii, "jj": jj, "mlp": mlp_cache, "predictor": predictor}


def predict_edges_backward(cache, d_edges, need_input_grad=True):
    """Returns (predictor grads, dL/df or None)."""
    ii, jj = cache["ii"], cache["jj"]
    g = d_edges[ii, jj] + d_edges[jj, ii]
    diag = ii == jj
    g[diag] = d_edges[ii[diag], jj[diag]]
    grads, d_diffs = mlp_backward(cache["predictor"], cache["mlp"], g[:, None])
    df = None
    if need_input_grad:
        df = kernels.pairwise_l1_pairs_backward(cache["f"], ii, jj, d_diffs)
    return grads, df


def target_edges(gt_classes, prior):
    """target[i, j] = prior.edges[c_i, c_j]."""
    gt = np.asarray(gt_classes, dtype=np.int64)
    if gt.size and (gt.min() < 0 or gt.max() >= prior.num_classes):
        raise IndexError(f"class id out of range for a {prior.num_classes}-class prior graph")
    return prior.edges[np.ix_(gt, gt)]


def supervision_mask(gt_classes, background=BACKGROUND):
    """1 for pairs where both regions carry a foreground class, else 0."""
    fg = (np.asarray(gt_classes) != background).astype(np.float64)
    return np.outer(fg, fg)


def edge_loss(pred, target, mask=None, scale=1.0):
    """L = scale * sum_ij mask_ij * 0.5 * (pred_ij - target_ij)^2.

    Returns (loss, dL/dpred).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"predicted edges {pred.shape} vs targets {target.shape}")
    diff = pred - target
    if mask is not None:
        diff = diff * mask
    return float(scale * 0.5 * np.sum(diff * diff)), scale * diff


def normalize_rows(raw, eps=NORM_EPS):
    """Clamp negatives to 0 and divide each row by (row sum + eps); zero rows stay zero.

    Returns (adj, cache).
    """
    raw = np.asarray(raw, dtype=np.float64)
    adj, sums = kernels.row_normalize(raw, eps)
    return adj, {"raw": raw, "adj": adj, "sums": sums, "eps": eps}


def normalize_rows_backward(cache, d_adj):
    return kernels.row_normalize_backward(cache["raw"], cache["adj"], cache["sums"], d_adj, cache["eps"])


def propagate(adj, f, weight):
    """f' = adj @ f @ weight. Returns (f', cache)."""
    adj = np.asarray(adj, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if adj.shape != (f.shape[0], f.shape[0]):
        raise ShapeError(f"adjacency {adj.shape} does not match {f.shape[0]} regions")
    if weight.shape[0] != f.shape[1]:
        raise ShapeError(f"transform has {weight.shape[0]} rows, features have {f.shape[1]} columns")
    mixed = adj @ f
    return mixed @ weight, {"adj": adj, "f": f, "weight": weight, "mixed": mixed}


def propagate_backward(cache, d_out):
    """Returns (d_adj, d_f, d_weight)."""
    d_mixed = d_out @ cache["weight"].T
    d_weight = cache["mixed"].T @ d_out
    d_adj = d_mixed @ cache["f"].T
    d_f = cache["adj"].T @ d_mixed
    return d_adj, d_f, d_weight


class ExplicitBranch:
    """Edge predictor plus feature transform W_e, supervised by a prior graph."""

    def __init__(self, feature_dim, config, seed, prior=None):
        self.config = config
        self.prior = prior
        self.predictor = MlpStack.init(
            feature_dim, config.mlp_dims, derive_seed(seed, "predictor"), config.final_activation
        )
        rng = np.random.default_rng(derive_seed(seed, "transform"))
        bound = np.sqrt(6.0 / (feature_dim + config.embed_dim))
        self.transform = rng.uniform(-bound, bound, size=(feature_dim, config.embed_dim))

    def parameters(self):
        params = {f"predictor.{k}": v for k, v in self.predictor.parameters().items()}
        params["transform"] = self.transform
        return params

    def forward(self, f, gt_classes=None, edge_scale=1.0):
        """Returns (f', edge_loss or None, cache)."""
        raw, edge_cache = predict_edges(f, self.predictor)
        adj, norm_cache = normalize_rows(raw)
        out, prop_cache = propagate(adj, f, self.transform)
        loss = None
        d_raw_loss = None
        if gt_classes is not None and self.prior is not None:
            target = target_edges(gt_classes, self.prior)
            mask = supervision_mask(gt_classes)
            loss, d_raw_loss = edge_loss(raw, target, mask, edge_scale)
        cache = {"edge": edge_cache, "norm": norm_cache, "prop": prop_cache, "d_raw_loss": d_raw_loss, "raw": raw}
        return out, loss, cache

    def backward(self, cache, d_out, edge_weight=1.0, need_input_grad=False):
        """Gradients of (task loss + edge_weight * edge loss). Returns (grads, df)."""
        d_adj, df_prop, d_transform = propagate_backward(cache["prop"], d_out)
        d_raw = normalize_rows_backward(cache["norm"], d_adj)
        if cache["d_raw_loss"] is not None and edge_weight:
            d_raw = d_raw + edge_weight * cache["d_raw_loss"]
        pred_grads, df_edge = predict_edges_backward(cache["edge"], d_raw, need_input_grad)
        grads = {f"predictor.{k}": v for k, v in pred_grads.items()}
        grads["transform"] = d_transform
        df = df_prop + df_edge if need_input_grad else None
        return grads, df
