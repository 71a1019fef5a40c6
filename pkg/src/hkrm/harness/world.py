"""Synthetic worlds and scenes with controllable context, layout and long tail.

Class 0 is background. Foreground classes are organized as follows:

* attribute groups: each class belongs to one group; a group owns a disjoint
  block of attributes and classes in the group share a base attribute
  distribution. Prototypes are a group center plus a class offset.
* context pairs (a, b): prototypes differ by ``confusable_eps``; a scene holds
  at most one of the two, and each brings its own companion class with
  probability ``context_prob``.
* spatial pairs (top, bottom): prototypes differ by ``confusable_eps``; the
  members live in the top and bottom vertical bands, alongside anchor classes
  pinned to the same bands.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from hkrm.explicit_module import BACKGROUND, RegionBatch
from hkrm.nn_core import derive_seed


class WorldConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    num_classes: int = 20
    feature_dim: int = 64
    noise_sigma: float = 0.3
    prototype_scale: float = 1.0
    class_offset_scale: float = 0.5
    long_tail_exponent: float = 1.0
    background_fraction: float = 0.2
    regions_min: int = 32
    regions_max: int = 32
    num_attributes: int = 24
    attribute_groups: int = 4
    attributes_per_instance: int = 2
    attribute_concentration: float = 200.0
    num_predicates: int = 6
    relation_prob: float = 0.1
    context_pairs: int = 1
    context_prob: float = 0.9
    companion_weight: float = 0.02
    spatial_pairs: int = 1
    spatial_anchors: int = 1
    top_band: list = field(default_factory=lambda: [0.0, 0.15])
    bottom_band: list = field(default_factory=lambda: [0.75, 0.9])
    confusable_eps: float = 0.05
    image_min: float = 400.0
    image_max: float = 800.0

    def validate(self):
        def fail(key, msg):
            raise WorldConfigError(f"world.{key}: {msg}")

        if self.num_classes < 2:
            fail("num_classes", "must be >= 2")
        if self.feature_dim < 2:
            fail("feature_dim", "must be >= 2")
        if self.noise_sigma < 0:
            fail("noise_sigma", "must be >= 0")
        if self.prototype_scale <= 0:
            fail("prototype_scale", "must be > 0")
        if self.class_offset_scale < 0:
            fail("class_offset_scale", "must be >= 0")
        if self.long_tail_exponent < 0:
            fail("long_tail_exponent", "must be >= 0")
        if not 0 <= self.background_fraction < 1:
            fail("background_fraction", "must lie in [0, 1)")
        if not 1 <= self.regions_min <= self.regions_max:
            fail("regions_min", "need 1 <= regions_min <= regions_max")
        if self.attribute_groups < 1 or self.num_attributes < self.attribute_groups:
            fail("attribute_groups", "need 1 <= attribute_groups <= num_attributes")
        if self.attributes_per_instance < 0:
            fail("attributes_per_instance", "must be >= 0")
        if self.attribute_concentration <= 0:
            fail("attribute_concentration", "must be > 0")
        if self.num_predicates < 1:
            fail("num_predicates", "must be >= 1")
        if not 0 <= self.relation_prob <= 1:
            fail("relation_prob", "must lie in [0, 1]")
        if not 0 <= self.context_prob <= 1:
            fail("context_prob", "must lie in [0, 1]")
        if self.companion_weight <= 0:
            fail("companion_weight", "must be > 0")
        if self.context_pairs < 0 or self.spatial_pairs < 0 or self.spatial_anchors < 0:
            fail("context_pairs", "pair and anchor counts must be >= 0")
        if self.confusable_eps < 0:
            fail("confusable_eps", "must be >= 0")
        if self.confusable_eps > self.prototype_scale:
            fail("confusable_eps", "exceeds prototype_scale")
        for key in ("top_band", "bottom_band"):
            lo, hi = getattr(self, key)
            if not 0 <= lo <= hi < 1:
                fail(key, "band must satisfy 0 <= lo <= hi < 1")
        if not 0 < self.image_min <= self.image_max:
            fail("image_min", "need 0 < image_min <= image_max")
        needed = 4 * self.context_pairs + 2 * self.spatial_pairs
        if self.spatial_pairs:
            needed += 2 * self.spatial_anchors
        if needed > self.num_classes - 1:
            fail("num_classes", f"{needed} special classes do not fit in {self.num_classes - 1} foreground classes")


@dataclass
class WorldSpec:
    config: WorldConfig
    class_names: list
    attribute_names: list
    predicate_names: list
    prototypes: np.ndarray  # (C, D)
    attribute_probs: np.ndarray  # (C, K); background row is zero
    attribute_group: np.ndarray  # (C,), -1 for background
    frequency_weights: np.ndarray  # (C,), background entry unused (0)
    confusable_pairs: list  # (a, b, eps)
    context_rules: list  # (class, companion, prob, predicate_id)
    spatial_rules: list  # (class, lo, hi)
    spatial_pairs: list  # (top_class, bottom_class)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def feature_dim(self):
        return self.prototypes.shape[1]

    def band_of(self, c):
        for cls, lo, hi in self.spatial_rules:
            if cls == c:
                return lo, hi
        return None

    def rare_classes(self, quantile=0.25):
        """Foreground classes in the bottom ``quantile`` of frequency weight."""
        fg = np.arange(1, self.num_classes)
        k = max(1, int(round(quantile * fg.size)))
        order = fg[np.lexsort((fg, self.frequency_weights[fg]))]
        return sorted(int(c) for c in order[:k])

    def to_dict(self):
        return {
            "config": asdict(self.config),
            "class_names": self.class_names,
            "attribute_names": self.attribute_names,
            "predicate_names": self.predicate_names,
            "prototypes": self.prototypes.tolist(),
            "attribute_probs": self.attribute_probs.tolist(),
            "attribute_group": self.attribute_group.tolist(),
            "frequency_weights": self.frequency_weights.tolist(),
            "confusable_pairs": [list(p) for p in self.confusable_pairs],
            "context_rules": [list(r) for r in self.context_rules],
            "spatial_rules": [list(r) for r in self.spatial_rules],
            "spatial_pairs": [list(p) for p in self.spatial_pairs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            config=WorldConfig(**d["config"]),
            class_names=list(d["class_names"]),
            attribute_names=list(d["attribute_names"]),
            predicate_names=list(d["predicate_names"]),
            prototypes=np.array(d["prototypes"], dtype=np.float64),
            attribute_probs=np.array(d["attribute_probs"], dtype=np.float64),
            attribute_group=np.array(d["attribute_group"], dtype=np.int64),
            frequency_weights=np.array(d["frequency_weights"], dtype=np.float64),
            confusable_pairs=[(int(a), int(b), float(e)) for a, b, e in d["confusable_pairs"]],
            context_rules=[(int(c), int(m), float(p), int(k)) for c, m, p, k in d["context_rules"]],
            spatial_rules=[(int(c), float(lo), float(hi)) for c, lo, hi in d["spatial_rules"]],
            spatial_pairs=[(int(a), int(b)) for a, b in d["spatial_pairs"]],
        )


def generate_world(config, seed):
    """Build a WorldSpec deterministically from ``config`` and ``seed``."""
    config.validate()
    cfg = config
    rng = np.random.default_rng(derive_seed(seed, "world"))
    C, D, G, K = cfg.num_classes, cfg.feature_dim, cfg.attribute_groups, cfg.num_attributes

    names = ["background"]
    next_id = 1
    confusable, context_rules, spatial_rules, spatial_pairs = [], [], [], []
    companions = []
    # frequency rank units; both members of a confusable pair share one unit
    units = []
    for k in range(cfg.context_pairs):
        a, b, ca, cb = next_id, next_id + 1, next_id + 2, next_id + 3
        next_id += 4
        names += [f"ctx{k}_a", f"ctx{k}_b", f"ctx{k}_a_companion", f"ctx{k}_b_companion"]
        confusable.append((a, b, cfg.confusable_eps))
        context_rules.append((a, ca, cfg.context_prob, 0))
        context_rules.append((b, cb, cfg.context_prob, 0))
        companions += [ca, cb]
        units.append([a, b])
    anchors = []
    for k in range(cfg.spatial_pairs):
        t, b = next_id, next_id + 1
        next_id += 2
        names += [f"spatial{k}_top", f"spatial{k}_bottom"]
        confusable.append((t, b, cfg.confusable_eps))
        spatial_pairs.append((t, b))
        spatial_rules.append((t, *cfg.top_band))
        spatial_rules.append((b, *cfg.bottom_band))
        units.append([t, b])
    if cfg.spatial_pairs:
        for k in range(cfg.spatial_anchors):
            t, b = next_id, next_id + 1
            next_id += 2
            names += [f"anchor{k}_top", f"anchor{k}_bottom"]
            spatial_rules.append((t, *cfg.top_band))
            spatial_rules.append((b, *cfg.bottom_band))
            anchors += [t, b]
            units.append([t])
            units.append([b])
    while next_id < C:
        names.append(f"class{next_id}")
        units.append([next_id])
        next_id += 1

    weights = np.zeros(C)
    for rank, unit in enumerate(units, start=1):
        for c in unit:
            weights[c] = rank ** (-cfg.long_tail_exponent)
    # companions sit at the tail of the base distribution
    tail = len(units) + 1
    for c in companions:
        weights[c] = cfg.companion_weight * tail ** (-cfg.long_tail_exponent)

    # attribute groups: round robin over rank units so pair members share a group
    group = np.full(C, -1, dtype=np.int64)
    order = list(units) + [[c] for c in companions]
    for idx, unit in enumerate(order):
        for c in unit:
            group[c] = idx % G
    bounds = np.linspace(0, K, G + 1).round().astype(int)
    attr_names = [f"attr{k}" for k in range(K)]
    attr_probs = np.zeros((C, K))
    bases = []
    for g in range(G):
        lo, hi = bounds[g], bounds[g + 1]
        bases.append(rng.dirichlet(np.ones(hi - lo) * 2.0))
    for c in range(1, C):
        g = group[c]
        lo, hi = bounds[g], bounds[g + 1]
        attr_probs[c, lo:hi] = rng.dirichlet(cfg.attribute_concentration * bases[g])
    for a, b, _ in confusable:
        attr_probs[b] = attr_probs[a]

    centers = rng.normal(0.0, cfg.prototype_scale, size=(G, D))
    protos = np.zeros((C, D))
    protos[0] = rng.normal(0.0, cfg.prototype_scale, size=D)
    for c in range(1, C):
        protos[c] = centers[group[c]] + rng.normal(0.0, cfg.class_offset_scale, size=D)
    for a, b, eps in confusable:
        u = rng.normal(size=D)
        protos[b] = protos[a] + eps * u / np.linalg.norm(u)
    _enforce_separation(protos, confusable, cfg, rng)

    predicates = ["near"] + [f"rel{k}" for k in range(1, cfg.num_predicates)]
    return WorldSpec(
        config=cfg,
        class_names=names,
        attribute_names=attr_names,
        predicate_names=predicates,
        prototypes=protos,
        attribute_probs=attr_probs,
        attribute_group=group,
        frequency_weights=weights,
        confusable_pairs=confusable,
        context_rules=context_rules,
        spatial_rules=spatial_rules,
        spatial_pairs=spatial_pairs,
    )


def _enforce_separation(protos, confusable, cfg, rng, max_tries=100):
    """Push non-confusable prototype pairs apart until all exceed 3 sigma."""
    paired = {frozenset((a, b)) for a, b, _ in confusable}
    partner = {}
    for a, b, _ in confusable:
        partner[a] = b
    min_sep = 3.0 * cfg.noise_sigma
    C = protos.shape[0]
    for _ in range(max_tries):
        bad = None
        for i in range(C):
            for j in range(i + 1, C):
                if frozenset((i, j)) in paired:
                    continue
                if np.linalg.norm(protos[i] - protos[j]) <= min_sep:
                    bad = j
                    break
            if bad is not None:
                break
        if bad is None:
            return
        shift = rng.normal(0.0, max(cfg.class_offset_scale, cfg.prototype_scale), size=protos.shape[1])
        protos[bad] += shift
        if bad in partner:
            protos[partner[bad]] += shift
        for a, b in partner.items():
            if b == bad:
                protos[a] += shift
    raise WorldConfigError("world.noise_sigma: could not separate prototypes by 3 sigma")


@dataclass
class SyntheticScene:
    regions: RegionBatch
    image_id: str = ""
    # per-region relation partners for annotation export: list of (predicate, region index)
    relations: list = field(default_factory=list)

    @property
    def gt_classes(self):
        return self.regions.gt_classes


def _draw_foreground(world, n_fg, rng):
    """Draw foreground classes under pair exclusivity and context rules.

    A companion replaces a randomly chosen ordinary (non-special) region. Scenes
    with no ordinary region cannot take a companion, so worlds made almost
    entirely of special classes, or with very few regions, realize a lower
    co-occurrence rate than ``context_prob``.
    """
    C = world.num_classes
    w = world.frequency_weights.copy()
    w[0] = 0.0
    p = w / w.sum()
    mate = {}
    for a, b, _ in world.confusable_pairs:
        mate[a] = b
        mate[b] = a
    classes = []
    present = set()
    draws = rng.choice(C, size=4 * n_fg + 16, p=p)
    for c in draws:
        if len(classes) == n_fg:
            break
        c = int(c)
        if c in mate and mate[c] in present:
            continue
        classes.append(c)
        present.add(c)
    while len(classes) < n_fg:
        c = int(rng.choice(C, p=p))
        if c in mate and mate[c] in present:
            continue
        classes.append(c)
        present.add(c)

    special = set(mate)
    special.update(m for _, m, _, _ in world.context_rules)
    special.update(c for c, _, _ in world.spatial_rules)
    for cls, companion, prob, _ in world.context_rules:
        if cls not in present:
            continue
        if rng.random() >= prob:
            continue
        if companion in present:
            continue
        free = [i for i, c in enumerate(classes) if c not in special]
        if not free:
            continue
        slot = free[int(rng.integers(len(free)))]
        classes[slot] = companion
        present.add(companion)
    return classes


def generate_scene(world, seed, index=0):
    """One scene: long-tail class draws, prototype + noise features, banded boxes."""
    cfg = world.config
    rng = np.random.default_rng(derive_seed(seed, "scene", index))
    n = int(rng.integers(cfg.regions_min, cfg.regions_max + 1))
    is_bg = rng.random(n) < cfg.background_fraction
    n_fg = int(n - is_bg.sum())
    fg_classes = _draw_foreground(world, n_fg, rng) if n_fg else []
    gt = np.zeros(n, dtype=np.int64)
    gt[~is_bg] = fg_classes

    feats = world.prototypes[gt] + cfg.noise_sigma * rng.normal(size=(n, world.feature_dim))
    width = rng.uniform(cfg.image_min, cfg.image_max)
    height = rng.uniform(cfg.image_min, cfg.image_max)
    boxes = np.empty((n, 4))
    for i, c in enumerate(gt):
        bw = rng.uniform(0.05, 0.3)
        bh = rng.uniform(0.05, 0.2)
        x = rng.uniform(0.0, 1.0 - bw)
        band = world.band_of(int(c))
        if band is None:
            y = rng.uniform(0.0, 1.0 - bh)
        else:
            y = rng.uniform(band[0], band[1])
            bh = min(bh, 1.0 - y)
        boxes[i] = (x * width, y * height, bw * width, bh * height)
    fg_prob = np.where(is_bg, rng.uniform(0.0, 0.4, n), rng.uniform(0.6, 1.0, n))

    relations = [[] for _ in range(n)]
    first_of = {}
    for i, c in enumerate(gt):
        first_of.setdefault(int(c), i)
    for cls, companion, _, pred in world.context_rules:
        if cls in first_of and companion in first_of:
            target = first_of[companion]
            for i in np.flatnonzero(gt == cls):
                relations[i].append((pred, target))
    fg_idx = np.flatnonzero(gt != BACKGROUND)
    for i in fg_idx:
        if fg_idx.size > 1 and rng.random() < cfg.relation_prob:
            j = int(rng.choice(fg_idx[fg_idx != i]))
            relations[i].append((int(rng.integers(1, max(2, cfg.num_predicates))) % cfg.num_predicates, j))

    batch = RegionBatch(feats, boxes, fg_prob, gt, (width, height))
    return SyntheticScene(batch, image_id=f"scene-{seed}-{index}", relations=relations)


def generate_scenes(world, seed, count, namespace="scenes"):
    base = derive_seed(seed, namespace)
    return [generate_scene(world, base, k) for k in range(count)]


def scene_annotations(world, scene, seed=0):
    """Annotation records (one per foreground region) in the ingest schema."""
    rng = np.random.default_rng(derive_seed(seed, "annotate", scene.image_id))
    cfg = world.config
    gt = scene.gt_classes
    records = []
    for i, c in enumerate(gt):
        c = int(c)
        if c == BACKGROUND:
            continue
        attrs = []
        if cfg.attributes_per_instance:
            ks = rng.choice(len(world.attribute_names), size=cfg.attributes_per_instance, p=world.attribute_probs[c])
            attrs = [world.attribute_names[int(k)] for k in ks]
        rels = [
            {"predicate": world.predicate_names[p], "object_class": world.class_names[int(gt[j])]}
            for p, j in scene.relations[i]
        ]
        records.append({"image": scene.image_id, "class": world.class_names[c], "attributes": attrs, "relations": rels})
    return records


def generate_annotations(world, seed, count):
    """Annotation records for ``count`` fresh scenes."""
    records = []
    for scene in generate_scenes(world, seed, count, namespace="annotation-scenes"):
        records.extend(scene_annotations(world, scene, seed))
    return records
