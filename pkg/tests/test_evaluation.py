import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hkrm.harness.evaluation import cluster_cohesion, empty_metrics, evaluate, scene_metrics
from hkrm.harness.model import HkrmModel
from hkrm.harness.training import build_priors
from hkrm.harness.world import WorldConfig, generate_scenes, generate_world

from harness_fixtures import tiny_model_config, tiny_train_config, tiny_world_config


def baseline_model(world, seed=0, priors=None):
    model = HkrmModel(world.num_classes, world.feature_dim, tiny_model_config(()), seed, priors)
    return model


def test_metrics_merge_equals_union_of_scene_counts():
    world = generate_world(tiny_world_config(), 0)
    priors = build_priors(world, tiny_train_config(), 0)
    model = HkrmModel(world.num_classes, world.feature_dim, tiny_model_config(), 0, priors)
    scenes = generate_scenes(world, 3, 6)
    whole = evaluate(model, world, scenes)
    parts = [evaluate(model, world, scenes[:2]), evaluate(model, world, scenes[2:])]
    merged = parts[0].merge(parts[1])
    assert merged.to_dict() == whole.to_dict()
    assert whole.num_regions == sum(s.regions.num_regions for s in scenes)
    per_scene = [scene_metrics(model, world, s) for s in scenes]
    assert sum(m.correct.sum() for m in per_scene) == whole.correct.sum()
    assert set(whole.edge_mae()) == {"attr", "rel"}


def test_evaluate_rejects_empty_scene_list():
    world = generate_world(tiny_world_config(), 0)
    with pytest.raises(ValueError):
        evaluate(baseline_model(world), world, [])


def test_empty_metrics_report_none_for_empty_slices():
    world = generate_world(tiny_world_config(), 0)
    d = empty_metrics(world).to_dict()
    assert d["accuracy"] is None and d["num_regions"] == 0


def test_random_weights_on_indistinguishable_two_class_world_is_chance():
    cfg = WorldConfig(
        num_classes=2,
        feature_dim=8,
        context_pairs=0,
        spatial_pairs=0,
        background_fraction=0.5,
        num_attributes=4,
        attribute_groups=1,
        regions_min=20,
        regions_max=20,
    )
    world = generate_world(cfg, 0)
    # both classes share one prototype, so labels carry no signal in the features
    world = dataclasses.replace(world, prototypes=np.zeros_like(world.prototypes))
    model = baseline_model(world)
    rng = np.random.default_rng(5)
    model.cls_weight[...] = rng.normal(size=model.cls_weight.shape)
    model.cls_bias[...] = 0.0
    metrics = evaluate(model, world, generate_scenes(world, 0, 100))
    assert metrics.num_regions == 2000
    assert abs(metrics.accuracy - 0.5) <= 0.05


def test_nearest_prototype_classifier_is_perfect_without_noise():
    world = generate_world(tiny_world_config(noise_sigma=0.0), 0)
    model = baseline_model(world)
    p = world.prototypes
    model.cls_weight[: world.feature_dim] = p.T
    model.cls_bias[...] = -0.5 * np.sum(p * p, axis=1)
    metrics = evaluate(model, world, generate_scenes(world, 0, 20))
    assert metrics.accuracy == 1.0


def test_cohesion_is_zero_for_identical_group_members():
    labels = np.array([1, 2, 3, 4])
    emb = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    assert cluster_cohesion(emb, labels, {1: 0, 2: 0, 3: 1, 4: 1}) == 0.0


def test_cohesion_hand_value():
    # class means on a line at 0, 1, 10; group {1, 2} vs {3}
    emb = np.array([[0.0], [1.0], [10.0]])
    ratio = cluster_cohesion(emb, np.array([1, 2, 3]), {1: 0, 2: 0, 3: 1})
    assert ratio == pytest.approx(1.0 / 9.5)


def test_cohesion_of_shuffled_groups_averages_to_one():
    rng = np.random.default_rng(0)
    num_classes, groups = 24, 4
    emb = rng.normal(size=(num_classes * 10, 6))
    labels = np.repeat(np.arange(1, num_classes + 1), 10)
    ratios = []
    for _ in range(20):
        assignment = rng.permutation(np.arange(num_classes) % groups)
        ratios.append(cluster_cohesion(emb, labels, {c + 1: int(g) for c, g in enumerate(assignment)}))
    assert abs(np.mean(ratios) - 1.0) <= 0.1


def test_cohesion_ignores_background_and_ungrouped_classes():
    emb = np.array([[100.0], [0.0], [0.0], [5.0], [5.0], [-50.0]])
    labels = np.array([0, 1, 2, 3, 4, 5])
    assert cluster_cohesion(emb, labels, {0: 0, 1: 0, 2: 0, 3: 1, 4: 1}) == 0.0


@pytest.mark.parametrize(
    "labels,groups",
    [
        ([1, 1], {1: 0}),  # one class
        ([1, 2], {1: 0, 2: 0}),  # one group
        ([1, 2], {1: 0, 2: 1}),  # no group with two classes
    ],
)
def test_cohesion_errors(labels, groups):
    emb = np.arange(len(labels), dtype=float)[:, None]
    with pytest.raises(ValueError):
        cluster_cohesion(emb, np.array(labels), groups)


def test_cohesion_rejects_coincident_means():
    with pytest.raises(ValueError):
        cluster_cohesion(np.zeros((3, 2)), np.array([1, 2, 3]), {1: 0, 2: 0, 3: 1})


@given(st.floats(0.1, 100.0), st.integers(0, 1000))
def test_cohesion_is_scale_and_translation_invariant(scale, seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(12, 3))
    labels = np.repeat(np.arange(1, 7), 2)
    groups = {1: 0, 2: 0, 3: 0, 4: 1, 5: 1, 6: 1}
    base = cluster_cohesion(emb, labels, groups)
    moved = cluster_cohesion(emb * scale + rng.normal(size=3), labels, groups)
    assert moved == pytest.approx(base, rel=1e-9)
    assert base >= 0
