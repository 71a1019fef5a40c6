import numpy as np
import pytest

from hkrm import knowledge_graphs as kg
from hkrm.harness.world import (
    WorldConfig,
    WorldConfigError,
    WorldSpec,
    generate_annotations,
    generate_scene,
    generate_scenes,
    generate_world,
)


def test_world_is_deterministic_in_seed():
    a = generate_world(WorldConfig(), 3)
    b = generate_world(WorldConfig(), 3)
    c = generate_world(WorldConfig(), 4)
    assert a.to_dict() == b.to_dict()
    assert not np.array_equal(a.prototypes, c.prototypes)


def test_world_dict_round_trip():
    w = generate_world(WorldConfig(), 1)
    assert WorldSpec.from_dict(w.to_dict()).to_dict() == w.to_dict()


def test_confusable_pairs_within_eps():
    w = generate_world(WorldConfig(context_pairs=2, spatial_pairs=1, num_classes=24), 0)
    assert len(w.confusable_pairs) == 3
    for a, b, eps in w.confusable_pairs:
        assert np.linalg.norm(w.prototypes[a] - w.prototypes[b]) <= eps + 1e-12


def test_zero_confusable_pairs_separates_all_prototypes():
    cfg = WorldConfig(context_pairs=0, spatial_pairs=0, noise_sigma=0.5)
    w = generate_world(cfg, 2)
    p = w.prototypes
    dist = np.linalg.norm(p[:, None] - p[None], axis=2)
    iu = np.triu_indices(len(p), 1)
    assert dist[iu].min() > 3 * cfg.noise_sigma


def test_frequency_weights_positive():
    w = generate_world(WorldConfig(), 0)
    assert np.all(w.frequency_weights[1:] > 0)


@pytest.mark.parametrize(
    "kw, key",
    [
        ({"num_classes": 1}, "world.num_classes"),
        ({"feature_dim": 1}, "world.feature_dim"),
        ({"confusable_eps": 2.0}, "world.confusable_eps"),
        ({"num_classes": 6}, "world.num_classes"),
        ({"top_band": [0.5, 0.2]}, "world.top_band"),
    ],
)
def test_invalid_configs_name_the_key(kw, key):
    with pytest.raises(WorldConfigError, match=key):
        generate_world(WorldConfig(**kw), 0)


def test_zero_noise_features_equal_prototypes():
    w = generate_world(WorldConfig(noise_sigma=0.0), 0)
    scene = generate_scene(w, 1, 0)
    np.testing.assert_array_equal(scene.regions.features, w.prototypes[scene.gt_classes])


def test_region_count_within_bounds():
    w = generate_world(WorldConfig(regions_min=5, regions_max=9), 0)
    sizes = {generate_scene(w, 0, k).regions.num_regions for k in range(50)}
    assert sizes <= set(range(5, 10)) and len(sizes) > 1


def test_spatial_rules_hold_by_construction():
    w = generate_world(WorldConfig(top_band=[0.0, 0.2]), 0)
    checked = 0
    for scene in generate_scenes(w, 0, 50):
        r = scene.regions
        y = r.boxes[:, 1] / r.image_size[1]
        for cls, lo, hi in w.spatial_rules:
            sel = r.gt_classes == cls
            checked += sel.sum()
            assert np.all((y[sel] >= lo) & (y[sel] <= hi))
    assert checked > 0


def test_confusable_pair_members_never_share_a_scene():
    w = generate_world(WorldConfig(), 0)
    for scene in generate_scenes(w, 0, 200):
        present = set(scene.gt_classes.tolist())
        for a, b, _ in w.confusable_pairs:
            assert not (a in present and b in present)


def test_uniform_long_tail_at_exponent_zero():
    cfg = WorldConfig(long_tail_exponent=0.0, context_pairs=0, spatial_pairs=0, num_classes=11, regions_min=20,
                      regions_max=20, background_fraction=0.0, feature_dim=4)
    w = generate_world(cfg, 0)
    labels = np.concatenate([s.gt_classes for s in generate_scenes(w, 0, 500)])
    assert labels.size == 10000
    freq = np.bincount(labels, minlength=11)[1:] / labels.size
    assert np.abs(freq - 0.1).max() <= 0.02


def test_recovered_co_occurrence_matches_context_prob():
    cfg = WorldConfig(feature_dim=8, regions_min=16, regions_max=16, context_prob=0.7)
    w = generate_world(cfg, 0)
    records = generate_annotations(w, 5, 10000)
    _, triples = kg.ingest_annotations(records, classes=w.class_names)
    near = triples.predicate_names.index("near")
    for cls, companion, prob, _ in w.context_rules:
        n_cls = sum(1 for r in records if r["class"] == w.class_names[cls])
        linked = triples.counts.get((cls, near, companion), 0)
        assert abs(linked / n_cls - prob) <= 0.02


def test_annotations_follow_the_record_schema():
    w = generate_world(WorldConfig(), 0)
    records = generate_annotations(w, 0, 3)
    assert records
    kg.parse_annotations([__import__("json").dumps(r) for r in records])
    assert all(r["class"] != "background" for r in records)


def test_rare_classes_are_the_lowest_weights():
    w = generate_world(WorldConfig(), 0)
    rare = w.rare_classes(0.25)
    assert 0 not in rare
    cutoff = max(w.frequency_weights[rare])
    others = [c for c in range(1, w.num_classes) if c not in rare]
    assert all(w.frequency_weights[c] >= cutoff for c in others)
