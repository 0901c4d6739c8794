import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structseg.eval import iop, miou
from structseg.synth import (
    DEFAULT_PALETTE,
    PYRAMID_SCALES,
    DegradeSpec,
    ObjectSpec,
    SceneSpec,
    analytic_area,
    boundary_training_pairs,
    degrade_to_cam,
    generate_scene,
    one_hot,
    shape_mask,
)


def scenes_equal(a, b):
    return (a.image.tobytes() == b.image.tobytes() and a.labels.tobytes() == b.labels.tobytes()
            and a.tags.tobytes() == b.tags.tobytes()
            and all(x.tobytes() == y.tobytes() for x, y in zip(a.features, b.features)))


def test_fixed_seed_is_bitwise_reproducible():
    spec = SceneSpec(height=48, width=40, num_objects=3, seed=17)
    assert scenes_equal(generate_scene(spec), generate_scene(spec))
    assert not scenes_equal(generate_scene(spec), generate_scene(SceneSpec(height=48, width=40, num_objects=3, seed=18)))


def test_scene_shapes():
    scene = generate_scene(SceneSpec(height=32, width=48, num_classes=3))
    assert scene.image.shape == (32, 48, 3) and scene.image.dtype == np.uint8
    assert scene.labels.shape == (32, 48) and scene.tags.shape == (3,)
    assert [f.shape for f in scene.features] == [(7, 32 // s, 48 // s) for s in PYRAMID_SCALES]


@pytest.mark.parametrize("shape", ["rectangle", "ellipse", "triangle"])
def test_single_object_iop_matches_area(shape):
    obj = ObjectSpec(shape, 2, 8, 4, 48, 56)
    scene = generate_scene(SceneSpec(height=64, width=64, num_classes=3, objects=(obj,)))
    np.testing.assert_array_equal(scene.tags, [0, 1, 0])
    assert iop(scene.labels, 4)[2] == pytest.approx(analytic_area(obj) / 64 ** 2, abs=0.01)


def test_zero_noise_gives_exact_colors():
    scene = generate_scene(SceneSpec(num_objects=3, noise_sigma=0.0, seed=4))
    palette = np.rint(np.asarray(DEFAULT_PALETTE) * 255).astype(np.uint8)
    np.testing.assert_array_equal(scene.image, palette[scene.labels])


@settings(max_examples=15)
@given(st.integers(0, 2**16))
def test_tags_match_present_classes(seed):
    scene = generate_scene(SceneSpec(num_objects=3, num_classes=4, seed=seed))
    present = set(np.unique(scene.labels)) - {0}
    assert {i + 1 for i in np.flatnonzero(scene.tags)} == present


def test_later_objects_occlude_earlier():
    objs = (ObjectSpec("rectangle", 1, 0, 0, 16, 16), ObjectSpec("rectangle", 2, 8, 8, 16, 16))
    labels = generate_scene(SceneSpec(objects=objs)).labels
    assert labels[10, 10] == 2 and labels[2, 2] == 1


def test_triangle_orientation():
    mask = shape_mask(ObjectSpec("triangle", 1, 0, 0, 8, 8), 8, 8)
    assert mask[7].sum() > mask[1].sum()
    np.testing.assert_array_equal(mask, mask[:, ::-1])


@pytest.mark.parametrize("kw", [{"width": 12}, {"num_objects": 0}, {"num_classes": 9}, {"noise_sigma": -1},
                                {"objects": (ObjectSpec("rectangle", 1, 20, 20, 16, 16),)},
                                {"objects": (ObjectSpec("hexagon", 1, 0, 0, 4, 4),)},
                                {"objects": (ObjectSpec("rectangle", 4, 0, 0, 4, 4),)}])
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        SceneSpec(**kw)


@pytest.mark.parametrize("kw", [{"keep_fraction": 0}, {"keep_fraction": 1.2}, {"blur_sigma": -1}, {"spurious_rate": 2}])
def test_invalid_degrade_specs(kw):
    with pytest.raises(ValueError):
        DegradeSpec(**kw)


def test_identity_degradation_is_one_hot():
    scene = generate_scene(SceneSpec(num_objects=3, seed=2))
    cam = degrade_to_cam(scene.labels, DegradeSpec(keep_fraction=1.0, blur_sigma=0, spurious_rate=0), 4)
    np.testing.assert_array_equal(cam, one_hot(scene.labels, 4))


def thresholded_miou(seeds, keep):
    preds, truths = [], []
    for s in seeds:
        labels = generate_scene(SceneSpec(num_objects=2, seed=s)).labels
        cam = degrade_to_cam(labels, DegradeSpec(keep_fraction=keep, seed=s), 4)
        preds.append(np.argmax(cam, axis=0))
        truths.append(labels)
    return miou(preds, truths, 4).miou


def test_partial_cams_score_lower():
    assert thresholded_miou(range(10), 0.35) < thresholded_miou(range(10), 1.0)


def test_spurious_activation_appears_on_background():
    labels = generate_scene(SceneSpec(num_objects=1, seed=3)).labels
    cam = degrade_to_cam(labels, DegradeSpec(spurious_rate=0.1, seed=3), 4)
    c = int(labels.max())
    assert (cam[c][labels != c] > 0.19).any()


@settings(max_examples=15)
@given(st.integers(0, 2**16))
def test_absent_classes_stay_silent(seed):
    labels = generate_scene(SceneSpec(num_objects=1, num_classes=3, seed=seed)).labels
    cam = degrade_to_cam(labels, DegradeSpec(seed=seed), 4)
    for c in range(1, 4):
        if not (labels == c).any():
            assert not cam[c].any()
    np.testing.assert_allclose(cam[0], 1 - cam[1:].max(axis=0), atol=1e-6)
    assert cam.min() >= 0 and cam.max() <= 1


def test_degrade_is_deterministic():
    labels = generate_scene(SceneSpec(seed=9)).labels
    a = degrade_to_cam(labels, DegradeSpec(seed=1))
    assert a.tobytes() == degrade_to_cam(labels, DegradeSpec(seed=1)).tobytes()


def test_training_pairs_use_consecutive_seeds():
    spec = SceneSpec(num_objects=1)
    pairs = boundary_training_pairs(2, spec, seed=5)
    scene = generate_scene(SceneSpec(num_objects=1, seed=6))
    np.testing.assert_array_equal(pairs[1][3], scene.tags)
    features, canny_map, target, _ = pairs[0]
    assert canny_map.shape == (1, 32, 32) and target.shape == (4, 32, 32)
