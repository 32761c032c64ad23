
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from idm import IGNORE_INDEX
from idm.datagen import (
    DomainShift,
    LabeledSample,
    SceneSpec,
    apply_domain_shift,
    generate_source,
    ingest_folder,
    make_domains,
    read_manifest,
    write_folder,
)
from idm.errors import ConfigurationError, IngestionError

SPEC = SceneSpec(width=64, height=64, num_classes=8, rng_seed=7)


def test_generation_is_deterministic():
    a = generate_source(SPEC, 1)[0]
    b = generate_source(SPEC, 1)[0]
    assert a.image.tobytes() == b.image.tobytes()
    assert a.label.tobytes() == b.label.tobytes()


def test_generation_order_does_not_matter():
    full = generate_source(SPEC, 5)
    tail = generate_source(SPEC, 2, start=3)
    assert np.array_equal(full[3].image, tail[0].image)
    assert np.array_equal(full[4].label, tail[1].label)


def test_empty_scene_is_all_background():
    s = generate_source(SceneSpec(shapes_per_image=0), 3)
    for sample in s:
        assert np.all(sample.label == 0)


def test_corpus_covers_every_class():
    corpus = generate_source(SPEC, 64)
    hist = np.bincount(np.concatenate([s.label.ravel() for s in corpus]), minlength=8)
    assert np.all(hist[:8] > 0)


def test_corpus_of_exactly_c_images_covers_every_class():
    corpus = generate_source(SPEC, 8)
    present = set(np.unique(np.concatenate([s.label.ravel() for s in corpus])))
    assert present == set(range(8))


def test_labels_match_colors():
    # every foreground pixel is close to its class's base color (shading is mild)
    from idm.datagen import class_color

    s = generate_source(SPEC, 4)
    for sample in s:
        for c in range(1, 8):
            m = sample.label == c
            if m.any():
                assert np.abs(sample.image[m].mean(axis=0) - class_color(c, 8)).max() < 0.12


@pytest.mark.parametrize(
    "bad",
    [dict(width=8), dict(height=15), dict(num_classes=1), dict(num_classes=33), dict(shapes_per_image=-1)],
)
def test_invalid_spec(bad):
    with pytest.raises(ConfigurationError):
        generate_source(SceneSpec(**bad), 1)


def test_n_must_be_positive():
    with pytest.raises(ConfigurationError):
        generate_source(SPEC, 0)


def test_identity_shift():
    s = generate_source(SPEC, 1)[0]
    out = apply_domain_shift(s, DomainShift(), seed=0)
    assert np.array_equal(out.image, s.image)
    assert np.array_equal(out.label, s.label)


def test_offset_on_constant_image():
    s = LabeledSample(np.full((16, 16, 3), 0.5, np.float32), np.zeros((16, 16), np.int64), "c")
    out = apply_domain_shift(s, DomainShift(mean_offset=(0.2, 0.2, 0.2)), seed=0)
    np.testing.assert_allclose(out.image, 0.7, atol=1e-6)


def test_non_positive_scale_rejected():
    s = generate_source(SPEC, 1)[0]
    with pytest.raises(ConfigurationError):
        apply_domain_shift(s, DomainShift(std_scale=(1.0, 0.0, 1.0)), seed=0)


@settings(max_examples=30, deadline=None)
@given(
    offset=st.lists(st.floats(-0.1, 0.1), min_size=3, max_size=3),
    scale=st.lists(st.floats(0.5, 1.0), min_size=3, max_size=3),
    seed=st.integers(0, 10_000),
)
def test_statistic_law_without_clamping(offset, scale, seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.25, 0.6, size=(16, 16, 3)).astype(np.float64)
    s = LabeledSample(img, np.zeros((16, 16), np.int64), "r")
    out = apply_domain_shift(s, DomainShift(tuple(offset), tuple(scale)), seed=seed)
    assert np.array_equal(out.label, s.label)
    np.testing.assert_allclose(out.image.mean(axis=(0, 1)), np.array(scale) * img.mean(axis=(0, 1)) + offset, atol=1e-6)
    np.testing.assert_allclose(out.image.std(axis=(0, 1)), np.array(scale) * img.std(axis=(0, 1)), atol=1e-6)


def test_shift_never_touches_labels():
    for s in generate_source(SPEC, 4):
        out = apply_domain_shift(s, DomainShift((0.5, -0.5, 0.3), (2.0, 0.3, 1.0), 0.2), seed=1)
        assert np.array_equal(out.label, s.label)
        assert out.image.min() >= 0 and out.image.max() <= 1


def test_make_domains_deterministic_and_disjoint():
    a = make_domains(SceneSpec(width=32, height=32), n_source=4, n_target_pool=2, n_target_test=2)
    b = make_domains(SceneSpec(width=32, height=32), n_source=4, n_target_pool=2, n_target_test=2)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a.target_test, b.target_test))
    assert not np.array_equal(a.source[0].label, a.target_pool[0].label)


# --- folder ingestion ---------------------------------------------------------


def test_ingest_empty_folder(tmp_path):
    assert ingest_folder(tmp_path, {}) == []
    (tmp_path / "images").mkdir()
    assert ingest_folder(tmp_path, {}) == []


def _write_pair(root, sid, image, label):
    (root / "images").mkdir(exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    Image.fromarray(image).save(root / "images" / f"{sid}.png")
    Image.fromarray(label).save(root / "labels" / f"{sid}.png")


def test_ingest_one_pair(tmp_path):
    img = np.zeros((20, 30, 3), np.uint8)
    lab = np.ones((20, 30), np.uint8)
    _write_pair(tmp_path, "a", img, lab)
    out = ingest_folder(tmp_path, {0: 0, 1: 1})
    assert len(out) == 1
    assert out[0].image.shape == (20, 30, 3)
    assert out[0].label.shape == (20, 30)
    assert np.all(out[0].label == 1)


def test_unknown_label_values_become_ignore(tmp_path):
    lab = np.zeros((10, 10), np.uint8)
    lab[0, 0], lab[3, 4], lab[9, 9] = 7, 9, 200
    _write_pair(tmp_path, "a", np.zeros((10, 10, 3), np.uint8), lab)
    out = ingest_folder(tmp_path, {0: 0, 1: 1})[0]
    assert np.count_nonzero(out.label == IGNORE_INDEX) == 3
    assert out.label[0, 0] == out.label[3, 4] == out.label[9, 9] == IGNORE_INDEX


def test_missing_label_names_file(tmp_path):
    (tmp_path / "images").mkdir()
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "images" / "lonely.png")
    with pytest.raises(IngestionError, match="lonely.png"):
        ingest_folder(tmp_path, {})


def test_size_mismatch(tmp_path):
    _write_pair(tmp_path, "a", np.zeros((10, 10, 3), np.uint8), np.zeros((10, 12), np.uint8))
    with pytest.raises(IngestionError, match="size mismatch"):
        ingest_folder(tmp_path, {0: 0})


def test_folder_round_trip(tmp_path):
    samples = generate_source(SceneSpec(width=32, height=32), 3)
    write_folder(samples, tmp_path, num_classes=8)
    manifest = read_manifest(tmp_path)
    assert manifest["ids"] == [s.id for s in samples]
    assert manifest["num_classes"] == 8 and manifest["height"] == 32
    back = ingest_folder(tmp_path, {c: c for c in range(8)})
    for a, b in zip(samples, back):
        assert np.array_equal(a.label, b.label)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6
