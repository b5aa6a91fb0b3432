import numpy as np
import pytest
from scipy import ndimage

from osteoscreen.dataio import (
    HAND_CLASSES,
    SEGMENTS,
    AnnotatedImage,
    Dataset,
    extract_patches,
    hand_to_annotated,
    label_from_tscore,
    load_image,
    random_patches,
    read_pgm,
    save_image,
    split_subjects,
    synth_ambiguous,
    synth_hand,
    to_canvas,
    write_pgm,
)
from osteoscreen.errors import ContractError, DimensionError


def test_extract_single_bone_bbox():
    image = np.random.default_rng(0).random((10, 10))
    mask = np.zeros((10, 10), dtype=int)
    mask[2:6, 3:7] = 1
    (patch,) = extract_patches(image, mask, pad=2)
    assert patch.segment_id == "ulna"
    assert patch.bbox == (0, 1, 8, 8)
    outside = np.ones((10, 10), dtype=bool)
    outside[2:6, 3:7] = False
    assert np.all(patch.crop[outside[0:8, 1:9]] == 0.0)
    np.testing.assert_array_equal(patch.crop[2:6, 2:6], image[2:6, 3:7])


def test_extract_empty_mask():
    assert extract_patches(np.ones((5, 5)), np.zeros((5, 5), dtype=int)) == []


def test_extract_dimension_error():
    with pytest.raises(DimensionError):
        extract_patches(np.ones((5, 5)), np.zeros((4, 5), dtype=int))


def test_extract_full_hand_gives_seven_masked_patches():
    sample = synth_hand(1, 64, np.random.default_rng(2))[0]
    patches = extract_patches(sample.image, sample.mask, subject_id=sample.subject_id)
    assert [p.segment_id for p in patches] == list(SEGMENTS)
    for cls, p in enumerate(patches, start=1):
        r, c, h, w = p.bbox
        inside = sample.mask[r:r + h, c:c + w] == cls
        assert np.all(p.crop[~inside] == 0.0)
        assert p.subject_id == sample.subject_id


def test_bbox_clipped_to_bounds():
    mask = np.zeros((6, 6), dtype=int)
    mask[0:2, 4:6] = 3
    (patch,) = extract_patches(np.ones((6, 6)), mask, pad=2)
    assert patch.bbox == (0, 2, 4, 4)


def test_label_from_tscore():
    assert label_from_tscore(-3.0) == 1
    assert label_from_tscore(-2.5) == 0
    assert label_from_tscore(0.0) == 0
    for bad in (float("nan"), float("inf")):
        with pytest.raises(ContractError):
            label_from_tscore(bad)


def test_split_hundred():
    ids = [f"s{i}" for i in range(100)]
    train, val, test = split_subjects(ids, 0)
    assert (len(train), len(val), len(test)) == (80, 10, 10)
    assert set(train) | set(val) | set(test) == set(ids)
    assert not (set(train) & set(val) or set(train) & set(test) or set(val) & set(test))


@pytest.mark.parametrize("n", [10, 14, 15, 25, 37])
def test_split_rounding(n):
    train, val, test = split_subjects(range(n), 3)
    expect = int(np.floor(0.1 * n + 0.5))
    assert len(val) == len(test) == expect
    assert len(train) == n - 2 * expect


def test_split_determinism_and_errors():
    ids = list(range(50))
    assert split_subjects(ids, 1) == split_subjects(ids, 1)
    assert split_subjects(ids, 1) != split_subjects(ids, 2)
    with pytest.raises(ContractError):
        split_subjects(range(9), 0)


def test_ambiguous_single_mode_identical():
    for item in synth_ambiguous(5, 32, 1, rng=np.random.default_rng(0)):
        assert item.annotations.shape == (1, 32, 32)
        assert item.weights.tolist() == [1.0]


def test_ambiguous_two_modes_differ_on_contiguous_region():
    for item in synth_ambiguous(50, 32, 2, [0.5, 0.5], np.random.default_rng(1)):
        diff = item.annotations[0] != item.annotations[1]
        labelled, count = ndimage.label(diff)
        assert count == 1
        assert diff.mean() >= 0.05


def test_ambiguous_three_modes_nested():
    item = synth_ambiguous(1, 32, 3, rng=np.random.default_rng(2))[0]
    sizes = item.annotations.reshape(3, -1).sum(axis=1)
    assert sizes[0] < sizes[1] < sizes[2]


def test_generators_deterministic():
    a = synth_ambiguous(4, 32, 2, rng=np.random.default_rng(5))
    b = synth_ambiguous(4, 32, 2, rng=np.random.default_rng(5))
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.annotations, y.annotations)
    h1 = synth_hand(3, 48, np.random.default_rng(5))
    h2 = synth_hand(3, 48, np.random.default_rng(5))
    for x, y in zip(h1, h2):
        assert np.array_equal(x.image, y.image) and x.t_score == y.t_score


def test_hand_masks_have_all_classes():
    for s in synth_hand(30, 48, np.random.default_rng(6)):
        assert set(np.unique(s.mask)) == set(range(HAND_CLASSES))
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_hand_prevalence():
    labels = [s.label for s in synth_hand(1000, 48, np.random.default_rng(7))]
    assert abs(np.mean(labels) - 0.285) < 0.05


def test_hand_texture_carries_label():
    # pore darkening inside bone should separate the classes on average
    samples = synth_hand(300, 48, np.random.default_rng(8))
    bone_mean = np.array([s.image[s.mask > 0].mean() for s in samples])
    labels = np.array([s.label for s in samples])
    assert bone_mean[labels == 1].mean() < bone_mean[labels == 0].mean()


def test_hand_requires_size():
    with pytest.raises(ContractError):
        synth_hand(1, 32)


def test_annotated_image_contracts():
    with pytest.raises(ContractError):
        AnnotatedImage(np.zeros((2, 2)), np.zeros((2, 2, 2), dtype=int), [0.5, 0.6], "x")
    with pytest.raises(DimensionError):
        AnnotatedImage(np.zeros((2, 2)), np.zeros((1, 3, 2), dtype=int), [1.0], "x")


def test_pgm_roundtrip(tmp_path):
    arr8 = np.arange(12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", arr8)
    data, maxval = read_pgm(tmp_path / "a.pgm")
    assert maxval == 255 and np.array_equal(data, arr8)
    arr16 = np.array([[0, 300], [65535, 1]])
    write_pgm(tmp_path / "b.pgm", arr16)
    raw = (tmp_path / "b.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n65535\n")
    assert raw[-8:-6] == b"\x00\x00" and raw[-6:-4] == b"\x01\x2c"
    assert np.array_equal(read_pgm(tmp_path / "b.pgm")[0], arr16)


def test_image_quantisation(tmp_path):
    img = np.random.default_rng(0).random((5, 7))
    save_image(tmp_path / "i.pgm", img)
    assert np.max(np.abs(load_image(tmp_path / "i.pgm") - img)) <= 0.5 / 65535 + 1e-15


def test_dataset_roundtrip(tmp_path):
    items = synth_ambiguous(3, 32, 2, rng=np.random.default_rng(0))
    ds = Dataset.write(tmp_path, items, "ambiguous", 2, {"train": ["amb00000", "amb00001"], "val": [], "test": ["amb00002"]})
    again = Dataset(tmp_path)
    assert again.ids() == ["amb00000", "amb00001", "amb00002"]
    item = again.annotated("amb00001")
    assert np.array_equal(item.annotations, items[1].annotations)
    np.testing.assert_allclose(item.weights, [0.5, 0.5])
    assert ds.num_classes == 2


def test_hand_to_annotated_meta():
    s = synth_hand(1, 48, np.random.default_rng(1))[0]
    item = hand_to_annotated(s)
    assert item.meta["label"] == s.label and item.meta["subject_id"] == s.subject_id


def test_to_canvas_and_random_patches():
    crop = np.ones((10, 4))
    canvas = to_canvas(crop, 20)
    assert canvas.shape == (20, 20)
    assert canvas[:, :6].sum() == 0.0 and canvas[:, -6:].sum() == 0.0
    patches = random_patches(np.ones((30, 30)), 7, 12, np.random.default_rng(0))
    assert len(patches) == 7 and all(p.crop.shape == (12, 12) for p in patches)
