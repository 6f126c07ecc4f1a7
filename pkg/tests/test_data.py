import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochdepth.data import (
    AugmentConfig,
    Dataset,
    DatasetError,
    augment_minibatch,
    holdout_split,
    load_image_csv,
    make_spirals,
    standardize,
)
from stochdepth.tensor import RngStream, Stream


def rng(seed=0, stream=Stream.DATA):
    return RngStream(seed, stream)


def test_spirals_size_and_balance():
    ds = make_spirals(100, 3, 0.1, rng())
    assert ds.inputs.shape == (300, 2)
    assert np.bincount(ds.labels).tolist() == [100, 100, 100]
    assert ds.count("train") == 300


def test_noiseless_spirals_are_nearest_neighbor_separable():
    ds = make_spirals(100, 2, 0.0, rng())
    d = np.linalg.norm(ds.inputs[:, None] - ds.inputs[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert np.array_equal(ds.labels[d.argmin(axis=1)], ds.labels)


def test_spirals_deterministic():
    a = make_spirals(50, 3, 0.2, rng(4))
    b = make_spirals(50, 3, 0.2, rng(4))
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.inputs.tobytes() != make_spirals(50, 3, 0.2, rng(5)).inputs.tobytes()


def test_spirals_need_two_classes():
    with pytest.raises(DatasetError):
        make_spirals(10, 1, 0.0, rng())


def write(tmp_path, text):
    p = tmp_path / "imgs.csv"
    p.write_text(text)
    return p


def test_csv_single_row(tmp_path):
    ds = load_image_csv(write(tmp_path, "3,0,255,51,102\n"), (1, 2, 2))
    assert ds.inputs.shape == (1, 1, 2, 2)
    assert ds.inputs[0, 0].tolist() == [[0.0, 1.0], [0.2, 0.4]]
    assert ds.labels.tolist() == [3]


@pytest.mark.parametrize(
    "text, row",
    [
        ("1,2,3\n", 1),
        ("1,0,0,0,0\n2,0,0,x,0\n", 2),
        ("1,0,0,0,0\n1,0,0,0,0\n12,0,0,0,0\n", 3),
        ("1,0,0,0,300\n", 1),
        ("1,0,0,0,0,0\n", 1),
    ],
)
def test_csv_errors_name_the_row(tmp_path, text, row):
    with pytest.raises(DatasetError, match=f"row {row}:"):
        load_image_csv(write(tmp_path, text), (1, 2, 2))


def test_standardize_train_statistics():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(40, 3, 4, 4))
    x[:, 2] = 7.0
    ds, mean, std = standardize(Dataset.from_arrays(x, np.zeros(40), 2))
    xt = ds.inputs
    assert np.all(np.abs(xt[:, :2].mean(axis=(0, 2, 3))) < 1e-10)
    assert np.all(np.abs(xt[:, :2].std(axis=(0, 2, 3)) - 1) < 1e-10)
    assert not xt[:, 2].any()
    assert mean.shape == std.shape == (3,)


def test_standardize_uses_train_split_only():
    x = np.concatenate([np.random.default_rng(1).normal(size=(20, 2)), np.full((5, 2), 10.0)])
    splits = np.array(["train"] * 20 + ["val"] * 5)
    ds, _, _ = standardize(Dataset(x, np.zeros(25, dtype=int), 2, splits))
    xv, _ = ds.split("val")
    assert np.all(xv.mean(axis=0) > 5)


def test_standardize_needs_train():
    with pytest.raises(DatasetError):
        standardize(Dataset.from_arrays(np.ones((3, 2)), [0, 1, 0], 2, split="test"))


def test_augment_disabled_is_no_op():
    b = np.random.default_rng(0).normal(size=(4, 3, 5, 5))
    out = augment_minibatch(b, AugmentConfig(), rng(0, Stream.AUGMENT))
    assert out is b


def test_flip_mirrors_rows():
    img = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    seen = set()
    r = rng(0, Stream.AUGMENT)
    for _ in range(40):
        seen.add(tuple(augment_minibatch(img, AugmentConfig(hflip=True), r).ravel()))
    assert seen == {(1, 2, 3, 4), (2, 1, 4, 3)}


def crops(img, t):
    padded = np.pad(img[0, 0], t)
    h, w = img.shape[2:]
    return {tuple(padded[dy:dy + h, dx:dx + w].ravel()) for dy, dx in itertools.product(range(2 * t + 1), repeat=2)}


def sample_outcomes(img, t, seed, n=300):
    r = rng(seed, Stream.AUGMENT)
    return {tuple(augment_minibatch(img, AugmentConfig(translate_pixels=t), r).ravel()) for _ in range(n)}


def test_translate_hot_pixel():
    img = np.zeros((1, 1, 2, 2))
    img[0, 0, 0, 0] = 1.0
    # four offsets keep the pixel, the other five push it out
    expected = crops(img, 1)
    assert len(expected) == 5 and (0.0,) * 4 in expected
    assert sample_outcomes(img, 1, 1) == expected


def test_translate_hits_all_nine_offsets():
    img = np.arange(1.0, 5.0).reshape(1, 1, 2, 2)
    expected = crops(img, 1)
    assert len(expected) == 9
    assert sample_outcomes(img, 1, 2) == expected


@settings(max_examples=30, deadline=None)
@given(st.booleans(), st.integers(0, 3), st.integers(0, 1000))
def test_augment_preserves_shape(hflip, t, seed):
    b = np.random.default_rng(seed).normal(size=(3, 2, 4, 4))
    out = augment_minibatch(b, AugmentConfig(hflip, t), rng(seed, Stream.AUGMENT))
    assert out.shape == b.shape
    if not (hflip or t):
        assert out is b


def test_augment_rejects_large_translation():
    with pytest.raises(ValueError):
        augment_minibatch(np.zeros((1, 1, 3, 3)), AugmentConfig(translate_pixels=3), rng())
    with pytest.raises(ValueError):
        AugmentConfig(translate_pixels=-1)


@pytest.mark.parametrize("n, frac, val", [(50_000, 0.1, 5000), (10, 0.2, 2)])
def test_holdout_sizes(n, frac, val):
    ds = Dataset.from_arrays(np.zeros((n, 1)), np.zeros(n), 1)
    out = holdout_split(ds, frac, rng())
    assert out.count("val") == val and out.count("train") == n - val


def test_holdout_deterministic_and_leaves_test_alone():
    x = np.arange(30.0)[:, None]
    splits = np.array(["train"] * 20 + ["test"] * 10)
    ds = Dataset(x, np.zeros(30, dtype=int), 1, splits)
    a = holdout_split(ds, 0.25, rng(3))
    b = holdout_split(ds, 0.25, rng(3))
    assert np.array_equal(a.splits, b.splits)
    assert np.all(a.splits[20:] == "test")


@pytest.mark.parametrize("frac", [0.0, 1.0, 0.01])
def test_holdout_rejects_empty_side(frac):
    with pytest.raises(DatasetError):
        holdout_split(Dataset.from_arrays(np.zeros((10, 1)), np.zeros(10), 1), frac, rng())


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        Dataset.from_arrays(np.zeros((3, 1)), [0, 1, 2], 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1)), np.zeros(2, dtype=int), 1, np.array(["train", "dev"]))
