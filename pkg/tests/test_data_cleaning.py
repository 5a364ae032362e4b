import numpy as np
import pytest

from data_cleaning import (load_image, load_label, normalize_image, remap_labels, resize_image, resize_mask,
                           save_image, save_label)
from errors import DataIntegrityError


def test_normalize_integer_images():
    raw = np.array([[0, 255], [128, 51]], dtype=np.uint8)
    out = normalize_image(raw, 8)
    assert out.dtype == np.float32
    assert out[0, 0] == 0.0 and out[0, 1] == 1.0
    assert abs(out[1, 1] - 0.2) < 1e-6

    wide = np.array([[0, 65535]], dtype=np.uint16)
    assert normalize_image(wide, 16).tolist() == [[0.0, 1.0]]


def test_normalize_rejects_nan():
    with pytest.raises(DataIntegrityError):
        normalize_image(np.array([[0.1, np.nan]]))


def test_remap_both_encodings():
    canonical = np.array([[0, 1], [2, 3]], dtype=np.uint8)
    assert np.array_equal(remap_labels(canonical), canonical)
    assert np.array_equal(remap_labels(canonical * 85), canonical)
    with pytest.raises(DataIntegrityError):
        remap_labels(np.array([[0, 7]]))


def test_resize_keeps_mask_classes():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[8:24, 8:24] = 2
    mask[12:20, 12:20] = 1
    small = resize_mask(mask, (16, 16))
    assert small.shape == (16, 16)
    assert set(np.unique(small).tolist()) == {0, 1, 2}

    image = np.full((32, 32), 0.25, dtype=np.float32)
    assert np.allclose(resize_image(image, (8, 8)), 0.25, atol=1e-6)


def test_save_and_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(12, 10)).astype(np.float32)
    path = save_image(tmp_path / 'img.png', image)
    loaded, bit_depth = load_image(path)
    assert bit_depth == 16
    assert np.abs(loaded - image).max() <= 1.0 / 65535

    mask = rng.integers(0, 4, size=(12, 10)).astype(np.uint8)
    assert np.array_equal(load_label(save_label(tmp_path / 'gt.png', mask)), mask)
    assert load_label(tmp_path / 'gt.png', (6, 5)).shape == (6, 5)
