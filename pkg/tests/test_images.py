import numpy as np
import pytest

from psonet.data.images import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    ImageFormatError,
    assemble_region_set,
    denormalize_image,
    four_crop,
    normalize_image,
    read_rgb,
    recompose,
    set_capacity,
    write_rgb,
)
from psonet.pasi import Region


def test_zero_image_normalizes_to_constant():
    x = normalize_image(np.zeros((8, 8, 3), np.uint8))
    for c in range(3):
        np.testing.assert_allclose(x[c], -IMAGENET_MEAN[c] / IMAGENET_STD[c], rtol=1e-6)


def test_zero_crossing_at_channel_mean():
    raw = np.zeros((2, 2, 3), np.float64)
    raw[..., 1] = 255 * IMAGENET_MEAN[1]
    assert np.allclose(normalize_image(raw)[1], 0.0, atol=1e-6)


def test_wrong_channel_count():
    with pytest.raises(ImageFormatError):
        normalize_image(np.zeros((4, 4, 4), np.uint8))


def test_normalize_roundtrip():
    raw = np.random.default_rng(0).integers(0, 256, (6, 5, 3)).astype(np.uint8)
    np.testing.assert_allclose(denormalize_image(normalize_image(raw)), raw, atol=1e-3)


def test_four_crop_shapes_and_partition():
    x = np.random.default_rng(1).integers(0, 256, (224, 224, 3)).astype(np.uint8)
    crops = four_crop(x)
    assert [c.shape for c in crops] == [(112, 112, 3)] * 4
    np.testing.assert_array_equal(recompose(crops), x)
    np.testing.assert_array_equal(crops[1], x[:112, 112:])


def test_four_crop_constant_and_odd():
    crops = four_crop(np.full((10, 10, 3), 7, np.uint8))
    assert all(np.array_equal(c, crops[0]) for c in crops)
    with pytest.raises(ValueError):
        four_crop(np.zeros((9, 10, 3), np.uint8))


def _raw(k, size=(40, 40)):
    return np.full((*size, 3), 10 * k, np.uint8)


def test_full_hn_set():
    s = assemble_region_set([(i, _raw(i)) for i in range(12)], "HN", "low_res", (32, 32))
    assert s.capacity == 12 and s.n_valid == 12 and s.image_size == (32, 32)


def test_partial_set_is_padded_with_zeros():
    s = assemble_region_set([(i, _raw(i)) for i in range(5)], Region.HN, "low_res", (32, 32))
    assert s.capacity == 12 and s.n_valid == 5
    assert not s.images[5:].any()


def test_four_crop_capacity():
    s = assemble_region_set([(i, _raw(i)) for i in range(10)], "TR", "four_crop", (32, 32))
    assert s.capacity == 40 and s.n_valid == 40 and set_capacity("TR", "four_crop") == 40


def test_set_errors():
    with pytest.raises(ValueError, match="capacity"):
        assemble_region_set([(i % 10, _raw(1)) for i in range(11)], "TR", "low_res", (32, 32))
    with pytest.raises(ValueError, match="duplicate"):
        assemble_region_set([(0, _raw(1)), (0, _raw(2))], "TR", "low_res", (32, 32))
    with pytest.raises(ValueError, match="slot 10"):
        assemble_region_set([(10, _raw(1))], "TR", "low_res", (32, 32))


def test_png_roundtrip(tmp_path):
    raw = np.random.default_rng(2).integers(0, 256, (9, 7, 3)).astype(np.uint8)
    write_rgb(tmp_path / "a.png", raw)
    np.testing.assert_array_equal(read_rgb(tmp_path / "a.png"), raw)
