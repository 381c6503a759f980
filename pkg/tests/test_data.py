import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ldprecon.core import SeededRng
from ldprecon.data import (BACKGROUND_MAX, SUBJECT_MIN, ExternalFileMask, ImageBatch,
                           LuminanceThresholdMask, OracleMask, SubjectSpec, extract_subject,
                           gen_synthetic_batch, load_ppm, make_mask_provider, read_mask,
                           read_ppm, save_ppm, write_ppm)
from ldprecon.exceptions import MaskingError, ParseError, ShapeError


def test_generator_is_deterministic_and_quantized():
    a = gen_synthetic_batch(SeededRng(3), 8, 3, 16, 16)
    b = gen_synthetic_batch(SeededRng(3), 8, 3, 16, 16)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_allclose(a.images * 255, np.round(a.images * 255), atol=1e-9)


def test_generator_labels_balanced_and_subject_separated():
    batch = gen_synthetic_batch(SeededRng(0), 16, 3, 16, 16)
    assert np.bincount(batch.labels, minlength=4).tolist() == [4, 4, 4, 4]
    m = batch.masks[:, 0].astype(bool)
    for img, mask in zip(batch.images, m):
        assert img[:, mask].min() >= SUBJECT_MIN - 1e-9
        assert img[:, ~mask].max() <= BACKGROUND_MAX + 1 / 255


def test_subject_spec_restricts_shapes():
    batch = gen_synthetic_batch(SeededRng(1), 6, 1, 12, 12, SubjectSpec(shapes=("disk",)))
    assert set(batch.labels.tolist()) <= {0, 1}


def test_generator_rejects_bad_geometry():
    with pytest.raises(ShapeError):
        gen_synthetic_batch(SeededRng(0), 1, 2, 8, 8)


def test_image_batch_validation():
    with pytest.raises(ValueError):
        ImageBatch(np.full((1, 1, 8, 8), 1.5), [0])
    with pytest.raises(ShapeError):
        ImageBatch(np.zeros((2, 1, 8, 8)), [0])


def test_extract_subject_zeroes_background():
    batch = gen_synthetic_batch(SeededRng(2), 4, 3, 8, 8)
    masked = extract_subject(batch)
    assert np.all(masked.images[np.broadcast_to(masked.masks == 0, masked.images.shape)] == 0)
    keep = np.broadcast_to(masked.masks == 1, batch.images.shape)
    np.testing.assert_array_equal(masked.images[keep], batch.images[keep])


def test_luminance_mask_and_failure():
    batch = gen_synthetic_batch(SeededRng(4), 4, 3, 16, 16)
    m = LuminanceThresholdMask(0.4).transform(batch)
    agree = (m == batch.masks).mean()
    assert agree > 0.95
    with pytest.raises(MaskingError) as info:
        LuminanceThresholdMask(1.0).transform(batch)
    assert info.value.index == 0


def test_oracle_mask_requires_masks():
    batch = gen_synthetic_batch(SeededRng(0), 2, 1, 8, 8)
    with pytest.raises(MaskingError):
        OracleMask().transform(ImageBatch(batch.images, batch.labels))


def test_external_file_mask(tmp_path):
    batch = gen_synthetic_batch(SeededRng(0), 2, 3, 8, 8)
    paths = []
    for i in range(2):
        p = tmp_path / f"m{i}.pgm"
        save_ppm(p, batch.masks[i])
        paths.append(p)
    np.testing.assert_array_equal(ExternalFileMask(paths).transform(batch), batch.masks)
    with pytest.raises(MaskingError):
        ExternalFileMask(paths[:1]).transform(batch)


def test_make_mask_provider():
    assert make_mask_provider("luminance-threshold", threshold=0.2).threshold == 0.2
    assert make_mask_provider("oracle").get_params() == {}
    with pytest.raises(ValueError):
        make_mask_provider("sam")


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 3]), st.integers(1, 9), st.integers(1, 9), st.data())
def test_ppm_round_trip(c, h, w, data):
    levels = data.draw(arrays(np.int64, (c, h, w), elements=st.integers(0, 255)))
    img = levels / 255.0
    back = read_ppm(write_ppm(img))
    np.testing.assert_array_equal(np.round(back * 255).astype(int), levels)


def test_ppm_header_comments_and_files(tmp_path):
    data = b"P5\n# comment\n2 1\n# another\n255\n\x00\xff"
    np.testing.assert_array_equal(read_ppm(data), [[[0.0, 1.0]]])
    np.testing.assert_array_equal(read_mask(data), [[[0.0, 1.0]]])
    img = np.random.default_rng(0).integers(0, 256, (3, 4, 5)) / 255
    save_ppm(tmp_path / "x.ppm", img)
    np.testing.assert_allclose(load_ppm(tmp_path / "x.ppm"), img)


@pytest.mark.parametrize("data", [b"P3\n1 1\n255\n\x00", b"P5\n1 1\n", b"P5\n2 2\n255\n\x00",
                                  b"P5\nx 1\n255\n\x00", b"P5\n1 1\n0\n\x00"])
def test_ppm_malformed(data):
    with pytest.raises(ParseError):
        read_ppm(data)


def test_mask_file_values():
    with pytest.raises(ParseError):
        read_mask(b"P5\n1 1\n255\n\x10")
    with pytest.raises(ParseError):
        read_mask(write_ppm(np.zeros((3, 2, 2))))


def test_write_rejects_out_of_range():
    with pytest.raises(ValueError):
        write_ppm(np.full((1, 2, 2), 1.2))
    with pytest.raises(ShapeError):
        write_ppm(np.zeros((2, 2, 2)))
