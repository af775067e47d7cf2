import numpy as np
import pytest

from condensenext import data as cifar
from condensenext.errors import DataError, FormatError, ParameterError


def _images(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)


def test_record_layout(tmp_path):
    imgs, labels = _images(3), np.array([7, 0, 9])
    path = tmp_path / "b.bin"
    cifar.write_batch_file(path, imgs, labels)
    raw = path.read_bytes()
    assert len(raw) == 3 * 3073
    assert raw[3073] == 0 and raw[1:1025] == imgs[0, 0].tobytes()
    assert raw[1025:2049] == imgs[0, 1].tobytes()
    recs = cifar.load_batch_file(path)
    assert [r.label for r in recs] == [7, 0, 9]
    assert all(np.array_equal(r.pixels, i) for r, i in zip(recs, imgs))


def test_empty_file(tmp_path):
    path = tmp_path / "e.bin"
    path.write_bytes(b"")
    assert cifar.load_batch_file(path) == []


def test_short_file_is_truncated_record_at_zero(tmp_path):
    path = tmp_path / "s.bin"
    path.write_bytes(bytes(3072))
    with pytest.raises(FormatError) as info:
        cifar.load_batch_file(path)
    assert info.value.offset == 0


def test_partial_trailing_record(tmp_path):
    path = tmp_path / "p.bin"
    path.write_bytes(cifar.encode_records(_images(2), [1, 2]) + b"\x03" * 10)
    with pytest.raises(FormatError) as info:
        cifar.load_batch_file(path)
    assert info.value.offset == 2 * 3073


def test_invalid_label_offset(tmp_path):
    path = tmp_path / "l.bin"
    path.write_bytes(cifar.encode_records(_images(3), [1, 10, 2]))
    with pytest.raises(FormatError) as info:
        cifar.load_batch_file(path)
    assert info.value.offset == 3073


def test_missing_directory_files(tmp_path):
    with pytest.raises(DataError):
        cifar.load_cifar_dir(tmp_path)


def test_load_dir(tmp_path):
    for i, name in enumerate(cifar.TRAIN_FILES + (cifar.TEST_FILE,)):
        cifar.write_batch_file(tmp_path / name, _images(4, i), np.arange(4) + i)
    train, test = cifar.load_cifar_dir(tmp_path)
    assert len(train) == 20 and len(test) == 4 and list(test.labels) == [5, 6, 7, 8]


def test_normalize_mean_pixel_is_near_zero():
    px = np.stack([np.full((32, 32), round(m * 255)) for m in cifar.CIFAR_MEAN]).astype(np.uint8)
    out = cifar.normalize(px).data
    assert out.shape == (3, 32, 32) and out.dtype == np.float32
    assert np.abs(out).max() < 0.01
    # 125 / 255 against a mean of 0.4914
    assert abs(out[0, 0, 0] - (125 / 255 - 0.4914) / 0.2470) < 1e-6


def test_denormalize_round_trip():
    imgs = _images(5)
    assert np.array_equal(cifar.denormalize(cifar.normalize_array(imgs)), imgs)


def test_augment_shift_and_flip():
    img = _images(1)[0]
    seed = next(s for s in range(1000) if cifar.augment_params(s) == (4, 4, False))
    assert np.allclose(cifar.augment(img, seed).data, cifar.normalize(img).data)
    seed = next(s for s in range(1000) if cifar.augment_params(s) == (4, 4, True))
    assert np.allclose(cifar.augment(img, seed).data, cifar.normalize(img).data[:, :, ::-1])
    seed = next(s for s in range(1000) if cifar.augment_params(s) == (0, 0, False))
    out = cifar.denormalize(cifar.augment(img, seed))
    assert np.array_equal(out[:, 4:, 4:], img[:, :28, :28])


def test_flip_is_an_involution():
    img = _images(1)[0]
    s = next(s for s in range(1000) if cifar.augment_params(s) == (4, 4, True))
    once = cifar.denormalize(cifar.augment(img, s))
    assert np.array_equal(cifar.denormalize(cifar.augment(once, s)), img)


def test_augment_is_deterministic_and_unbiased():
    img = _images(1)[0]
    assert np.array_equal(cifar.augment(img, 11).data, cifar.augment(img, 11).data)
    draws = np.array([cifar.augment_params(s) for s in range(10_000)])
    assert abs(draws[:, 0].mean() - 4) < 0.1 and abs(draws[:, 1].mean() - 4) < 0.1
    assert abs(draws[:, 2].mean() - 0.5) < 0.02
    assert set(np.unique(draws[:, 0])) == set(range(9))


def test_subset_stratified_and_deterministic():
    labels = np.repeat(np.arange(10), 50)
    idx = cifar.subset(labels, 103, seed=4)
    assert idx.size == 103 and np.unique(idx).size == 103
    counts = np.bincount(labels[idx], minlength=10)
    assert list(counts) == [11, 11, 11] + [10] * 7
    assert np.array_equal(idx, cifar.subset(labels, 103, seed=4))
    assert not np.array_equal(idx, cifar.subset(labels, 103, seed=5))


def test_subset_errors():
    labels = np.repeat(np.arange(10), 5)
    with pytest.raises(ParameterError):
        cifar.subset(labels, 51, 0)
    with pytest.raises(ParameterError):
        cifar.subset(np.zeros(50, int), 20, 0)


def test_synthetic_data_is_balanced():
    d = cifar.synthetic_cifar(200, 0)
    assert d.images.shape == (200, 3, 32, 32) and list(d.class_counts()) == [20] * 10
