import numpy as np
import pytest

from conftest import SMALL_IMAGE
from fedretina.config import GRADE_MIX
from fedretina.data_utils import (
    Dataset,
    LabeledImage,
    SplitSpec,
    augment,
    concat_datasets,
    counts_for_size,
    degrade_dataset,
    degrade_quality,
    generate_synthetic,
    ingest,
    kfold,
    oversample_balance,
    prepare_institution,
    read_fimg,
    read_ppm,
    render_fundus,
    split,
    write_dataset,
    write_fimg,
    write_ppm,
)
from fedretina.errors import (
    ConfigError,
    EmptyDatasetError,
    ImbalanceError,
    IngestionError,
    StratificationError,
    UsageError,
)
from fedretina.image_utils import IDENTITY_POLICY, AugmentPolicy, DegradeSpec, GaussianFilterSpec, psnr


def indexed_dataset(per_class):
    """Dataset whose pixels encode each item's position, so splits can be traced back."""
    labels = np.repeat(np.arange(5), per_class)
    n = len(labels)
    pixels = np.broadcast_to((np.arange(n) / n)[:, None, None, None], (n, 2, 2, 3))
    return Dataset(pixels, labels, "indexed")


def positions(dataset, n):
    return np.rint(dataset.pixels[:, 0, 0, 0] * n).astype(int)


def test_dataset_is_read_only():
    data = indexed_dataset([2] * 5)
    with pytest.raises(ValueError):
        data.pixels[0, 0, 0, 0] = 1.0
    assert data.class_counts().tolist() == [2] * 5


def test_dataset_rejects_bad_labels():
    with pytest.raises(UsageError):
        Dataset(np.zeros((2, 2, 2, 3)), [0, 5], "bad")


def test_generate_synthetic_counts_and_determinism():
    a = generate_synthetic([3, 1, 0, 2, 1], SMALL_IMAGE, seed=9)
    b = generate_synthetic([3, 1, 0, 2, 1], SMALL_IMAGE, seed=9)
    assert a.class_counts().tolist() == [3, 1, 0, 2, 1]
    assert a.image_shape == (SMALL_IMAGE, SMALL_IMAGE, 3)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0


@pytest.mark.parametrize("counts,size,error", [
    ([1, 1, 1, 1], 32, ConfigError),
    ([1, 1, 1, 1, 1], 16, ConfigError),
    ([0, 0, 0, 0, 0], 32, EmptyDatasetError),
])
def test_generate_synthetic_validation(counts, size, error):
    with pytest.raises(error):
        generate_synthetic(counts, size, seed=0)


def test_counts_for_size():
    assert counts_for_size(650, [0.2] * 5) == [130] * 5
    counts = counts_for_size(1500, GRADE_MIX)
    assert sum(counts) == 1500
    assert counts[0] == 675


def test_split_is_a_stratified_partition():
    data = indexed_dataset([20] * 5)
    train, validation, test = split(data, SplitSpec(seed=3))
    assert (len(train), len(validation), len(test)) == (81, 9, 10)
    assert test.class_counts().tolist() == [2] * 5
    assert validation.class_counts().tolist() == [2, 2, 2, 2, 1]
    seen = np.concatenate([positions(part, len(data)) for part in (train, validation, test)])
    assert sorted(seen.tolist()) == list(range(len(data)))


def test_split_depends_only_on_seed():
    data = indexed_dataset([20] * 5)
    first = split(data, SplitSpec(seed=3))
    again = split(data, SplitSpec(seed=3))
    other = split(data, SplitSpec(seed=4))
    n = len(data)
    assert positions(first[2], n).tolist() == positions(again[2], n).tolist()
    assert positions(first[2], n).tolist() != positions(other[2], n).tolist()


def test_split_needs_enough_items():
    with pytest.raises(StratificationError):
        split(indexed_dataset([1] * 5), SplitSpec())
    with pytest.raises(StratificationError, match="too small"):
        split(indexed_dataset([5, 5, 5, 5, 1]), SplitSpec())


def test_kfold_covers_every_item_once():
    data = indexed_dataset([6, 7, 5, 8, 5])
    folds = kfold(data, 5, seed=1)
    assert len(folds) == 5
    held_out = np.concatenate([positions(validation, len(data)) for _, validation in folds])
    assert sorted(held_out.tolist()) == list(range(len(data)))
    for train, validation in folds:
        assert len(train) + len(validation) == len(data)
        assert np.all(validation.class_counts() >= 1)


def test_kfold_limits():
    data = indexed_dataset([3, 3, 3, 3, 2])
    with pytest.raises(UsageError):
        kfold(data, 1, seed=0)
    with pytest.raises(StratificationError):
        kfold(data, 3, seed=0)


def test_oversample_balances_and_keeps_originals(synthetic_small):
    skewed = synthetic_small.subset(np.flatnonzero(synthetic_small.labels != 4).tolist()
                                    + np.flatnonzero(synthetic_small.labels == 4)[:3].tolist())
    balanced = oversample_balance(skewed, AugmentPolicy(), seed=2)
    assert balanced.class_counts().tolist() == [12] * 5
    np.testing.assert_array_equal(balanced.pixels[:len(skewed)], skewed.pixels)
    added = balanced.sources[len(skewed):]
    assert np.all(skewed.labels[added] == balanced.labels[len(skewed):])
    again = oversample_balance(skewed, AugmentPolicy(), seed=2)
    np.testing.assert_array_equal(again.pixels, balanced.pixels)


def test_oversample_is_a_no_op_when_balanced(synthetic_small):
    assert oversample_balance(synthetic_small, AugmentPolicy(), seed=0) is synthetic_small


def test_oversample_needs_every_class():
    with pytest.raises(ImbalanceError):
        oversample_balance(indexed_dataset([3, 3, 0, 3, 3]), AugmentPolicy(), seed=0)


def test_prepare_institution_balances_training_only(synthetic_small):
    data = prepare_institution(synthetic_small, seed=4, filter_spec=GaussianFilterSpec(enabled=False))
    counts = data.train.class_counts()
    assert np.all(counts == counts.max())
    assert len(data.validation) + len(data.test) > 0
    assert data.name == "small"


def test_concat_skips_empty_parts():
    a = indexed_dataset([2] * 5)
    merged = concat_datasets([a, a.subset([])], "merged")
    assert len(merged) == 10
    with pytest.raises(EmptyDatasetError):
        concat_datasets([a.subset([])], "empty")


def test_write_then_ingest(tmp_path, synthetic_small):
    part = synthetic_small.subset(range(6))
    write_dataset(part, tmp_path / "site")
    loaded = ingest(tmp_path / "site", image_size=SMALL_IMAGE)
    assert loaded.labels.tolist() == part.labels.tolist()
    assert loaded.provenance == "ingested"
    np.testing.assert_allclose(loaded.pixels, part.pixels, atol=0.5 / 255 + 1e-6)


def write_manifest(root, rows):
    (root / "labels.csv").write_text("filename,label\n" + "".join(f"{f},{l}\n" for f, l in rows))


def test_ingest_errors_name_the_row(tmp_path, synthetic_small):
    write_dataset(synthetic_small.subset(range(2)), tmp_path)
    write_manifest(tmp_path, [("00000.ppm", 0), ("00001.ppm", 7)])
    with pytest.raises(IngestionError, match="row 3") as info:
        ingest(tmp_path, image_size=SMALL_IMAGE)
    assert info.value.row == 3

    write_manifest(tmp_path, [("00000.ppm", "two")])
    with pytest.raises(IngestionError, match="not an integer"):
        ingest(tmp_path, image_size=SMALL_IMAGE)

    write_manifest(tmp_path, [("00000.ppm", 0), ("missing.ppm", 1)])
    with pytest.raises(IngestionError, match="missing file"):
        ingest(tmp_path, image_size=SMALL_IMAGE)

    (tmp_path / "images" / "scan.png").write_bytes(b"")
    write_manifest(tmp_path, [("scan.png", 1)])
    with pytest.raises(IngestionError, match="unsupported"):
        ingest(tmp_path, image_size=SMALL_IMAGE)


def test_ingest_bad_header(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "images" / "a.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    write_manifest(tmp_path, [("a.ppm", 0)])
    with pytest.raises(IngestionError, match="row 2.*P6"):
        ingest(tmp_path)


def test_ingest_empty_manifest(tmp_path):
    (tmp_path / "labels.csv").write_text("filename,label\n")
    with pytest.raises(EmptyDatasetError):
        ingest(tmp_path)


def test_ppm_sixteen_bit(tmp_path):
    values = np.array([0, 65535, 32768], dtype=">u2")
    path = tmp_path / "deep.ppm"
    path.write_bytes(b"P6\n# comment\n1 1\n65535\n" + values.tobytes())
    np.testing.assert_allclose(read_ppm(path)[0, 0], [0.0, 1.0, 32768 / 65535], rtol=1e-6)


def test_ppm_short_body(tmp_path):
    path = tmp_path / "short.ppm"
    path.write_bytes(b"P6\n2 2\n255\n\x00\x00")
    with pytest.raises(IngestionError, match="pixel bytes"):
        read_ppm(path)


def test_fimg(tmp_path, rng):
    pixels = rng.random((4, 5, 3)).astype(np.float32)
    write_fimg(tmp_path / "a.fimg", pixels)
    np.testing.assert_array_equal(read_fimg(tmp_path / "a.fimg"), pixels)
    gray = rng.random((4, 5, 1)).astype(np.float32)
    write_fimg(tmp_path / "g.fimg", gray)
    assert read_fimg(tmp_path / "g.fimg").shape == (4, 5, 3)
    (tmp_path / "bad.fimg").write_bytes(b"FIMG" + b"\x00" * 4)
    with pytest.raises(IngestionError):
        read_fimg(tmp_path / "bad.fimg")


def test_grade_zero_has_no_bright_lesions():
    for i in range(20):
        pixels = render_fundus(64, 0, np.random.default_rng([5, i]))
        assert pixels.mean(axis=-1).max() < 0.8


def test_augment_keeps_label_and_shape(synthetic_small, rng):
    policy = AugmentPolicy(flip_prob=1.0, rotate_prob=1.0, brightness_contrast_prob=1.0)
    for item in synthetic_small.subset(range(10)):
        out = augment(item, policy, rng)
        assert (out.label, out.source) == (item.label, item.source)
        assert out.pixels.shape == item.pixels.shape
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
    item = synthetic_small[0]
    np.testing.assert_array_equal(augment(item, IDENTITY_POLICY, rng).pixels, item.pixels)


def test_degrade_quality_draws_within_range(monkeypatch, synthetic_small):
    drawn = []

    def record(pixels, quality):
        drawn.append(quality)
        return pixels

    monkeypatch.setattr("fedretina.data_utils.jpeg_roundtrip", record)
    item = LabeledImage(synthetic_small.pixels[0], 3, source=4)
    rng = np.random.default_rng(0)
    for _ in range(500):
        out = degrade_quality(item, DegradeSpec(30, 50), rng)
        assert (out.label, out.source) == (3, 4)
    assert min(drawn) == 30 and max(drawn) == 50


def test_degrade_dataset(synthetic_small):
    degraded = degrade_dataset(synthetic_small, DegradeSpec(5, 10), seed=3)
    again = degrade_dataset(synthetic_small, DegradeSpec(5, 10), seed=3)
    assert degraded.labels.tolist() == synthetic_small.labels.tolist()
    assert degraded.pixels.shape == synthetic_small.pixels.shape
    assert degraded.provenance == "derived"
    np.testing.assert_array_equal(degraded.pixels, again.pixels)
    assert all(psnr(a, b) < 40.0 for a, b in zip(synthetic_small.pixels, degraded.pixels))
    with pytest.raises(ConfigError):
        degrade_dataset(synthetic_small, DegradeSpec(60, 40), seed=3)


def test_ingest_resizes_large_ppm(tmp_path, rng):
    raw = rng.integers(0, 256, size=(128, 128, 3)).astype(np.float64) / 255.0
    (tmp_path / "images").mkdir()
    write_ppm(tmp_path / "images" / "big.ppm", raw)
    write_manifest(tmp_path, [("big.ppm", 2)])
    loaded = ingest(tmp_path, image_size=64)
    assert loaded.pixels.shape == (1, 64, 64, 3)
    assert loaded.pixels.min() >= 0.0 and loaded.pixels.max() <= 1.0
    box_average = raw.reshape(64, 2, 64, 2, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(loaded.pixels[0], box_average, atol=1e-6)
