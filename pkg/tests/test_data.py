import numpy as np
import pytest

from pathvit.data import (
    Dataset,
    IngestionError,
    export_dataset,
    load_dataset,
    read_manifest,
    synthetic_gratings,
    write_manifest,
)

# sha256 over float32 images and int64 labels; changes whenever the generator does
GRATINGS_5000_SHA256 = "b7a2759d6a59005a59434c25e4b36a07339fdd5f070b96d0edf50f071dc3cd56"


@pytest.fixture
def exported(tmp_path):
    ds = synthetic_gratings(4, size=8, seed=3)
    return ds, export_dataset(ds, tmp_path / "set")


def test_four_sample_manifest(exported):
    ds, path = exported
    m = read_manifest(path)
    assert m.sample_count == 4 and m.splits() == ["train"]
    loaded = load_dataset(path)
    assert len(loaded) == 4
    assert np.array_equal(loaded.images, ds.images) and np.array_equal(loaded.labels, ds.labels)


def test_manifest_roundtrip_relative_root(exported, tmp_path):
    _, path = exported
    m = read_manifest(path)
    assert "root = .\n" in path.read_text()
    other = tmp_path / "elsewhere" / "manifest.txt"
    other.parent.mkdir()
    write_manifest(other, m)
    assert "root = ../set\n" in other.read_text()
    assert read_manifest(other).root == m.root


def test_normalization(tmp_path):
    ds = synthetic_gratings(3, size=8, seed=0)
    path = export_dataset(ds, tmp_path, mean=[0.5], std=[2.0])
    got = load_dataset(path).images
    assert np.allclose(got, (ds.images - 0.5) / 2.0, atol=1e-7)


def test_split_selection(tmp_path):
    ds = synthetic_gratings(3, size=8)
    path = export_dataset(ds, tmp_path, split="val")
    assert len(load_dataset(path, split="val")) == 3
    assert len(load_dataset(path, split="train")) == 0


def test_missing_file_named(exported):
    _, path = exported
    (path.parent / "train_000002.tensor").unlink()
    with pytest.raises(IngestionError, match="train_000002"):
        load_dataset(path)


def test_wrong_size_file_named(exported):
    _, path = exported
    f = path.parent / "train_000001.tensor"
    f.write_bytes(f.read_bytes() + b"\x00")
    with pytest.raises(IngestionError, match="train_000001"):
        load_dataset(path)


def test_corrupt_file_named(exported):
    _, path = exported
    f = path.parent / "train_000003.tensor"
    raw = bytearray(f.read_bytes())
    raw[:4] = b"XXXX"
    f.write_bytes(bytes(raw))
    with pytest.raises(IngestionError, match="train_000003"):
        load_dataset(path)


@pytest.mark.parametrize(
    "edit",
    [
        lambda t: t.replace("sample_count = 4", "sample_count = 5"),
        lambda t: t.replace("image_size = 8\n", ""),
        lambda t: t + "garbage line\n",
        lambda t: t.replace("version = 1", "version = 9"),
    ],
)
def test_malformed_manifest(exported, edit):
    _, path = exported
    path.write_text(edit(path.read_text()))
    with pytest.raises(IngestionError):
        read_manifest(path)


def test_label_out_of_range(exported):
    _, path = exported
    text = path.read_text().replace("num_classes = 2", "num_classes = 1")
    path.write_text(text)
    # the first sample carries label 1
    with pytest.raises(IngestionError, match="label 1"):
        load_dataset(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(IngestionError):
        read_manifest(tmp_path / "nope.txt")


def test_seeded_batch_order():
    ds = synthetic_gratings(50, size=8)
    a = [lab.tolist() for _, lab in ds.batches(16, seed=7, epoch=2)]
    b = [lab.tolist() for _, lab in ds.batches(16, seed=7, epoch=2)]
    c = [lab.tolist() for _, lab in ds.batches(16, seed=7, epoch=3)]
    assert a == b and a != c
    assert sorted(sum(a, [])) == sorted(ds.labels.tolist())


def test_unshuffled_batches_keep_order():
    ds = Dataset(np.zeros((5, 2, 2, 1), np.float32), np.arange(5), 5)
    assert [lab.tolist() for _, lab in ds.batches(2)] == [[0, 1], [2, 3], [4]]


def test_synthetic_checksum_frozen():
    ds = synthetic_gratings(5000)
    assert ds.images.shape == (5000, 32, 32, 1) and ds.images.dtype == np.float32
    assert set(np.unique(ds.labels)) == {0, 1}
    assert ds.checksum() == GRATINGS_5000_SHA256


def test_synthetic_seed_dependence():
    assert synthetic_gratings(16, seed=1).checksum() == synthetic_gratings(16, seed=1).checksum()
    assert synthetic_gratings(16, seed=1).checksum() != synthetic_gratings(16, seed=2).checksum()
