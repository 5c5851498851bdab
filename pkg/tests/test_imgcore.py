"""Container validation, resizing, and dataset round-trips."""

import numpy as np
import pytest

from latseg import imgcore
from latseg.errors import DataError
from latseg.imgcore import Image, Mask, PairSample, SoftMask


def _img(h=8, w=8, seed=0):
    return Image(np.random.default_rng(seed).random((h, w, 3)))


class TestContainers:
    def test_image_rejects_bad_shape(self):
        with pytest.raises(DataError):
            Image(np.zeros((8, 8)))
        with pytest.raises(DataError):
            Image(np.zeros((8, 8, 4)))

    def test_image_rejects_out_of_range(self):
        with pytest.raises(DataError):
            Image(np.full((4, 4, 3), 1.5))
        with pytest.raises(DataError):
            Image(np.full((4, 4, 3), -0.1))

    def test_image_data_is_frozen(self):
        img = _img()
        with pytest.raises((ValueError, RuntimeError)):
            img.data[0, 0, 0] = 0.5

    def test_mask_rejects_non_binary(self):
        with pytest.raises(DataError):
            Mask(np.full((4, 4), 2, dtype=np.uint8))

    def test_mask_foreground_count(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[0, :2] = 1
        assert Mask(m).foreground_count() == 2

    def test_softmask_binarize(self):
        sm = SoftMask(np.array([[0.2, 0.8], [0.5, 0.51]]))
        out = np.asarray(sm.binarize(0.5).data)
        assert out.tolist() == [[0, 1], [0, 1]]

    def test_pair_sample_shape_mismatch(self):
        with pytest.raises(DataError):
            PairSample(id="x", image=_img(8, 8), shifted=_img(8, 10))


class TestGrayscaleAndComponents:
    def test_grayscale_weights(self):
        img = Image(np.ones((2, 2, 3)))
        assert np.allclose(imgcore.to_grayscale(img), 1.0)

    def test_components_four_connectivity(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[0, 0] = 1
        m[1, 1] = 1  # diagonal: separate component
        m[2, 2] = m[2, 3] = 1
        comps = imgcore.connected_components(Mask(m))
        assert sorted(len(c) for c in comps) == [1, 1, 2]

    def test_components_sorted_largest_first(self):
        m = np.zeros((4, 8), dtype=np.uint8)
        m[0, :5] = 1
        m[3, :2] = 1
        comps = imgcore.connected_components(Mask(m))
        assert [len(c) for c in comps] == [5, 2]


class TestResize:
    def test_bilinear_identity(self):
        data = np.random.default_rng(1).random((6, 6))
        out = imgcore.bilinear_resize(data, 6, 6)
        assert np.allclose(out, data)

    def test_bilinear_constant(self):
        out = imgcore.bilinear_resize(np.full((3, 5), 0.25), 7, 11)
        assert np.allclose(out, 0.25)

    def test_center_crop_resize_shape(self):
        img = _img(10, 16)
        out = imgcore.center_crop_resize(img, 8)
        assert (out.height, out.width) == (8, 8)

    def test_resize_shorter_side(self):
        img = _img(8, 16)
        out = imgcore.resize_shorter_side(img, 4)
        assert out.height == 4 and out.width == 8


class TestDataset:
    def test_save_load_roundtrip(self, tmp_path, small_source):
        samples = [small_source.fetch(i) for i in range(3)]
        imgcore.save_pair_dataset(samples, tmp_path / "ds")
        man = imgcore.load_manifest(tmp_path / "ds")
        assert man.ids() == [s.id for s in samples]
        again = man.load_sample(0)
        # png quantizes to 1/255 steps
        assert np.abs(np.asarray(again.image.data)
                      - np.asarray(samples[0].image.data)).max() <= 1 / 255.0 + 1e-12
        assert np.array_equal(np.asarray(again.gt_mask.data),
                              np.asarray(samples[0].gt_mask.data))

    def test_duplicate_ids_rejected(self, tmp_path, small_source):
        s = small_source.fetch(0)
        with pytest.raises(DataError):
            imgcore.save_pair_dataset([s, s], tmp_path / "dup")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            imgcore.load_manifest(tmp_path / "nope")

    def test_malformed_manifest(self, tmp_path):
        d = tmp_path / "bad"
        d.mkdir()
        (d / "manifest.json").write_text("{not json")
        with pytest.raises(DataError):
            imgcore.load_manifest(d)

    def test_dataset_source_pool(self, tmp_path, small_source):
        samples = [small_source.fetch(i) for i in range(4)]
        man = imgcore.save_pair_dataset(samples, tmp_path / "src")
        src = imgcore.PairDatasetSource(man)
        assert src.pool_size == 4
        assert not src.unbounded
        assert src.fetch(2).id == samples[2].id
