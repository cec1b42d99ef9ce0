import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from deformableformer.data import (AVAILABLE, CLASS_INDEX, UNAVAILABLE, DatasetManifest,
                                   ImageRecord, SyntheticError, SyntheticParams, augment,
                                   center_crop, channel_stats, generate_synthetic, hflip,
                                   load_and_resize, load_images, make_folds, read_rgb, rot90,
                                   vflip)


def manifest_of(n_avail, n_unavail):
    recs = [ImageRecord(f"a{i}", f"a{i}.png", AVAILABLE) for i in range(n_avail)]
    recs += [ImageRecord(f"u{i}", f"u{i}.png", UNAVAILABLE) for i in range(n_unavail)]
    return DatasetManifest(recs)


def red_area(path):
    return (read_rgb(path)[..., 0] > 127).mean()


class TestAugment:
    def test_cardinality(self, rng):
        img = rng.random((3, 8, 8))
        assert len(augment(img, AVAILABLE)) == 2
        assert len(augment(img, UNAVAILABLE)) == 9

    def test_first_variant_is_original(self, rng):
        img = rng.random((3, 8, 8))
        for label in (AVAILABLE, UNAVAILABLE):
            np.testing.assert_array_equal(augment(img, label)[0], img)

    def test_variants_keep_shape(self, rng):
        img = rng.random((3, 10, 10)).astype(np.float32)
        assert all(v.shape == img.shape for v in augment(img, UNAVAILABLE))

    @given(st.integers(1, 6), st.integers(0, 1000))
    def test_dihedral_identities(self, n, seed):
        img = np.random.default_rng(seed).random((2, n, n))
        np.testing.assert_array_equal(hflip(hflip(img)), img)
        np.testing.assert_array_equal(vflip(vflip(img)), img)
        np.testing.assert_array_equal(rot90(img, 4), img)
        np.testing.assert_array_equal(rot90(img, 2), hflip(vflip(img)))

    def test_rotation_direction(self):
        img = np.arange(4.0).reshape(1, 2, 2)
        np.testing.assert_array_equal(hflip(img)[0], [[1, 0], [3, 2]])
        np.testing.assert_array_equal(vflip(img)[0], [[2, 3], [0, 1]])

    def test_crop_of_constant(self):
        img = np.full((3, 20, 20), 0.3, np.float32)
        np.testing.assert_allclose(center_crop(img), img, atol=1e-6)

    def test_crop_zooms_centre(self):
        img = np.zeros((1, 20, 20), np.float32)
        img[0, :2] = 1.0  # a border stripe is cut away by an 80% crop
        assert center_crop(img)[0, 0].max() < 0.5

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            augment(rng.random((3, 4, 5)), AVAILABLE)
        with pytest.raises(ValueError):
            augment(rng.random((3, 4, 4)), "Maybe")


class TestFolds:
    def test_specimen_counts(self):
        m = make_folds(manifest_of(145, 28), 28, seed=0)
        sizes = Counter(len(m.fold(i)) for i in range(28))
        assert sizes == {6: 23, 7: 5}
        for i in range(28):
            assert sum(r.label == UNAVAILABLE for r in m.fold(i)) == 1

    def test_partition(self):
        m = make_folds(manifest_of(30, 12), 4, seed=3)
        seen = sorted(r.id for i in range(4) for r in m.fold(i))
        assert seen == sorted(r.id for r in m.records)
        for i in range(4):
            assert not {r.id for r in m.fold(i)} & {r.id for r in m.excluding(i)}

    def test_single_fold(self):
        m = make_folds(manifest_of(5, 5), 1)
        assert {r.fold for r in m.records} == {0}

    def test_deterministic(self):
        a = make_folds(manifest_of(20, 9), 3, seed=11)
        b = make_folds(manifest_of(20, 9), 3, seed=11)
        assert [r.fold for r in a.records] == [r.fold for r in b.records]
        c = make_folds(manifest_of(20, 9), 3, seed=12)
        assert [r.fold for r in a.records] != [r.fold for r in c.records]

    @given(st.integers(1, 40), st.integers(1, 15), st.data())
    def test_balance(self, na, nu, data):
        k = data.draw(st.integers(1, min(na, nu)))
        m = make_folds(manifest_of(na, nu), k, seed=0)
        sizes = [len(m.fold(i)) for i in range(k)]
        assert max(sizes) - min(sizes) <= 1
        for label in (AVAILABLE, UNAVAILABLE):
            per = [sum(r.label == label for r in m.fold(i)) for i in range(k)]
            assert max(per) - min(per) <= 1

    def test_unstratified(self):
        m = make_folds(manifest_of(7, 3), 5, stratified=False)
        assert sorted(len(m.fold(i)) for i in range(5)) == [2] * 5

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            make_folds(manifest_of(10, 3), k)


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = make_folds(manifest_of(4, 4), 2)
        m.save(tmp_path / "manifest.json")
        back = DatasetManifest.load(tmp_path / "manifest.json")
        assert back.records == m.records and back.k_folds == 2
        assert back.resolve(back.records[0]) == tmp_path / "a0.png"

    def test_array_layout(self, tmp_path):
        import json
        manifest_of(1, 1).save(tmp_path / "m.json")
        doc = json.loads((tmp_path / "m.json").read_text())
        assert isinstance(doc, list)
        assert set(doc[0]) == {"id", "path", "label", "fold"}

    def test_validation(self):
        with pytest.raises(ValueError):
            ImageRecord("x", "x.png", "available")
        with pytest.raises(ValueError):
            DatasetManifest([ImageRecord("x", "a", AVAILABLE), ImageRecord("x", "b", AVAILABLE)])
        with pytest.raises(ValueError):
            DatasetManifest([ImageRecord("x", "a", AVAILABLE, fold=2)], k_folds=2)

    def test_tie_breaks_to_unavailable(self):
        assert CLASS_INDEX[UNAVAILABLE] == 0 and CLASS_INDEX[AVAILABLE] == 1


class TestLoading:
    def test_identity_resize(self, tmp_path, rng):
        px = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        Image.fromarray(px).save(tmp_path / "a.png")
        x = load_and_resize(tmp_path / "a.png", (16, 16))
        assert x.shape == (1, 3, 16, 16) and x.dtype == np.float32
        np.testing.assert_array_equal(np.round(x[0].transpose(1, 2, 0) * 255), px)

    def test_uniform_gray(self, tmp_path):
        Image.new("RGB", (40, 30), (128, 128, 128)).save(tmp_path / "g.png")
        x = load_and_resize(tmp_path / "g.png", (16, 16))
        np.testing.assert_allclose(x, 128 / 255, atol=1e-6)

    def test_camera_resolution(self, tmp_path):
        Image.new("RGB", (4608, 3456), (10, 200, 30)).save(tmp_path / "big.jpg", quality=95)
        x = load_and_resize(tmp_path / "big.jpg", (1600, 1600))
        assert x.shape == (1, 3, 1600, 1600)
        np.testing.assert_allclose(x[0, :, 800, 800], np.array([10, 200, 30]) / 255, atol=0.02)

    def test_normalization(self, tmp_path):
        Image.new("RGB", (8, 8), (51, 102, 153)).save(tmp_path / "c.png")
        x = load_and_resize(tmp_path / "c.png", (8, 8), mean=[0.2, 0.4, 0.6], std=[1, 1, 1])
        np.testing.assert_allclose(x, 0, atol=1e-6)

    def test_non_rgb_rejected(self, tmp_path):
        Image.new("L", (8, 8)).save(tmp_path / "gray.png")
        with pytest.raises(ValueError):
            load_and_resize(tmp_path / "gray.png", (8, 8))

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(ValueError):
            read_rgb(tmp_path / "bad.png")

    def test_channel_stats(self):
        x = np.zeros((2, 3, 4, 4), np.float32)
        x[:, 1] = 1.0
        x[1, 2] = 2.0
        mean, std = channel_stats(x)
        assert mean == [0.0, 1.0, 1.0]
        assert std[2] == pytest.approx(1.0) and std[0] == pytest.approx(1e-6)


class TestSynthetic:
    def test_counts(self, synthetic_dir):
        m = DatasetManifest.load(synthetic_dir / "manifest.json")
        assert len(m.records) == 200
        assert Counter(r.label for r in m.records) == {AVAILABLE: 100, UNAVAILABLE: 100}
        assert load_images(m, m.records[:3]).shape == (3, 3, 64, 64)

    def test_byte_identical(self, tmp_path):
        p = SyntheticParams(n_per_class=5, seed=3)
        generate_synthetic(p, tmp_path / "a")
        generate_synthetic(p, tmp_path / "b")
        for f in sorted((tmp_path / "a" / "images").iterdir()):
            other = tmp_path / "b" / "images" / f.name
            assert hashlib.sha256(f.read_bytes()).digest() == \
                hashlib.sha256(other.read_bytes()).digest()
        assert (tmp_path / "a/manifest.json").read_bytes() == \
            (tmp_path / "b/manifest.json").read_bytes()

    def test_classes_separable_by_area(self, synthetic_dir):
        # independent oracle: fraction of reddish pixels
        m = DatasetManifest.load(synthetic_dir / "manifest.json")
        pos = np.mean([red_area(m.resolve(r)) for r in m.records if r.label == AVAILABLE])
        neg = np.mean([red_area(m.resolve(r)) for r in m.records if r.label == UNAVAILABLE])
        assert pos >= 2 * neg and pos > 0.02

    def test_negative_occupancy_budget(self, synthetic_dir):
        m = DatasetManifest.load(synthetic_dir / "manifest.json")
        for r in m.records:
            if r.label == UNAVAILABLE:
                assert red_area(m.resolve(r)) < 0.01

    @pytest.mark.parametrize("bad", [dict(object_radius_range=(5, 2)),
                                     dict(negative_occupancy_max=0.0),
                                     dict(n_per_class=0), dict(image_size=(4, 4))])
    def test_invalid_params(self, tmp_path, bad):
        with pytest.raises(SyntheticError):
            generate_synthetic(SyntheticParams(**bad), tmp_path)
