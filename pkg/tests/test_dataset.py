import numpy as np
import pytest

from pairseg.dataset import Sample, ShapesConfig, _gen_sample, gen_shapes
from pairseg.errors import ConfigError


def small_config(**kwargs):
    base = dict(image_size=16, classes=3, min_shapes=2, max_shapes=3,
                train_count=4, test_count=2, seed=7)
    base.update(kwargs)
    return ShapesConfig(**base)


class TestShapesConfig:
    def test_default_class_means_are_evenly_spaced(self):
        cfg = ShapesConfig()
        assert np.allclose(cfg.class_means(), np.linspace(0.1, 0.9, 4))

    def test_custom_intensities_are_used(self):
        cfg = small_config(intensities=(0.0, 0.4, 1.0))
        assert np.array_equal(cfg.class_means(), [0.0, 0.4, 1.0])

    @pytest.mark.parametrize("kwargs", [
        dict(classes=1),
        dict(image_size=4),
        dict(min_shapes=5, max_shapes=2),
        dict(min_shapes=-1),
        dict(train_count=0),
        dict(test_count=0),
        dict(intensities=(0.1, 0.9)),
        dict(noise_scale=-0.1),
    ])
    def test_bad_config_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            small_config(**kwargs)


class TestGenShapes:
    def test_shapes_and_dtypes(self):
        train, test = gen_shapes(small_config())
        assert len(train) == 4 and len(test) == 2
        for sample in train + test:
            assert isinstance(sample, Sample)
            assert sample.image.shape == (16, 16, 1)
            assert sample.image.dtype == np.float64
            assert sample.label.shape == (16, 16)
            assert sample.label.dtype == np.uint8

    def test_labels_in_range(self):
        cfg = small_config()
        train, test = gen_shapes(cfg)
        for sample in train + test:
            assert sample.label.max() < cfg.classes

    def test_every_foreground_class_present(self):
        # min_shapes >= classes-1, so shapes 1..C-1 are placed in order
        cfg = small_config(min_shapes=2, max_shapes=4, train_count=10)
        train, test = gen_shapes(cfg)
        for sample in train + test:
            counts = np.bincount(sample.label.reshape(-1), minlength=cfg.classes)
            assert (counts[1:] >= 6).all()

    def test_zero_shapes_gives_all_background(self):
        cfg = small_config(min_shapes=0, max_shapes=0)
        train, test = gen_shapes(cfg)
        for sample in train + test:
            assert not sample.label.any()

    def test_deterministic_across_calls(self):
        cfg = small_config()
        train_a, test_a = gen_shapes(cfg)
        train_b, test_b = gen_shapes(cfg)
        for a, b in zip(train_a + test_a, train_b + test_b):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.label, b.label)

    def test_seed_changes_data(self):
        train_a, _ = gen_shapes(small_config(seed=7))
        train_b, _ = gen_shapes(small_config(seed=8))
        assert any(
            not np.array_equal(a.label, b.label)
            for a, b in zip(train_a, train_b)
        )

    def test_per_index_streams_make_counts_independent(self):
        # growing the train split must not disturb earlier samples,
        # and the test split continues the same index sequence
        small = small_config(train_count=2, test_count=1)
        large = small_config(train_count=3, test_count=1)
        train_s, test_s = gen_shapes(small)
        train_l, _ = gen_shapes(large)
        for a, b in zip(train_s, train_l):
            assert np.array_equal(a.image, b.image)
        assert np.array_equal(test_s[0].image, train_l[2].image)

    def test_noiseless_image_matches_class_means(self):
        cfg = small_config(noise_scale=0.0, intensities=(0.2, 0.5, 0.8))
        train, _ = gen_shapes(cfg)
        means = cfg.class_means()
        for sample in train:
            flat_img = sample.image[:, :, 0]
            assert np.array_equal(flat_img, means[sample.label])

    def test_noise_perturbs_intensities(self):
        cfg = small_config(noise_scale=0.05, intensities=(0.2, 0.5, 0.8))
        train, _ = gen_shapes(cfg)
        means = cfg.class_means()
        sample = train[0]
        resid = sample.image[:, :, 0] - means[sample.label]
        assert resid.std() > 0.01
        assert abs(resid.mean()) < 0.05

    def test_single_sample_matches_split_entry(self):
        cfg = small_config()
        train, test = gen_shapes(cfg)
        assert np.array_equal(train[1].label, _gen_sample(cfg, 1).label)
        assert np.array_equal(
            test[0].label, _gen_sample(cfg, cfg.train_count).label
        )
