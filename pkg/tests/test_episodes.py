"""Splits, episode sampling, synthetic generation, and image ingestion."""
import numpy as np
import pytest

from fewrec import episodes as ep


def feature_dataset(classes=10, per_class=8, split="novel"):
    samples = {f"c{i:02d}": np.full((per_class, 1, 2), i * 100.0)
               + np.arange(per_class)[:, None, None]
               for i in range(classes)}
    return ep.Dataset(samples=samples,
                      splits={name: split for name in samples},
                      mode="features")


class TestMakeSplits:
    def test_floor_remainder_to_novel(self):
        names = [f"c{i}" for i in range(10)]
        splits = ep.make_splits(names, (0.5, 0.25, 0.25), seed=0)
        counts = {s: sum(1 for v in splits.values() if v == s) for s in ep.SPLITS}
        assert counts == {"base": 5, "val": 2, "novel": 3}

    def test_same_seed_identical(self):
        names = [f"c{i}" for i in range(17)]
        a = ep.make_splits(names, (0.4, 0.3, 0.3), seed=7)
        b = ep.make_splits(names, (0.4, 0.3, 0.3), seed=7)
        assert a == b

    def test_exhaustive_and_disjoint_over_seeds(self):
        names = [f"c{i}" for i in range(13)]
        for seed in range(100):
            splits = ep.make_splits(names, (0.5, 0.25, 0.25), seed=seed)
            assert sorted(splits) == sorted(names)  # every class exactly once
            assert set(splits.values()) <= set(ep.SPLITS)

    def test_bad_ratios(self):
        with pytest.raises(ep.DatasetError):
            ep.make_splits(list("abcdef"), (0.5, 0.5, 0.5), seed=0)
        with pytest.raises(ep.DatasetError):
            ep.make_splits(list("abcdef"), (1.0, -0.5, 0.5), seed=0)

    def test_too_few_classes(self):
        with pytest.raises(ep.DatasetError):
            ep.make_splits(["a", "b"], (0.34, 0.33, 0.33), seed=0)


class TestSampleEpisode:
    def test_one_shot_fifteen_query_counts(self):
        # 5-way 1-shot with 15 queries per class: 5 support, 75 query
        ds = feature_dataset(classes=8, per_class=20)
        spec = ep.EpisodeSpec(way=5, shot=1, queries=15)
        episode = ep.sample_episode(spec, ds, np.random.default_rng(0))
        assert episode.support_x.shape[0] == 5
        assert episode.query_x.shape[0] == 75

    def test_five_shot_counts(self):
        ds = feature_dataset(classes=8, per_class=20)
        spec = ep.EpisodeSpec(way=5, shot=5, queries=2)
        episode = ep.sample_episode(spec, ds, np.random.default_rng(0))
        assert episode.support_x.shape[0] == 25
        np.testing.assert_array_equal(np.bincount(episode.support_y)[1:],
                                      [5] * 5)

    def test_support_query_disjoint(self):
        # every sample value is unique, so overlap would show as equal rows
        ds = feature_dataset(classes=6, per_class=8)
        spec = ep.EpisodeSpec(way=4, shot=3, queries=4)
        for seed in range(25):
            episode = ep.sample_episode(spec, ds, np.random.default_rng(seed))
            sup = {v.tobytes() for v in episode.support_x}
            qry = {v.tobytes() for v in episode.query_x}
            assert not sup & qry
            assert len(sup) == 12 and len(qry) == 16

    def test_local_labels_bijection(self):
        ds = feature_dataset(classes=7, per_class=6)
        spec = ep.EpisodeSpec(way=5, shot=1, queries=1)
        episode = ep.sample_episode(spec, ds, np.random.default_rng(3))
        assert len(set(episode.class_ids)) == 5
        assert sorted(set(episode.support_y)) == [1, 2, 3, 4, 5]

    def test_insufficient_samples(self):
        ds = feature_dataset(classes=5, per_class=3)
        with pytest.raises(ep.SamplingError):
            ep.sample_episode(ep.EpisodeSpec(way=3, shot=2, queries=2), ds,
                              np.random.default_rng(0))

    def test_too_few_classes(self):
        ds = feature_dataset(classes=3)
        with pytest.raises(ep.SamplingError):
            ep.sample_episode(ep.EpisodeSpec(way=5, shot=1, queries=1), ds,
                              np.random.default_rng(0))

    def test_class_frequency_uniform(self):
        # every class frequency must fall within 3 standard errors of C/n
        ds = feature_dataset(classes=10, per_class=4)
        spec = ep.EpisodeSpec(way=3, shot=1, queries=1)
        rng = np.random.default_rng(42)
        counts = {name: 0 for name in ds.classes()}
        n_episodes = 10_000
        for _ in range(n_episodes):
            for name in ep.sample_episode(spec, ds, rng).class_ids:
                counts[name] += 1
        p = spec.way / len(counts)
        se = np.sqrt(p * (1 - p) / n_episodes)
        for name, count in counts.items():
            assert abs(count / n_episodes - p) < 3 * se, name


class TestSyntheticGeneration:
    def test_zero_noise_identical_samples(self):
        cfg = ep.SyntheticConfig(classes=6, samples_per_class=5, sigma_within=0.0,
                                 seed=3)
        ds = ep.generate_synthetic(cfg)
        for name in ds.classes():
            stack = ds.samples[name]
            np.testing.assert_array_equal(stack, np.tile(stack[:1], (5, 1, 1)))

    def test_nearest_centroid_oracle_on_separable_data(self):
        cfg = ep.SyntheticConfig(classes=8, samples_per_class=10,
                                 sigma_between=20.0, sigma_within=1.0, seed=4)
        ds = ep.generate_synthetic(cfg)
        names = ds.classes()
        centroids = np.stack([ds.samples[n][:5].mean(0).ravel() for n in names])
        hits = total = 0
        for ci, name in enumerate(names):
            for probe in ds.samples[name][5:]:
                dists = ((centroids - probe.ravel()) ** 2).sum(1)
                hits += int(dists.argmin() == ci)
                total += 1
        assert hits == total

    def test_fixed_seed_bit_exact(self):
        cfg = ep.SyntheticConfig(seed=11)
        a, b = ep.generate_synthetic(cfg), ep.generate_synthetic(cfg)
        assert a.splits == b.splits
        for name in a.classes():
            np.testing.assert_array_equal(a.samples[name], b.samples[name])

    def test_signal_rank_confines_templates(self):
        cfg = ep.SyntheticConfig(classes=4, samples_per_class=3, rows=2,
                                 feature_dim=16, signal_rank=2,
                                 sigma_within=0.0, seed=5)
        ds = ep.generate_synthetic(cfg)
        rows = np.concatenate([ds.samples[n][0] for n in ds.classes()])
        rank = np.linalg.matrix_rank(rows, tol=1e-8)
        assert rank <= 2

    def test_image_mode_shapes_and_range(self):
        cfg = ep.SyntheticConfig(classes=4, samples_per_class=3, mode="images",
                                 image_size=16, sigma_between=0.3,
                                 sigma_within=0.05, seed=6)
        ds = ep.generate_synthetic(cfg)
        stack = ds.samples[ds.classes()[0]]
        assert stack.shape == (3, 3, 16, 16)
        assert stack.min() >= 0.0 and stack.max() <= 1.0

    def test_bad_config(self):
        with pytest.raises(ep.DatasetError):
            ep.SyntheticConfig(sigma_between=-1.0)
        with pytest.raises(ep.DatasetError):
            ep.SyntheticConfig(signal_rank=100, feature_dim=64)


class TestManifestAndImageFolder:
    def make_folder(self, tmp_path, classes=("ca", "cb", "cc"), n=3, size=12):
        from PIL import Image
        rng = np.random.default_rng(0)
        for name in classes:
            d = tmp_path / "data" / name
            d.mkdir(parents=True)
            for i in range(n):
                arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
                Image.fromarray(arr).save(d / f"{i}.png")
        manifest = tmp_path / "splits.tsv"
        manifest.write_text("ca\tbase\ncb\tval\ncc\tnovel\n")
        return tmp_path / "data", manifest

    def test_load_and_resize(self, tmp_path):
        root, manifest = self.make_folder(tmp_path)
        ds = ep.load_image_folder(root, manifest, image_size=8)
        assert ds.mode == "images"
        assert ds.samples["ca"].shape == (3, 3, 8, 8)
        assert ds.samples["ca"].min() >= 0.0 and ds.samples["ca"].max() <= 1.0
        assert ds.classes("val") == ["cb"]

    def test_manifest_missing_class_dir(self, tmp_path):
        root, manifest = self.make_folder(tmp_path)
        manifest.write_text("ca\tbase\ncb\tval\nmissing\tnovel\n")
        with pytest.raises(ep.DatasetError):
            ep.load_image_folder(root, manifest, image_size=8)

    def test_unreadable_image(self, tmp_path):
        root, manifest = self.make_folder(tmp_path)
        (root / "ca" / "broken.png").write_bytes(b"not an image")
        with pytest.raises(ep.DatasetError):
            ep.load_image_folder(root, manifest, image_size=8)

    def test_manifest_errors(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("ca base novel\n")
        with pytest.raises(ep.DatasetError):
            ep.load_manifest(bad)
        bad.write_text("ca\tnowhere\n")
        with pytest.raises(ep.DatasetError):
            ep.load_manifest(bad)
        bad.write_text("ca\tbase\nca\tval\n")
        with pytest.raises(ep.DatasetError):
            ep.load_manifest(bad)
        bad.write_text("")
        with pytest.raises(ep.DatasetError):
            ep.load_manifest(bad)


class TestAugmentation:
    def test_values_stay_in_range(self):
        rng = np.random.default_rng(0)
        batch = rng.uniform(size=(6, 3, 8, 8))
        out = ep.augment_images(batch, np.random.default_rng(1))
        assert out.shape == batch.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_given_stream(self):
        batch = np.random.default_rng(2).uniform(size=(4, 3, 8, 8))
        a = ep.augment_images(batch, np.random.default_rng(3))
        b = ep.augment_images(batch, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)


class TestSubstream:
    def test_named_streams_independent_and_stable(self):
        a1 = ep.substream(5, "alpha").standard_normal(4)
        a2 = ep.substream(5, "alpha").standard_normal(4)
        b = ep.substream(5, "beta").standard_normal(4)
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, b)
