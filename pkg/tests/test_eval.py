"""Evaluator determinism, confidence intervals, and variation analysis."""
import numpy as np
import pytest

from fewrec import model as md
from fewrec.backbone import BackboneConfig
from fewrec.episodes import EpisodeSpec, SyntheticConfig, generate_synthetic
from fewrec.evaluate import (EvalReport, evaluate, stage_features,
                             variation_stats, variation_suite)


def bypass_model(seed=0, d=16, r=4, dtype="float32"):
    cfg = md.ModelConfig(feature_dim=d,
                         backbone=BackboneConfig(kind="bypass", channels=d,
                                                 feature_rows=r),
                         dtype=dtype)
    return md.init_model(np.random.default_rng(seed), cfg)


def dataset(sb=10.0, sw=1.0, seed=0, classes=12, rank=None, d=16):
    return generate_synthetic(SyntheticConfig(
        classes=classes, samples_per_class=10, rows=4, feature_dim=d,
        sigma_between=sb, sigma_within=sw, signal_rank=rank, seed=seed,
        split_ratios=(0.4, 0.3, 0.3)))


class TestEvaluate:
    def test_deterministic_per_seed(self):
        params = bypass_model()
        ds = dataset()
        spec = EpisodeSpec(way=3, shot=1, queries=4)
        a = evaluate(params, ds, spec, n_tasks=30, seed=5)
        b = evaluate(params, ds, spec, n_tasks=30, seed=5)
        np.testing.assert_array_equal(a.accuracies, b.accuracies)
        assert a.mean_accuracy == b.mean_accuracy

    def test_chance_level_when_no_signal(self):
        # with sigma_between ~ 0 there is nothing to classify by
        params = bypass_model()
        ds = dataset(sb=1e-4, sw=1.0)
        spec = EpisodeSpec(way=3, shot=1, queries=5)
        rep = evaluate(params, ds, spec, n_tasks=300, seed=7)
        assert abs(rep.mean_accuracy - 1 / 3) <= 3 * rep.ci95

    def test_accuracies_in_unit_interval(self):
        rep = evaluate(bypass_model(), dataset(), EpisodeSpec(3, 1, 4),
                       n_tasks=40, seed=1)
        assert (rep.accuracies >= 0).all() and (rep.accuracies <= 1).all()

    def test_ci_shrinks_with_sqrt_n(self):
        # quadrupling the task count should roughly halve the interval
        params = bypass_model(seed=3)
        ds = dataset(sb=2.0, sw=1.0, rank=3)
        spec = EpisodeSpec(way=3, shot=1, queries=5)
        small = evaluate(params, ds, spec, n_tasks=250, seed=11)
        large = evaluate(params, ds, spec, n_tasks=1000, seed=11)
        ratio = large.ci95 / small.ci95
        assert 0.4 <= ratio <= 0.6

    def test_invariant_to_order_preserving_rename(self):
        params = bypass_model(seed=4)
        ds = dataset(seed=9)
        renamed_samples = {f"z{name}": v for name, v in ds.samples.items()}
        renamed_splits = {f"z{name}": v for name, v in ds.splits.items()}
        ds2 = type(ds)(samples=renamed_samples, splits=renamed_splits,
                       mode=ds.mode)
        spec = EpisodeSpec(way=3, shot=1, queries=4)
        a = evaluate(params, ds, spec, n_tasks=25, seed=13)
        b = evaluate(params, ds2, spec, n_tasks=25, seed=13)
        np.testing.assert_array_equal(a.accuracies, b.accuracies)

    def test_csv_layout(self):
        rep = EvalReport(2, np.array([1.0, 0.5]), 0.75, 0.1, "full", 3)
        lines = rep.csv().strip().splitlines()
        assert lines[0] == "task_id,accuracy"
        assert lines[1] == "0,1"
        assert lines[-2] == "N,mean,ci95"
        assert lines[-1].startswith("2,0.75,")


class TestVariationStats:
    def test_identical_samples_ratio_zero(self):
        feats = {"a": np.ones((3, 4)), "b": np.zeros((3, 4))}
        rep = variation_stats(feats, "raw")
        assert rep.intra == 0.0
        assert rep.ratio == 0.0

    def test_two_point_classes_at_distance(self):
        # zero within-class noise, templates exactly D apart
        D = 3.0
        a = np.tile([0.0, 0.0], (2, 1))
        b = np.tile([D, 0.0], (2, 1))
        rep = variation_stats({"a": a, "b": b}, "raw")
        assert rep.intra == 0.0
        np.testing.assert_allclose(rep.inter, D ** 2, rtol=1e-12)

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(5)
        feats = {"a": rng.normal(size=(4, 6)), "b": rng.normal(size=(3, 6)),
                 "c": rng.normal(size=(5, 6))}
        rep = variation_stats(feats, "raw")
        intra, ni, inter, nx = 0.0, 0, 0.0, 0
        names = sorted(feats)
        for n in names:
            arr = feats[n]
            for i in range(len(arr)):
                for j in range(i + 1, len(arr)):
                    intra += ((arr[i] - arr[j]) ** 2).sum()
                    ni += 1
        for i1 in range(len(names)):
            for i2 in range(i1 + 1, len(names)):
                for x in feats[names[i1]]:
                    for y in feats[names[i2]]:
                        inter += ((x - y) ** 2).sum()
                        nx += 1
        np.testing.assert_allclose(rep.intra, intra / ni, rtol=1e-10)
        np.testing.assert_allclose(rep.inter, inter / nx, rtol=1e-10)

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(ValueError):
            variation_stats({"a": np.ones((3, 2))}, "raw")
        with pytest.raises(ValueError):
            variation_stats({"a": np.ones((1, 2)), "b": np.ones((3, 2))}, "raw")


class TestStageFeatures:
    def test_shapes_and_stages(self):
        params = bypass_model(seed=6)
        ds = dataset(seed=2)
        feats = stage_features(params, ds, "novel", way=3, shot=2, probes=4,
                               seed=21)
        assert sorted(feats) == ["post_fmrm", "post_fsrm", "raw"]
        for stage in feats:
            assert len(feats[stage]) == 3
            for arr in feats[stage].values():
                assert arr.shape == (4, 4 * 16)

    def test_same_class_reconstruction_tightens_clusters(self, tmp_path):
        # on a trained model, same-class reconstruction must produce a
        # strictly lower intra/inter ratio than cross-class reconstruction
        from fewrec.config import from_dict, build_dataset
        from fewrec.episodes import substream
        from fewrec.trainer import train
        cfg = from_dict({
            "seed": 77,
            "output_dir": str(tmp_path / "easy"),
            "dataset": {"kind": "synthetic", "classes": 16,
                        "samples_per_class": 16,
                        "split_ratios": [0.5, 0.25, 0.25],
                        "sigma_between": 10.0, "sigma_within": 1.0},
            "train": {"epochs": 8, "episodes_per_epoch": 25, "queries": 5,
                      "lr": 0.01, "eval_period": 4, "val_episodes": 20},
            "eval": {"way": 3, "shot": 3, "queries": 4, "n_tasks": 20},
        })
        ds = build_dataset(cfg)
        result = train(cfg, dataset=ds)
        params = md.init_model(substream(cfg.seed, "init"), cfg.model)
        md.load_model(result.best_path, params)
        same = variation_suite(params, ds, "novel", way=3, shot=3, probes=4,
                               seed=33)
        cross = variation_suite(params, ds, "novel", way=3, shot=3, probes=4,
                                seed=33, cross_class=True)
        same_ratio = {r.stage: r.ratio for r in same}["post_fmrm"]
        cross_ratio = {r.stage: r.ratio for r in cross}["post_fmrm"]
        assert same_ratio < cross_ratio

    def test_variation_csv_layout(self):
        params = bypass_model(seed=8)
        ds = dataset(seed=4)
        from fewrec.evaluate import variation_csv
        reports = variation_suite(params, ds, "novel", 3, 2, 3, seed=1)
        lines = variation_csv(reports).strip().splitlines()
        assert lines[0] == "stage,intra,inter,ratio"
        assert [l.split(",")[0] for l in lines[1:]] == ["raw", "post_fsrm",
                                                        "post_fmrm"]
