import numpy as np
import pytest
from scipy import stats

from mmhar.core import SourceMeta, ValidationError, read_clip_archive
from mmhar.evaluation import coral
from mmhar.ingest import read_manifest, standardize_clip
from mmhar.synth import (
    SPEED_OF_LIGHT,
    MotionPrimitive,
    SourceProfile,
    check_nyquist,
    clip_feature_vector,
    default_primitives,
    default_profiles,
    doppler_shift,
    generate_benchmark,
    generate_clip,
    radial_velocity,
)


def quiet_profile(**kw):
    base = dict(
        meta=SourceMeta("synth_t", 77.0e9, 30.0),
        range_m=1.5,
        density_scale=400.0,
        noise_sigma_xyz=1e-9,
        noise_sigma_doppler=1e-9,
        doppler_quantization=0.05,
    )
    base.update(kw)
    return SourceProfile(**base)


class TestDopplerFormula:
    def test_zero_velocity(self):
        assert doppler_shift(0.0, 77e9) == 0.0

    def test_one_meter_per_second_at_77ghz(self):
        expected = 2.0 * 1.0 * 77e9 / 299792458.0
        got = float(doppler_shift(1.0, 77e9))
        assert abs(got - expected) < 1e-9
        assert round(got, 2) == 513.69

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        v = rng.uniform(-5, 5, size=50)
        for f_c in (60.5e9, 62e9, 77e9):
            back = radial_velocity(doppler_shift(v, f_c), f_c)
            assert np.abs(back - v).max() < 1e-12

    def test_speed_of_light_constant(self):
        assert SPEED_OF_LIGHT == 299792458.0


class TestGenerateClip:
    def test_static_primitive_zero_doppler_before_noise(self):
        prim = MotionPrimitive("frozen", (0.0, 0.0, 0.0, 0.0), 1.0, (0.0,) * 4, 0.5)
        _, _, truth = generate_clip(prim, quiet_profile(), seed=0, return_truth=True)
        assert np.abs(truth).max() == 0.0

    def test_doppler_equals_analytic_within_quantization(self):
        prim = default_primitives()[4]
        profile = quiet_profile()
        seq, _, truth = generate_clip(prim, profile, seed=1, return_truth=True)
        err = np.abs(seq.values[:, 3].astype(np.float64) - truth)
        assert err.max() <= profile.doppler_quantization / 2 + 1e-6

    def test_same_seed_identical(self):
        prim = default_primitives()[2]
        profile = default_profiles()[0]
        a, _ = generate_clip(prim, profile, seed=9)
        b, _ = generate_clip(prim, profile, seed=9)
        assert np.array_equal(a.frame_idx, b.frame_idx)
        assert np.array_equal(a.values, b.values)
        c, _ = generate_clip(prim, profile, seed=10)
        assert not np.array_equal(a.values, c.values)

    def test_nyquist_refusal_names_frequency(self):
        prim = MotionPrimitive("spin", (0.1,) * 4, 6.0, (0.0,) * 4, 0.2)
        profile = quiet_profile(meta=SourceMeta("slow", 77e9, 10.0))
        with pytest.raises(ValidationError, match="6.0"):
            generate_clip(prim, profile, seed=0)
        check_nyquist(prim, quiet_profile())  # 30 Hz is fine

    def test_r4_density_law(self):
        # E[max(Poisson(lam), 1)] = lam + exp(-lam); doubling the range with a
        # fixed density scale divides the rate by 16.
        density = 64.0 * 1.5**4  # lam = 64 at 1.5 m, 4 at 3.0 m
        counts = {}
        for r_m in (1.5, 3.0):
            profile = quiet_profile(range_m=r_m, density_scale=density)
            seq, _ = generate_clip(
                default_primitives()[0], profile, seed=3, duration_s=1000 / 30.0
            )
            groups = seq.frame_groups()
            counts[r_m] = np.array([len(g) for _, g in groups], dtype=float)
            assert len(groups) == 1000
        for r_m, lam in ((1.5, 64.0), (3.0, 4.0)):
            expected = lam + np.exp(-lam)
            sigma_mean = np.sqrt(lam / 1000)
            assert abs(counts[r_m].mean() - expected) <= 3 * sigma_mean
        ratio = counts[3.0].mean() / counts[1.5].mean()
        assert abs(ratio - 1 / 16) < 0.02

    def test_intensity_positive(self):
        seq, _ = generate_clip(default_primitives()[1], default_profiles()[0], seed=4)
        assert (seq.values[:, 4] > 0).all()

    def test_frame_count_follows_rate(self):
        seq, _ = generate_clip(
            default_primitives()[0], default_profiles()[1], seed=5, duration_s=2.0
        )
        assert seq.n_frames == 20  # 10 Hz * 2 s; padded later by standardization
        clip = standardize_clip(seq)
        assert clip.pad_mask.sum() == 12


class TestSourceProfile:
    def test_all_fields_positive(self):
        with pytest.raises(ValidationError):
            quiet_profile(range_m=-1.0)
        with pytest.raises(ValidationError):
            quiet_profile(doppler_quantization=0.0)

    def test_density_clipped_to_one(self):
        profile = quiet_profile(range_m=10.0, density_scale=5.0)
        assert profile.expected_points == 1.0


class TestPrimitives:
    def test_defaults_are_distinct_and_ordered(self):
        prims = default_primitives()
        assert len(prims) == 6
        peaks = [p.peak_amplitude for p in prims]
        assert peaks == sorted(peaks)
        assert len({p.name for p in prims}) == 6
        assert prims[0].static_fraction == max(p.static_fraction for p in prims)

    def test_nyquist_guard_on_all_defaults(self):
        for prim in default_primitives():
            for profile in default_profiles():
                check_nyquist(prim, profile)


class TestBenchmark:
    def test_counts_and_manifest(self, tmp_path):
        rows, label_space = generate_benchmark(
            tmp_path, n_sources=2, n_classes=3, clips_per_class_per_source=4, seed=0
        )
        assert len(rows) == 2 * 3 * 4
        assert label_space.class_count == 3
        on_disk = read_manifest(tmp_path / "manifest.csv")
        assert on_disk == rows
        clip, sid, label, source = read_clip_archive(rows[0].resolve(tmp_path / "manifest.csv"))
        assert clip.is_standard()
        assert source.source_name == rows[0].source

    def test_seed_changes_data_not_counts(self, tmp_path):
        rows_a, _ = generate_benchmark(
            tmp_path / "a", n_sources=1, n_classes=2, clips_per_class_per_source=2, seed=0
        )
        rows_b, _ = generate_benchmark(
            tmp_path / "b", n_sources=1, n_classes=2, clips_per_class_per_source=2, seed=1
        )
        assert len(rows_a) == len(rows_b)
        clip_a = read_clip_archive(rows_a[0].resolve(tmp_path / "a" / "manifest.csv"))[0]
        clip_b = read_clip_archive(rows_b[0].resolve(tmp_path / "b" / "manifest.csv"))[0]
        assert not np.array_equal(clip_a.data, clip_b.data)

    def test_deterministic_archives(self, tmp_path):
        for sub in ("x", "y"):
            generate_benchmark(
                tmp_path / sub, n_sources=2, n_classes=2, clips_per_class_per_source=2, seed=7
            )
        for rel in sorted(p.name for p in (tmp_path / "x").iterdir()):
            assert (tmp_path / "x" / rel).read_bytes() == (tmp_path / "y" / rel).read_bytes()

    def test_doppler_variance_shifts_across_sources(self):
        # Distribution of per-clip Doppler variance differs between sources
        # for the same action class; clearest on the near-static class, where
        # sensor noise and quantization dominate the statistic.
        profiles = default_profiles()
        prim = default_primitives()[0]
        var = {}
        for profile in profiles[:2]:
            vs = []
            for seed in range(100):
                seq, _ = generate_clip(prim, profile, seed=seed)
                vs.append(float(np.var(seq.values[:, 3])))
            var[profile.meta.source_name] = vs
        _, p_value = stats.ks_2samp(var["synth_a"], var["synth_b"])
        assert p_value < 0.01

    def test_class_mean_doppler_orders_by_amplitude(self):
        profile = default_profiles()[0]
        means = []
        for prim in default_primitives():
            vals = []
            for seed in range(12):
                seq, _ = generate_clip(prim, profile, seed=seed)
                vals.append(float(np.abs(seq.values[:, 3]).mean()))
            means.append(float(np.mean(vals)))
        assert means == sorted(means)

    def test_cross_source_shift_dominates_within_source(self, tmp_path):
        # CORAL between sources on raw clip features exceeds 10x the
        # within-source bootstrap CORAL; this is the property the benchmark
        # exists to create.
        rows, _ = generate_benchmark(
            tmp_path,
            n_sources=3,
            n_classes=3,
            clips_per_class_per_source=12,
            seed=0,
            normalize="none",
        )
        manifest = tmp_path / "manifest.csv"
        feats = {}
        for row in rows:
            clip = read_clip_archive(row.resolve(manifest))[0]
            feats.setdefault(row.source, []).append(clip_feature_vector(clip))
        feats = {s: np.stack(v) for s, v in feats.items()}
        sources = sorted(feats)
        cross = np.mean(
            [coral(feats[a], feats[b]) for i, a in enumerate(sources) for b in sources[i + 1 :]]
        )
        rng = np.random.default_rng(0)
        within = []
        for s in sources:
            f = feats[s]
            for _ in range(8):
                perm = rng.permutation(len(f))
                half = len(f) // 2
                within.append(coral(f[perm[:half]], f[perm[half:]]))
        assert cross > 10 * np.mean(within)

    def test_label_space_matches_primitives(self, tmp_path):
        rows, label_space = generate_benchmark(
            tmp_path, n_sources=1, n_classes=6, clips_per_class_per_source=1, seed=0
        )
        assert label_space.class_names == tuple(p.name for p in default_primitives())

    def test_invalid_arguments(self, tmp_path):
        with pytest.raises(ValidationError):
            generate_benchmark(tmp_path, n_sources=9)
        with pytest.raises(ValidationError):
            generate_benchmark(tmp_path, n_classes=0)
