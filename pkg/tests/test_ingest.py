import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmhar.core import STANDARD_C, STANDARD_P, STANDARD_T, FormatError, SourceMeta, ValidationError
from mmhar.ingest import (
    RawSequence,
    farthest_point_sample,
    load_taxonomy,
    normalize_clips,
    parse_source_csv,
    read_manifest,
    repeat_indices,
    segment_actions,
    slide_windows,
    standardize_clip,
    standardize_frames,
    write_manifest,
    ManifestRow,
)

SRC = SourceMeta("radhar", 77.0e9, 30.0)

HEADER = "Frame,X,Y,Z,Doppler,Intensity\n"


def make_seq(frame_idx, rng=None):
    rng = rng or np.random.default_rng(0)
    frame_idx = np.asarray(frame_idx)
    values = rng.normal(size=(frame_idx.size, 5)).astype(np.float32)
    values[:, 4] = np.abs(values[:, 4])
    return RawSequence(frame_idx, values, SRC)


class TestParseCsv:
    def test_two_row_file(self):
        seq = parse_source_csv(HEADER + "0,1,2,3,0.5,9\n0,1.5,2,3,-0.5,8\n", SRC)
        assert seq.n_rows == 2
        assert seq.n_frames == 1
        assert seq.values.shape == (2, 5)

    def test_missing_doppler_column(self):
        with pytest.raises(FormatError, match="Doppler"):
            parse_source_csv("Frame,X,Y,Z,Intensity\n0,1,2,3,4\n", SRC)

    def test_frame_groups(self):
        seq = parse_source_csv(HEADER + "0,1,1,1,0,1\n0,2,2,2,0,1\n1,3,3,3,0,1\n", SRC)
        groups = seq.frame_groups()
        assert [len(g) for _, g in groups] == [2, 1]

    def test_non_numeric_cell_reports_row(self):
        with pytest.raises(FormatError, match="row 3"):
            parse_source_csv(HEADER + "0,1,2,3,4,5\n1,oops,2,3,4,5\n", SRC)

    def test_empty_file(self):
        with pytest.raises(FormatError, match="empty"):
            parse_source_csv("", SRC)
        with pytest.raises(FormatError, match="empty"):
            parse_source_csv(HEADER, SRC)

    def test_decreasing_frames_rejected(self):
        with pytest.raises(FormatError, match="decreases"):
            parse_source_csv(HEADER + "1,1,1,1,1,1\n0,1,1,1,1,1\n", SRC)

    def test_header_case_insensitive(self):
        seq = parse_source_csv("frame, x, y, z, doppler, intensity\n0,1,2,3,4,5\n", SRC)
        assert seq.n_rows == 1


class TestSlideWindows:
    def test_radhar_parameters(self):
        seq = make_seq(np.repeat(np.arange(100), 2))
        wins = slide_windows(seq, 60, 10)
        assert len(wins) == 5
        for w in wins:
            assert w.n_frames == 60
            assert int(w.frame_idx.min()) == 0

    def test_exact_fit(self):
        assert len(slide_windows(make_seq(np.arange(60)), 60, 10)) == 1
        assert len(slide_windows(make_seq(np.arange(32)), 32, 16)) == 1

    def test_window_larger_than_sequence(self):
        with pytest.raises(ValidationError, match="window"):
            slide_windows(make_seq(np.arange(10)), 11, 1)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 60), st.integers(1, 30))
    def test_count_formula(self, f, window, stride):
        if window > f:
            return
        wins = slide_windows(make_seq(np.arange(f)), window, stride)
        assert len(wins) == (f - window) // stride + 1
        # Brute-force check of the start offsets.
        starts = [j for j in range(0, f - window + 1, stride)]
        assert len(wins) == len(starts)

    def test_rows_outside_window_dropped(self):
        seq = make_seq([0, 0, 1, 2, 3])
        wins = slide_windows(seq, 2, 2)
        assert [w.n_rows for w in wins] == [3, 2]


class TestSegmentActions:
    def test_two_segments(self):
        seq = make_seq(np.arange(20))
        out = segment_actions(seq, [(0, 9, 3), (10, 19, 4)])
        assert len(out) == 2
        (s1, l1), (s2, l2) = out
        assert (l1, l2) == (3, 4)
        assert s1.n_frames == s2.n_frames == 10
        assert int(s2.frame_idx.min()) == 0

    def test_empty_segment_list(self):
        assert segment_actions(make_seq(np.arange(5)), []) == []

    def test_rebasing(self):
        seq = make_seq(np.arange(10))
        [(sub, _)] = segment_actions(seq, [(5, 7, 0)])
        assert list(np.unique(sub.frame_idx)) == [0, 1, 2]

    def test_overlap_rejected(self):
        with pytest.raises(ValidationError, match="overlap"):
            segment_actions(make_seq(np.arange(20)), [(0, 10, 0), (5, 15, 1)])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError, match="outside"):
            segment_actions(make_seq(np.arange(10)), [(5, 30, 0)])


class TestStandardize:
    def test_padding_rule(self):
        seq = make_seq(np.repeat(np.arange(20), 3))
        clip = standardize_clip(seq)
        assert clip.data.shape == (STANDARD_T, STANDARD_P, STANDARD_C)
        assert not clip.pad_mask[:20].any()
        assert clip.pad_mask[20:].all()
        assert np.all(clip.data[20:] == 0)

    def test_uniform_downsampling_indices(self):
        # Mark each frame with a unique intensity so selection is observable.
        f = 40
        rows = []
        for i in range(f):
            rows.append([0.0, 0.0, 0.0, 0.0, float(i)])
        seq = RawSequence(np.arange(f), np.array(rows, np.float32), SRC)
        clip = standardize_clip(seq)
        expected = [(k * f) // STANDARD_T for k in range(STANDARD_T)]
        got = [int(clip.data[k, 0, 4]) for k in range(STANDARD_T)]
        assert got == expected
        assert expected[:9] == [0, 1, 2, 3, 5, 6, 7, 8, 10]

    def test_cyclic_repeat_multiplicities(self):
        pts = np.array([[1, 0, 0, 0, 1], [2, 0, 0, 0, 1], [3, 0, 0, 0, 1]], np.float32)
        seq = RawSequence(np.zeros(3, np.int64), pts, SRC)
        clip = standardize_clip(seq)
        xs = clip.data[0, :, 0]
        counts = {v: int((xs == v).sum()) for v in (1.0, 2.0, 3.0)}
        assert sorted(counts.values(), reverse=True) == [22, 21, 21]
        assert counts[1.0] == 22  # point 0 fills slots 0, 3, ..., 63
        assert np.array_equal(repeat_indices(3)[:7], [0, 1, 2, 0, 1, 2, 0])

    def test_empty_frame_named_in_error(self):
        frames = [(0, np.zeros((2, 5), np.float32)), (1, np.zeros((0, 5), np.float32))]
        with pytest.raises(ValidationError, match="frame 1"):
            standardize_frames(frames)

    def test_no_synthesis(self):
        rng = np.random.default_rng(3)
        for n_frames, pts_per in [(5, 3), (40, 100), (32, 64)]:
            seq = make_seq(np.repeat(np.arange(n_frames), pts_per), rng)
            clip = standardize_clip(seq)
            input_rows = {tuple(r) for r in seq.values.tolist()}
            for t in range(STANDARD_T):
                if clip.pad_mask[t]:
                    continue
                for row in clip.data[t].tolist():
                    assert tuple(row) in input_rows

    def test_fps_applied_above_64_points(self):
        rng = np.random.default_rng(5)
        seq = make_seq(np.zeros(100, np.int64), rng)
        clip = standardize_clip(seq)
        rows = {tuple(r) for r in clip.data[0].tolist()}
        assert len(rows) == STANDARD_P  # FPS never duplicates distinct points


class TestFarthestPointSample:
    def test_collinear_example(self):
        pts = np.zeros((10, 3))
        pts[:, 0] = np.arange(10)
        idx = farthest_point_sample(pts, 2)
        # 0 and 9 tie for distance from the centroid 4.5; ties break to the
        # lowest index, and the other endpoint maximizes min-distance.
        assert set(idx.tolist()) == {0, 9}

    def test_m_equals_n(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(8, 3))
        idx = farthest_point_sample(pts, 8)
        assert sorted(idx.tolist()) == list(range(8))

    def test_duplicates_not_selected_before_distinct_points(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            base = rng.normal(size=(6, 3))
            pts = np.concatenate([base, base[:3]])  # 3 duplicates
            idx = farthest_point_sample(pts, 6)
            values = [tuple(pts[i]) for i in idx]
            assert len(set(values)) == 6  # all distinct while distinct remain

    def test_fewer_points_than_target(self):
        with pytest.raises(ValidationError, match="repeat"):
            farthest_point_sample(np.zeros((3, 3)), 4)

    def test_deterministic_and_permutation_stable(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(30, 3))
        idx1 = farthest_point_sample(pts, 10)
        idx2 = farthest_point_sample(pts, 10)
        assert np.array_equal(idx1, idx2)
        perm = rng.permutation(30)
        idx3 = farthest_point_sample(pts[perm], 10)
        sel1 = {tuple(pts[i]) for i in idx1}
        sel3 = {tuple(pts[perm][i]) for i in idx3}
        assert sel1 == sel3


class TestNormalize:
    def make_clips(self, n=4, pad_from=24):
        rng = np.random.default_rng(7)
        clips = []
        for _ in range(n):
            data = rng.normal(loc=2.0, scale=3.0, size=(STANDARD_T, STANDARD_P, STANDARD_C))
            data = data.astype(np.float32)
            pad = np.zeros(STANDARD_T, bool)
            pad[pad_from:] = True
            data[pad_from:] = 0
            from mmhar.core import ClipTensor

            clips.append(ClipTensor(data, pad))
        return clips

    def test_clip_level_moments(self):
        for clip in normalize_clips(self.make_clips(), "clip_level"):
            pts = clip.data[~clip.pad_mask].reshape(-1, STANDARD_C)
            assert np.abs(pts.mean(axis=0)).max() < 1e-5
            assert np.abs(pts.var(axis=0) - 1).max() < 1e-4

    def test_none_is_identity(self):
        clips = self.make_clips()
        for c, out in zip(clips, normalize_clips(clips, "none")):
            assert np.array_equal(c.data, out.data)

    def test_constant_channel_becomes_zero(self):
        clips = self.make_clips(1)
        clips[0].data[..., 3] = 7.5
        clips[0].data[clips[0].pad_mask] = 0
        out = normalize_clips(clips, "clip_level")[0]
        assert np.all(out.data[~out.pad_mask][..., 3] == 0)

    def test_idempotence(self):
        once = normalize_clips(self.make_clips(), "clip_level")
        twice = normalize_clips(once, "clip_level")
        for a, b in zip(once, twice):
            assert np.abs(a.data - b.data).max() < 1e-5

    def test_dataset_level_pools_statistics(self):
        clips = self.make_clips(6)
        out = normalize_clips(clips, "dataset_level")
        pts = np.concatenate([c.data[~c.pad_mask].reshape(-1, STANDARD_C) for c in out])
        assert np.abs(pts.mean(axis=0)).max() < 1e-5
        assert np.abs(pts.var(axis=0) - 1).max() < 1e-4
        # Individual clips keep their offsets relative to the pooled stats.
        single = out[0].data[~out[0].pad_mask].reshape(-1, STANDARD_C)
        assert np.abs(single.mean(axis=0)).max() > 1e-6

    def test_padded_frames_stay_zero(self):
        for mode in ("clip_level", "dataset_level"):
            for clip in normalize_clips(self.make_clips(), mode):
                assert np.all(clip.data[clip.pad_mask] == 0)

    def test_unknown_mode(self):
        with pytest.raises(ValidationError, match="mode"):
            normalize_clips(self.make_clips(1), "zscore")


class TestTaxonomy:
    def test_unified_vocabulary(self):
        tax = load_taxonomy()
        assert len(tax.names) == 33
        assert tax.names[0] == "walk"
        assert tax.label_space.class_count == 33
        assert tax.action_id("radhar", "Walking") == 0
        assert tax.action_id("mri", "squat") == 2
        assert tax.action_id("mmfi", "Bowing") == 32
        with pytest.raises(ValidationError):
            tax.action_id("mmfi", "flying")


class TestManifest:
    def test_round_trip(self, tmp_path):
        rows = [
            ManifestRow("D001A001E001P001S0001", 0, "radhar", "a.clip"),
            ManifestRow("D002A002E001P001S0002", 1, "mri", "b.clip"),
        ]
        path = tmp_path / "manifest.csv"
        write_manifest(path, rows)
        assert read_manifest(path) == rows

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(FormatError):
            read_manifest(path)


class TestPrepPipeline:
    def write_mmfi_toy(self, src_dir):
        src_dir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(0)
        lines = ["Frame,X,Y,Z,Doppler,Intensity"]
        for f in range(40):
            for _ in range(4):
                x, y, z, d = rng.normal(size=4)
                lines.append(f"{f},{x:.4f},{y:.4f},{z:.4f},{d:.4f},{abs(d):.4f}")
        (src_dir / "rec.csv").write_text("\n".join(lines) + "\n")
        (src_dir / "segments.csv").write_text(
            "file,start,end,action\nrec.csv,0,19,2\nrec.csv,20,39,3\n"
        )
        (src_dir / "labels.csv").write_text("file,action,env,subject\nrec.csv,2,2,7\n")

    def test_mmfi_segmentation_flow(self, tmp_path):
        from mmhar.ingest import prep_source_dir
        from mmhar.core import read_archive_meta

        src = tmp_path / "raw"
        self.write_mmfi_toy(src)
        out = tmp_path / "out"
        result = prep_source_dir(src, "mmfi", out, normalize="clip_level")
        assert result.n_sequences == 2
        labels = sorted(r.label for r in result.manifest_rows)
        assert labels == [1, 2]  # action codes 2 and 3 are 0-based labels 1, 2
        for row in result.manifest_rows:
            meta = read_archive_meta(out / row.path)
            assert meta["normalization"] == "clip_level"
            sid = row.sample_id
            assert sid.startswith("D003")  # mmfi dataset index
            assert "E002" in sid and "P007" in sid

    def test_unknown_source_rejected(self, tmp_path):
        from mmhar.core import ConfigError
        from mmhar.ingest import prep_source_dir

        with pytest.raises(ConfigError, match="supported"):
            prep_source_dir(tmp_path, "lidar", tmp_path / "out")

    def test_missing_segments_sidecar(self, tmp_path):
        from mmhar.ingest import prep_source_dir

        src = tmp_path / "raw"
        src.mkdir()
        (src / "rec.csv").write_text("Frame,X,Y,Z,Doppler,Intensity\n0,1,1,1,1,1\n")
        with pytest.raises(ValidationError, match="segments"):
            prep_source_dir(src, "mmfi", tmp_path / "out")
