import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audloc.data import (
    AnnotationTrack,
    DatasetError,
    PredictionTrack,
    VideoSequence,
    decode_events,
    gaussian_soft_labels,
    load_annotations,
    load_video_frames,
    reassemble_windows,
    sample_training_clip,
    save_annotations,
    save_video_frames,
    sliding_windows,
)
from conftest import make_track, make_video


class TestVideoSequence:
    def test_rejects_short_video(self):
        with pytest.raises(ValueError, match="3 frames"):
            make_video(t=2)

    def test_rejects_out_of_range_pixels(self):
        frames = np.full((4, 8, 8, 3), 1.5, dtype=np.float32)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            VideoSequence(id="x", frames=frames, fps=25.0)

    def test_rejects_tiny_spatial(self):
        with pytest.raises(ValueError, match="8x8"):
            make_video(h=4)

    def test_frames_immutable(self, video):
        with pytest.raises(ValueError):
            video.frames[0, 0, 0, 0] = 0.5


class TestPredictionTrack:
    def test_rows_must_sum_to_one(self):
        probs = np.array([[0.7, 0.2], [0.5, 0.5]])
        with pytest.raises(ValueError, match="sum to 1"):
            PredictionTrack(probs=probs, events=[])

    def test_events_in_range(self):
        probs = np.full((4, 2), 0.5)
        with pytest.raises(ValueError, match=r"\[0, T\)"):
            PredictionTrack(probs=probs, events=[4])


class TestAnnotationIO:
    def test_load_single_video(self, tmp_path):
        path = tmp_path / "ann.json"
        path.write_text(json.dumps({
            "videos": [{"id": "a", "num_frames": 30, "fps": 25.0, "keyframes": [5, 14]}]
        }))
        tracks = load_annotations(path)
        assert len(tracks) == 1
        assert tracks[0].keyframes == [5, 14]
        labels = tracks[0].labels
        assert labels.sum() == 2 and labels[5] == 1 and labels[14] == 1

    def test_out_of_range_keyframe(self, tmp_path):
        path = tmp_path / "ann.json"
        path.write_text(json.dumps({
            "videos": [{"id": "a", "num_frames": 30, "fps": 25.0, "keyframes": [30]}]
        }))
        with pytest.raises(DatasetError, match="keyframe 30"):
            load_annotations(path)

    def test_error_names_offending_record(self, tmp_path):
        path = tmp_path / "ann.json"
        path.write_text(json.dumps({
            "videos": [
                {"id": "ok", "num_frames": 5, "fps": 25.0, "keyframes": []},
                {"id": "bad", "num_frames": 5, "fps": 25.0},
            ]
        }))
        with pytest.raises(DatasetError, match=r"videos\[1\]"):
            load_annotations(path)

    def test_round_trip_byte_identical(self, tmp_path):
        tracks = [
            make_track("a", t=30, keyframes=(5, 14)),
            make_track("b", t=12, keyframes=()),
            make_track("c", t=50, keyframes=(0, 49), fps=30.0),
        ]
        first = tmp_path / "first.json"
        second = tmp_path / "second.json"
        save_annotations(tracks, first)
        save_annotations(load_annotations(first), second)
        assert first.read_bytes() == second.read_bytes()


class TestFrameDirectoryIO:
    def test_round_trip(self, tmp_path):
        video = make_video(t=4, h=16, w=20)
        save_video_frames(video, tmp_path / "v")
        loaded = load_video_frames(tmp_path / "v", video_id="v")
        assert loaded.frames.shape == video.frames.shape
        # 8-bit quantization bounds the round-trip error
        assert np.abs(loaded.frames - video.frames).max() < 1 / 255 + 1e-6

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_video_frames(tmp_path / "nope")


class TestGaussianSoftLabels:
    def test_single_keyframe_closed_form(self):
        track = make_track(t=12, keyframes=(5,))
        soft = gaussian_soft_labels(track, sigma=1.0, radius=2)
        t = soft.targets
        assert t[5] == 1.0
        assert t[4] == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert t[6] == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert t[3] == pytest.approx(math.exp(-2.0), abs=1e-12)
        assert t[7] == pytest.approx(math.exp(-2.0), abs=1e-12)
        assert t[2] == 0.0 and t[8] == 0.0

    def test_no_keyframes(self):
        soft = gaussian_soft_labels(make_track(t=8), sigma=1.0, radius=2)
        assert np.all(soft.targets == 0.0)

    def test_overlapping_kernels_combine_by_max(self):
        track = make_track(t=12, keyframes=(5, 7))
        soft = gaussian_soft_labels(track, sigma=1.0, radius=2)
        assert soft.targets[6] == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert soft.targets[5] == 1.0 and soft.targets[7] == 1.0

    @given(keys=st.lists(st.integers(0, 19), max_size=5))
    def test_targets_one_exactly_at_keyframes(self, keys):
        track = make_track(t=20, keyframes=tuple(set(keys)))
        soft = gaussian_soft_labels(track, sigma=1.0, radius=2)
        assert set(np.flatnonzero(soft.targets == 1.0)) == set(keys)


class TestSampleTrainingClip:
    def test_full_length_sample(self):
        video = make_video(t=200, h=16, w=16)
        track = make_track(t=200, keyframes=(10,))
        frames, labels = sample_training_clip(video, track, clip_len=64, size=112, rng_seed=3)
        assert frames.shape == (64, 112, 112, 3)
        assert labels.shape == (64,)

    def test_exact_length_forces_start_zero(self):
        video = make_video(t=64, h=16, w=16)
        track = make_track(t=64, keyframes=(63,))
        for seed in range(5):
            _, labels = sample_training_clip(video, track, clip_len=64, size=16, rng_seed=seed)
            assert labels[63] == 1

    def test_short_video_padded_with_zero_labels(self):
        video = make_video(t=50, h=16, w=16)
        track = make_track(t=50, keyframes=(49,))
        frames, labels = sample_training_clip(video, track, clip_len=64, size=16, rng_seed=0)
        assert frames.shape[0] == 64
        assert np.all(labels[50:] == 0)
        assert labels[49] == 1
        # repeated tail frames equal the last real frame
        last = frames[49]
        assert np.array_equal(frames[50], last) and np.array_equal(frames[63], last)


class TestSlidingWindows:
    def test_exact_tiling(self):
        video = make_video(t=128)
        wins = sliding_windows(video, window=64, step=64)
        assert [s for s, _ in wins] == [0, 64]
        assert all(f.shape[0] == 64 for _, f in wins)

    def test_padded_tail(self):
        video = make_video(t=130)
        wins = sliding_windows(video, window=64, step=64)
        assert [s for s, _ in wins] == [0, 64, 128]
        tail = wins[-1][1]
        assert tail.shape[0] == 64
        assert np.array_equal(tail[2], tail[1])  # padded with the last real frame

    def test_single_short_window(self):
        video = make_video(t=40)
        wins = sliding_windows(video, window=64, step=64)
        assert len(wins) == 1
        assert wins[0][1].shape[0] == 64

    @settings(deadline=None, max_examples=60)
    @given(t=st.integers(3, 300), window=st.integers(3, 80))
    def test_reassembly_covers_every_frame_once(self, t, window):
        video = make_video(t=t, h=8, w=8)
        wins = sliding_windows(video, window=window, step=window)
        fake = [
            (start, np.tile([[0.5, 0.5]], (frames.shape[0], 1)))
            for start, frames in wins
        ]
        probs = reassemble_windows(fake, t)
        assert probs.shape == (t, 2)
        assert np.isfinite(probs).all()


class TestDecodeEvents:
    def test_single_peak(self):
        probs = np.array([[0.9, 0.1], [0.1, 0.9], [0.9, 0.1], [0.9, 0.1]])
        assert decode_events(probs) == [1]

    def test_all_below_threshold(self):
        probs = np.tile([[0.7, 0.3]], (6, 1))
        assert decode_events(probs) == []

    def test_greedy_suppression(self):
        p_sound = [0.6, 0.9, 0.7, 0.1, 0.8]
        probs = np.stack([1 - np.array(p_sound), np.array(p_sound)], axis=1)
        assert decode_events(probs, threshold=0.5, min_separation=2) == [1, 4]

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40))
    def test_events_sorted_and_separated(self, p_sound):
        p = np.array(p_sound)
        probs = np.stack([1 - p, p], axis=1)
        events = decode_events(probs, threshold=0.5, min_separation=2)
        assert events == sorted(events)
        assert all(b - a >= 2 for a, b in zip(events, events[1:]))
