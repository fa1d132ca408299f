import numpy as np
import pytest

from audloc.data import AnnotationTrack, VideoSequence


def make_video(video_id="vid", t=10, h=16, w=16, seed=0, fps=25.0):
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0.0, 1.0, size=(t, h, w, 3)).astype(np.float32)
    return VideoSequence(id=video_id, frames=frames, fps=fps)


def make_track(video_id="vid", t=10, keyframes=(), fps=25.0):
    labels = np.zeros(t, dtype=np.int64)
    for k in keyframes:
        labels[k] = 1
    return AnnotationTrack(video_id=video_id, labels=labels, fps=fps)


@pytest.fixture
def video():
    return make_video()


@pytest.fixture
def track():
    return make_track(keyframes=(2, 7))
