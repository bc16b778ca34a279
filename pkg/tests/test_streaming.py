import numpy as np
import pytest
import torch

from struggle_online.data import FeatureStream
from struggle_online.models import build_model, param_count
from struggle_online.nn import ShapeError
from struggle_online.streaming import (StreamEngine, predict_video, profile, read_track,
                                       run_stream, track_from_arrays, write_track)

from conftest import random_stream, small_config


@pytest.fixture(params=["LSTR", "CMERT"])
def model(request):
    return build_model(small_config(request.param), seed=2)


def test_first_step_is_valid(model):
    eng = StreamEngine(model)
    f = eng.step(random_stream(1, model.cfg).frames[0])
    assert f.t == 0
    assert 0.0 < f.detection_prob < 1.0
    assert f.anticipation_probs.shape == (model.cfg.anticipation_len,)


def test_fresh_engines_agree(model):
    s = random_stream(40, model.cfg, seed=1)
    a = run_stream(lambda: StreamEngine(model), s)
    b = run_stream(lambda: StreamEngine(model), s)
    assert np.array_equal(a.detection, b.detection)
    assert np.array_equal(a.anticipation, b.anticipation)


def test_single_frame_stream(model):
    assert len(run_stream(lambda: StreamEngine(model), random_stream(1, model.cfg)).frames) == 1


def test_empty_stream_rejected(model):
    s = FeatureStream("e", np.zeros((0, model.cfg.d_total)), 3.125, model.cfg.d_slow,
                      model.cfg.d_fast)
    with pytest.raises(ValueError):
        run_stream(lambda: StreamEngine(model), s)


def test_delta_zero_engine():
    m = build_model(small_config("CMERT", anticipation_len=0))
    track = run_stream(lambda: StreamEngine(m), random_stream(10, m.cfg))
    assert all(f.anticipation_probs.size == 0 for f in track.frames)
    assert track.anticipation.shape == (10, 0)


def test_matches_batched_evaluation(model):
    s = random_stream(90, model.cfg, seed=3)
    track = run_stream(lambda: StreamEngine(model), s)
    det, ant = predict_video(model, s.frames, chunk=17)
    assert np.max(np.abs(track.detection - det)) <= 1e-9
    assert np.max(np.abs(track.anticipation - ant)) <= 1e-9


def test_dimension_mismatch(model):
    eng = StreamEngine(model)
    with pytest.raises(ShapeError):
        eng.step(np.zeros(model.cfg.d_total + 1))


def test_buffer_size_is_constant(model):
    eng = StreamEngine(model)
    size = eng.buffer.nbytes
    for x in random_stream(200, model.cfg).frames:
        eng.step(x)
    assert eng.buffer.nbytes == size
    assert eng.buffer.shape[0] == model.cfg.history_len


def test_reset_restarts_stream(model):
    s = random_stream(30, model.cfg, seed=4)
    eng = StreamEngine(model)
    first = [eng.step(x).detection_prob for x in s.frames[:10]]
    eng.reset()
    again = [eng.step(x).detection_prob for x in s.frames[:10]]
    assert first == again


def test_track_csv_round_trip(tmp_path, model):
    s = random_stream(12, model.cfg)
    track = run_stream(lambda: StreamEngine(model), s)
    write_track(track, tmp_path / "t.csv")
    back = read_track(tmp_path / "t.csv")
    assert back.video_id == s.video_id
    assert np.array_equal(back.detection, track.detection)
    assert np.array_equal(back.anticipation, track.anticipation)
    write_track(track, tmp_path / "n.csv", with_latency=False)
    assert "latency_ms" not in (tmp_path / "n.csv").read_text().splitlines()[0]


def test_track_from_arrays():
    t = track_from_arrays("x", [0.1, 0.2], [[0.3], [0.4]])
    assert t.detection.tolist() == [0.1, 0.2]
    assert t.anticipation.tolist() == [[0.3], [0.4]]


def test_profile_report(model):
    s = random_stream(60, model.cfg)
    rep = profile(StreamEngine(model), s, warmup_steps=10)
    assert rep.steps == 50
    assert rep.steps_per_second == pytest.approx(1000.0 / rep.mean_ms, rel=1e-12)
    assert rep.param_count == param_count(model)
    assert rep.multiply_adds > 0
    with pytest.raises(ValueError):
        profile(StreamEngine(model), random_stream(5, model.cfg), warmup_steps=10)
