import numpy as np
import pytest

from struggle_online.data import intervals_to_frame_labels, read_annotations, read_manifest
from struggle_online.synth import (DEFAULT_PROFILES, CorpusConfig, FeatureGeometry, PlacementError,
                                   corpus_hash, default_profile, generate_corpus, generate_video,
                                   iter_corpus, place_episodes, realized_proportions,
                                   task_direction)

GEOM = FeatureGeometry()


def test_same_seed_is_bit_identical():
    p = default_profile("Tangram")
    a, ia = generate_video(p, 1, 42, 120.0, GEOM)
    b, ib = generate_video(p, 1, 42, 120.0, GEOM)
    assert np.array_equal(a.frames, b.frames)
    assert ia.episodes == ib.episodes


def test_different_seed_differs():
    p = default_profile("Tangram")
    a, _ = generate_video(p, 1, 1, 60.0, GEOM)
    b, _ = generate_video(p, 1, 2, 60.0, GEOM)
    assert not np.array_equal(a.frames, b.frames)


def test_shuffle_cards_proportion():
    p = default_profile("ShuffleCards")
    props = []
    for seed in range(5):
        s, iv = generate_video(p, 1, seed, 320.0, GEOM)
        props.append(intervals_to_frame_labels(iv, GEOM.fps, s.n_frames).labels.mean())
    assert all(abs(x - 0.29) <= 0.05 for x in props)


def test_null_signal_still_labels_and_matches_background():
    p = default_profile("TyingKnots")
    import dataclasses
    null = dataclasses.replace(p, signal_strength=0.0)
    s, iv = generate_video(null, 1, 3, 320.0, GEOM)
    lab = intervals_to_frame_labels(iv, GEOM.fps, s.n_frames).labels
    assert 0 < lab.sum() < lab.size
    # no mean shift along the task direction and no variance change on fast channels
    u = task_direction(1, GEOM.d_slow)
    proj = s.frames[:, :GEOM.d_slow] @ u
    assert abs(proj[lab == 1].mean() - proj[lab == 0].mean()) < 0.5
    fast = s.frames[:, GEOM.d_slow:]
    ratio = fast[lab == 1].var() / fast[lab == 0].var()
    assert 0.7 < ratio < 1.4


def test_signal_shifts_positive_frames():
    s, iv = generate_video(default_profile("TyingKnots"), 1, 3, 320.0, GEOM)
    lab = intervals_to_frame_labels(iv, GEOM.fps, s.n_frames).labels
    proj = s.frames[:, :GEOM.d_slow] @ task_direction(1, GEOM.d_slow)
    assert proj[lab == 1].mean() - proj[lab == 0].mean() > 1.5


def test_precursor_ramp_rises_before_onsets():
    p = default_profile("Origami")
    s, iv = generate_video(p, 2, 5, 320.0, GEOM)
    u = task_direction(2, GEOM.d_slow)
    proj = s.frames[:, :GEOM.d_slow] @ u
    lab = intervals_to_frame_labels(iv, GEOM.fps, s.n_frames).labels
    onsets = np.flatnonzero(np.diff(np.r_[0, lab]) == 1)
    early = [proj[o - 6:o - 3].mean() for o in onsets if o >= 8]
    late = [proj[o - 3:o].mean() for o in onsets if o >= 8]
    assert np.mean(late) > np.mean(early) + 0.3


def test_episodes_do_not_overlap_and_leave_precursor_room():
    for seed in range(10):
        _, iv = generate_video(default_profile("Tangram"), 1, seed, 320.0, GEOM)
        eps = sorted(iv.episodes)
        assert eps[0][0] >= 2.0
        for (s0, e0), (s1, _) in zip(eps, eps[1:]):
            assert s1 - e0 >= 2.0


def test_placement_error_when_too_crowded():
    rng = np.random.default_rng(0)
    with pytest.raises(PlacementError, match="shorter episodes"):
        place_episodes(rng, 10.0, [4.0, 4.0], min_gap=2.0)


def test_corpus_count_and_ids():
    cfg = CorpusConfig(video_duration=40.0)
    recs = [r for r, _, _ in iter_corpus(cfg)]
    assert len(recs) == 4 * 2 * 3 * 5
    assert len({r.video_id for r in recs}) == 120


def test_attempt_multipliers_shrink_struggle():
    cfg = CorpusConfig(profiles=(default_profile("Origami"),), participants=6,
                       video_duration=320.0)
    recs, ivs = [], {}
    for r, _, iv in iter_corpus(cfg):
        recs.append(r)
        ivs[r.video_id] = iv
    props = realized_proportions(recs, ivs, GEOM.fps)
    assert props[("Origami", 5)] == pytest.approx(0.25 * 0.2, abs=0.015)
    assert props[("Origami", 1)] == pytest.approx(0.25, abs=0.03)
    assert props[("Origami", 1)] > props[("Origami", 3)] > props[("Origami", 5)]


def test_generate_corpus_files_and_hash(tmp_path):
    cfg = CorpusConfig(profiles=DEFAULT_PROFILES[:2], tasks_per_activity=1, participants=2,
                       attempts=1, video_duration=30.0, master_seed=4)
    recs = generate_corpus(cfg, tmp_path / "a")
    generate_corpus(cfg, tmp_path / "b")
    assert len(recs) == 4
    assert read_manifest(tmp_path / "a" / "manifest.json") == recs
    assert set(read_annotations(tmp_path / "a" / "annotations.json")) == {r.video_id for r in recs}
    assert corpus_hash(tmp_path / "a") == corpus_hash(tmp_path / "b")
    cfg.master_seed = 5
    generate_corpus(cfg, tmp_path / "c")
    assert corpus_hash(tmp_path / "a") != corpus_hash(tmp_path / "c")


def test_config_round_trip(tmp_path):
    cfg = CorpusConfig(master_seed=9).with_signal(0.0)
    back = CorpusConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert all(p.signal_strength == 0.0 for p in back.profiles)


def test_task_direction_shared_across_activities():
    a = task_direction(1, 24, family=0)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert np.array_equal(a, task_direction(1, 24, family=0))
    assert not np.array_equal(a, task_direction(1, 24, family=1))
