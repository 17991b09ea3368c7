"""TSM construction and the three event segmentation strategies."""

import numpy as np
import pytest

from evret.corpus import synthesize_corpus
from evret.errors import ArgumentError, NumericError
from evret.events import (
    EventSegmentation,
    EventSpan,
    boundaries_convolution,
    boundaries_kmeans,
    boundaries_window,
    build_tsm,
    convolution_boundary_scores,
    segment_events,
)


def cosine_oracle(frames):
    """Double-loop cosine with the same epsilon floor."""
    T = frames.shape[0]
    out = np.empty((T, T))
    for i in range(T):
        for j in range(T):
            denom = max(np.linalg.norm(frames[i]) * np.linalg.norm(frames[j]), 1e-8)
            out[i, j] = frames[i] @ frames[j] / denom
    return out


def two_block_frames(T=8, cut=4):
    e1 = np.array([1.0, 0.0])
    e2 = np.array([0.0, 1.0])
    return np.vstack([np.tile(e1, (cut, 1)), np.tile(e2, (T - cut, 1))])


def assert_partition(seg: EventSegmentation, T: int):
    assert seg.spans[0].start == 0
    assert seg.spans[-1].end == T
    for a, b in zip(seg.spans, seg.spans[1:]):
        assert a.end == b.start
    assert 1 <= seg.num_events <= T


class TestBuildTsm:
    def test_orthogonal_blocks(self):
        frames = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        expected = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1.0]])
        assert np.allclose(build_tsm(frames), expected, atol=1e-12)

    def test_single_frame(self):
        assert np.allclose(build_tsm(np.array([[2.0, 1.0]])), [[1.0]])

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(5)
        frames = rng.normal(size=(6, 4))
        assert np.allclose(build_tsm(frames), cosine_oracle(frames), atol=1e-6)

    def test_zero_row_convention(self):
        frames = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]])
        tsm = build_tsm(frames)
        assert tsm[1, 1] == 1.0
        assert tsm[1, 0] == 0.0 and tsm[0, 1] == 0.0 and tsm[1, 2] == 0.0

    def test_invariants_random(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            tsm = build_tsm(rng.normal(size=(rng.integers(1, 12), 3)))
            assert np.allclose(tsm, tsm.T, atol=1e-6)
            assert np.allclose(np.diag(tsm), 1.0, atol=1e-6)
            assert np.all(tsm >= -1 - 1e-6) and np.all(tsm <= 1 + 1e-6)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            build_tsm(np.array([[np.inf, 0.0]]))


class TestConvolution:
    def test_hand_scores_two_block(self):
        tsm = build_tsm(two_block_frames())
        s = convolution_boundary_scores(tsm)
        assert abs(s[4] - 8.0) < 1e-9
        assert abs(s[2] - 2.0) < 1e-9
        np.testing.assert_allclose(s, [4, 1, 2, 8, 8, 2, 1, 4], atol=1e-9)

    def test_two_block_recovery(self):
        seg = boundaries_convolution(build_tsm(two_block_frames()), 0.3)
        assert [(sp.start, sp.end) for sp in seg.spans] == [(0, 4), (4, 8)]

    @pytest.mark.parametrize("T", [6, 8, 13, 20, 40])
    def test_constant_video_single_span(self, T):
        tsm = build_tsm(np.tile([1.0, 2.0], (T, 1)))
        for delta in (0.01, 0.3, 1.0):
            seg = boundaries_convolution(tsm, delta)
            assert seg.num_events == 1

    def test_huge_delta_single_span(self):
        seg = boundaries_convolution(build_tsm(two_block_frames()), 1e12)
        assert [(sp.start, sp.end) for sp in seg.spans] == [(0, 8)]

    def test_negative_delta_rejected(self):
        with pytest.raises(ArgumentError):
            boundaries_convolution(np.eye(4), -0.1)

    def test_recovery_within_margin_window(self):
        """Exact recovery for every delta in (0, boundary margin)."""
        rng = np.random.default_rng(23)
        for _ in range(20):
            n_blocks = int(rng.integers(2, 5))
            sizes = rng.integers(4, 9, size=n_blocks)
            cuts = np.cumsum(sizes)[:-1].tolist()
            T = int(sizes.sum())
            protos = np.eye(n_blocks)
            frames = np.repeat(protos, sizes, axis=0)
            tsm = build_tsm(frames)
            scores = convolution_boundary_scores(tsm)
            margin = min(scores[c] for c in cuts) - scores.mean()
            for delta in (0.05, 0.3, margin / 2, margin * 0.99):
                seg = boundaries_convolution(tsm, delta)
                assert [sp.start for sp in seg.spans[1:]] == cuts, (sizes, delta)


class TestKmeans:
    def test_two_block(self):
        seg = boundaries_kmeans(build_tsm(two_block_frames()), k=2, beta=1.0)
        assert [(sp.start, sp.end) for sp in seg.spans] == [(0, 4), (4, 8)]

    def test_two_block_matches_lloyd_oracle(self):
        tsm = build_tsm(two_block_frames())
        T = 8
        feats = np.concatenate([tsm.T, (np.arange(T) / T)[:, None]], axis=1)
        centers = feats[[0, 4]].copy()
        labels = np.full(T, -1)
        for _ in range(100):
            d2 = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new = d2.argmin(axis=1)
            if np.array_equal(new, labels):
                break
            labels = new
            for j in range(2):
                centers[j] = feats[labels == j].mean(axis=0)
        cuts = [i for i in range(1, T) if labels[i] != labels[i - 1]]
        seg = boundaries_kmeans(tsm, k=2, beta=1.0)
        assert [sp.start for sp in seg.spans[1:]] == cuts == [4]

    def test_k1_single_span(self):
        seg = boundaries_kmeans(np.eye(5), k=1)
        assert seg.num_events == 1

    def test_k_equals_T_singletons(self):
        T = 6
        tsm = build_tsm(np.tile([1.0, 1.0], (T, 1)))
        seg = boundaries_kmeans(tsm, k=T, beta=1.0)
        assert seg.num_events == T
        assert all(sp.length == 1 for sp in seg.spans)

    def test_k_out_of_range(self):
        with pytest.raises(ArgumentError):
            boundaries_kmeans(np.eye(3), k=4)


class TestWindow:
    @pytest.mark.parametrize(
        "T,w,expected",
        [
            (10, 4, [(0, 4), (4, 8), (8, 10)]),
            (10, 5, [(0, 5), (5, 10)]),
            (3, 5, [(0, 3)]),
        ],
    )
    def test_examples(self, T, w, expected):
        seg = boundaries_window(T, w)
        assert [(sp.start, sp.end) for sp in seg.spans] == expected

    def test_w_geq_T_single_span(self):
        assert boundaries_window(7, 7).num_events == 1
        assert boundaries_window(7, 100).num_events == 1

    def test_invalid_w(self):
        with pytest.raises(ArgumentError):
            boundaries_window(5, 0)


class TestPartitionProperty:
    def test_all_strategies_1000_random_inputs(self):
        rng = np.random.default_rng(1000)
        for i in range(1000):
            T = int(rng.integers(1, 20))
            frames = rng.normal(size=(T, 3))
            if i % 3 == 0:
                seg = segment_events(frames, "convolution", float(rng.uniform(0, 2)))
            elif i % 3 == 1:
                seg = segment_events(frames, "kmeans", int(rng.integers(1, T + 1)))
            else:
                seg = segment_events(frames, "window", int(rng.integers(1, T + 2)))
            assert_partition(seg, T)


class TestSpanTypes:
    def test_invalid_span(self):
        with pytest.raises(ArgumentError):
            EventSpan(3, 3)
        with pytest.raises(ArgumentError):
            EventSpan(-1, 2)

    def test_non_contiguous_rejected(self):
        with pytest.raises(ArgumentError):
            EventSegmentation((EventSpan(0, 2), EventSpan(3, 4)), "window", 2)

    def test_span_of(self):
        seg = boundaries_window(10, 4)
        assert [seg.span_of(f) for f in (0, 3, 4, 8, 9)] == [0, 0, 1, 2, 2]
        with pytest.raises(ArgumentError):
            seg.span_of(10)

    def test_debug_dump(self, tmp_path):
        from evret.corpus import read_features
        from evret.events import dump_segmentation_debug

        tsm = build_tsm(two_block_frames())
        dump_segmentation_debug(tsm, tmp_path, "v0")
        back = read_features(tmp_path / "v0.tsm.evtf")
        assert back.shape == (8, 8)
        scores = read_features(tmp_path / "v0.scores.evtf")
        np.testing.assert_allclose(scores[0], [4, 1, 2, 8, 8, 2, 1, 4], atol=1e-6)


class TestSegmentOnSynthetic:
    def test_noise_free_corpus_recovery(self):
        corpus = synthesize_corpus(
            11, M=4, T=16, D_raw=8, events_per_video=2, queries_per_video=1, noise_sigma=0.0
        )
        for v in corpus.videos:
            seg = segment_events(v.frame_features, "convolution", 0.3)
            assert [(sp.start, sp.end) for sp in seg.spans] == [(0, 8), (8, 16)]
