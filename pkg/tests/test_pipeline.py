"""Retrieval scan, moment generation, NMS, and the combined score."""

import numpy as np
import pytest

from evret.config import RunConfig
from evret.corpus import synthesize_corpus
from evret.errors import ArgumentError
from evret.events import boundaries_window
from evret.metrics import iou
from evret.pipeline import (
    CorpusIndex,
    combined_moment_score,
    dump_predictions,
    generate_moments,
    load_predictions,
    nms,
    retrieve_videos,
    svmr,
    vcmr,
)


def make_index(vectors_by_id, dim, mode="event"):
    index = CorpusIndex(mode, dim)
    for vid, vecs in vectors_by_id.items():
        vecs = np.asarray(vecs, dtype=np.float32)
        index.add_video(vid, vecs, None, boundaries_window(max(len(vecs), 1), 1))
    index.finalize()
    return index


class TestRetrieveVideos:
    def test_corpus_of_one(self):
        index = make_index({"v0": [[1.0, 0.0]]}, 2)
        ranked = retrieve_videos(np.array([0.3, 0.7]), None, index, 10)
        assert [vid for vid, _ in ranked] == ["v0"]

    def test_orthogonal_unit_match(self):
        index = make_index({"v0": [[1.0, 0, 0]], "v1": [[0, 1.0, 0]], "v2": [[0, 0, 1.0]]}, 3)
        ranked = retrieve_videos(np.array([0.0, 1.0, 0.0]), None, index, 3)
        assert ranked[0][0] == "v1"
        assert abs(ranked[0][1] - 1.0) < 1e-6

    def test_matches_full_scan_sort_oracle(self):
        rng = np.random.default_rng(59)
        vectors = {f"v{i:02d}": rng.normal(size=(rng.integers(1, 5), 4)) for i in range(12)}
        index = make_index(vectors, 4)
        qf = rng.normal(size=4)
        ranked = retrieve_videos(qf, None, index, 12)

        def score(vecs):
            sims = [
                float(qf @ v / max(np.linalg.norm(qf) * np.linalg.norm(v), 1e-8)) for v in vecs
            ]
            return max(sims)

        oracle = sorted(
            ((vid, score(vecs)) for vid, vecs in vectors.items()),
            key=lambda kv: (-kv[1], kv[0]),
        )
        assert [vid for vid, _ in ranked] == [vid for vid, _ in oracle]
        np.testing.assert_allclose(
            [s for _, s in ranked], [s for _, s in oracle], atol=1e-6
        )

    def test_k_equals_m_is_permutation(self):
        rng = np.random.default_rng(61)
        vectors = {f"v{i}": rng.normal(size=(2, 4)) for i in range(7)}
        index = make_index(vectors, 4)
        ranked = retrieve_videos(rng.normal(size=4), None, index, 7)
        assert sorted(vid for vid, _ in ranked) == sorted(vectors)

    def test_empty_index_rejected(self):
        index = CorpusIndex("event", 4)
        with pytest.raises(ArgumentError):
            retrieve_videos(np.zeros(4), None, index, 1)

    def test_tie_break_by_id(self):
        index = make_index({"vb": [[1.0, 0.0]], "va": [[1.0, 0.0]]}, 2)
        ranked = retrieve_videos(np.array([1.0, 0.0]), None, index, 2)
        assert [vid for vid, _ in ranked] == ["va", "vb"]


class TestGenerateMoments:
    def test_lmax_one_diagonal(self):
        out = generate_moments(np.zeros(3), np.zeros(3), 1, 100)
        assert {(st, ed) for st, ed, _ in out} == {(0, 0), (1, 1), (2, 2)}

    def test_argmax_span(self):
        out = generate_moments(np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), 3, 100)
        st, ed, score = out[0]
        assert (st, ed, score) == (0, 2, 2.0)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(61)
        lf_st = rng.normal(size=7)
        lf_ed = rng.normal(size=7)
        got = generate_moments(lf_st, lf_ed, 4, 10)
        cands = [
            (i, j, lf_st[i] + lf_ed[j])
            for i in range(7)
            for j in range(i, min(i + 4, 7))
        ]
        cands.sort(key=lambda c: (-c[2], c[0], c[1]))
        expected = cands[:10]
        assert [(a, b) for a, b, _ in got] == [(a, b) for a, b, _ in expected]
        np.testing.assert_allclose([s for *_, s in got], [s for *_, s in expected], atol=1e-12)

    def test_length_bound_property(self):
        rng = np.random.default_rng(67)
        for _ in range(50):
            T = int(rng.integers(1, 12))
            l_max = int(rng.integers(1, T + 3))
            out = generate_moments(rng.normal(size=T), rng.normal(size=T), l_max, 1000)
            assert all(ed - st + 1 <= l_max for st, ed, _ in out)

    def test_invalid_lmax(self):
        with pytest.raises(ArgumentError):
            generate_moments(np.zeros(3), np.zeros(3), 0, 5)


def quadratic_nms_oracle(moments, threshold):
    order = sorted(moments, key=lambda m: (-m[2], m[0], m[1]))
    kept = []
    for m in order:
        if all(iou((m[0], m[1]), (k[0], k[1])) <= threshold for k in kept):
            kept.append(m)
    return kept


class TestNms:
    def test_identical_spans_keep_best(self):
        out = nms([(2, 5, 1.0), (2, 5, 2.0)], 0.5)
        assert out == [(2, 5, 2.0)]

    def test_disjoint_all_kept(self):
        moments = [(0, 1, 3.0), (4, 5, 2.0), (8, 9, 1.0)]
        assert nms(moments, 0.0) == moments

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(67)
        moments = []
        for _ in range(10):
            st = int(rng.integers(0, 10))
            ed = int(rng.integers(st, 12))
            moments.append((st, ed, float(rng.normal())))
        assert nms(moments, 0.5) == quadratic_nms_oracle(moments, 0.5)

    def test_antichain_and_sorted(self):
        rng = np.random.default_rng(71)
        for _ in range(30):
            moments = []
            for _ in range(12):
                st = int(rng.integers(0, 8))
                moments.append((st, st + int(rng.integers(0, 6)), float(rng.normal())))
            out = nms(moments, 0.4)
            scores = [s for *_, s in out]
            assert scores == sorted(scores, reverse=True)
            for i, a in enumerate(out):
                for b in out[i + 1 :]:
                    assert iou((a[0], a[1]), (b[0], b[1])) <= 0.4

    def test_bad_threshold(self):
        with pytest.raises(ArgumentError):
            nms([(0, 1, 1.0)], 1.5)


class TestCombinedScore:
    def test_unit_arithmetic(self):
        assert abs(combined_moment_score(0.5, 2.0, 3.0, 0.01) - 55.0) < 1e-12

    def test_within_video_order_independent_of_re(self):
        rng = np.random.default_rng(3)
        spans = [(i, i + 1, float(rng.normal())) for i in range(6)]
        base_order = [m[:2] for m in sorted(spans, key=lambda m: -m[2])]
        for re in (0.0, 0.4, 0.9):
            scored = [
                (st, ed, combined_moment_score(re, 0.0, s, 0.01)) for st, ed, s in spans
            ]
            order = [m[:2] for m in sorted(scored, key=lambda m: -m[2])]
            assert order == base_order


class TestEndToEndPipeline:
    def _setup(self):
        cfg = RunConfig(
            dim=8, layers=1, heads=2, frame_anchors=[2, "all"], event_anchors=[1, "all"],
            max_frames=8, max_tokens=8, strategy="window", window=3, top_k=2, top_n=20,
            nms_threshold=0.5, conv_kernel_size=3, seed=3,
        )
        corpus = synthesize_corpus(
            3, M=2, T=6, D_raw=6, events_per_video=2, queries_per_video=1,
            min_tokens=2, max_tokens=3,
        )
        from evret.localizer import localizer_params_for_corpus
        from evret.retriever import params_for_corpus

        ret_ps = params_for_corpus(cfg, corpus, 3)
        loc_ps = localizer_params_for_corpus(cfg, corpus, 4)
        return cfg, corpus, ret_ps, loc_ps

    def test_single_video_vcmr_order_matches_svmr(self):
        cfg, corpus, ret_ps, loc_ps = self._setup()
        corpus_single = synthesize_corpus(
            5, M=1, T=6, D_raw=6, events_per_video=2, queries_per_video=1,
            min_tokens=2, max_tokens=3,
        )
        from evret.localizer import localizer_params_for_corpus
        from evret.retriever import params_for_corpus

        rp = params_for_corpus(cfg, corpus_single, 5)
        lp = localizer_params_for_corpus(cfg, corpus_single, 6)
        index = CorpusIndex.build(corpus_single, cfg, rp, mode="event")
        q = corpus_single.queries[0]
        v_preds = vcmr(q, corpus_single, index, rp, lp, cfg)
        s_preds = svmr(q, corpus_single, lp, cfg)
        assert [(p.start, p.end) for p in v_preds] == [(p.start, p.end) for p in s_preds]

    def test_prediction_dump_roundtrip_and_determinism(self, tmp_path):
        cfg, corpus, ret_ps, loc_ps = self._setup()
        index = CorpusIndex.build(corpus, cfg, ret_ps, mode="event")
        preds = {
            q.query_id: vcmr(q, corpus, index, ret_ps, loc_ps, cfg) for q in corpus.queries
        }
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        dump_predictions(preds, p1)
        preds2 = {
            q.query_id: vcmr(q, corpus, index, ret_ps, loc_ps, cfg) for q in corpus.queries
        }
        dump_predictions(preds2, p2)
        assert p1.read_bytes() == p2.read_bytes()
        back = load_predictions(p1)
        assert set(back) == set(preds)
        for qid in preds:
            assert [(p.video_id, p.start, p.end) for p in back[qid]] == [
                (p.video_id, p.start, p.end) for p in preds[qid]
            ]

    def test_index_save_load_roundtrip(self, tmp_path):
        cfg, corpus, ret_ps, _ = self._setup()
        index = CorpusIndex.build(corpus, cfg, ret_ps, mode="event")
        index.save(tmp_path / "idx")
        back = CorpusIndex.load(tmp_path / "idx")
        assert back.mode == "event"
        assert back.video_ids == index.video_ids
        assert back.vector_count() == index.vector_count()
        for vid in index.video_ids:
            np.testing.assert_array_equal(index.vectors[vid], back.vectors[vid])
            assert [
                (s.start, s.end) for s in index.segmentations[vid].spans
            ] == [(s.start, s.end) for s in back.segmentations[vid].spans]
        rng = np.random.default_rng(0)
        qf = rng.normal(size=cfg.dim)
        np.testing.assert_allclose(
            index.score_all(qf, None), back.score_all(qf, None), atol=1e-6
        )
