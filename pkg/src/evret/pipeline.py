"""Two-stage inference: corpus-wide retrieval over a precomputed vector
index, per-video moment generation, NMS, and the combined moment score
cm = re/t + lf_st + lf_ed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from evret.config import RunConfig
from evret.corpus import FeatureCorpus, QueryRecord, read_features, write_features
from evret.errors import ArgumentError, FormatError, IngestError
from evret.events import EventSegmentation, EventSpan
from evret.metrics import iou
from evret.nn import ParameterSet, no_grad
from evret.retriever import encode_query, encode_video

_SCAN_EPS = 1e-8


@dataclass(frozen=True)
class MomentPrediction:
    video_id: str
    start: int  # inclusive frame index
    end: int  # inclusive frame index
    score: float

    def __post_init__(self):
        if self.start > self.end:
            raise ArgumentError(f"span [{self.start}, {self.end}] has start > end")


class CorpusIndex:
    """Stored-vector index for scan-based retrieval.

    In event mode each video stores its event vectors (plus subtitle
    vectors when present); in frame mode its frame vectors. Raw vectors
    are kept in float32 (the storage format); unit-normalized float64
    copies back the cosine scan.
    """

    def __init__(self, mode: str, dim: int):
        if mode not in ("event", "frame"):
            raise ArgumentError(f"index mode must be 'event' or 'frame', got {mode!r}")
        self.mode = mode
        self.dim = dim
        self.video_ids: list[str] = []
        self.vectors: dict[str, np.ndarray] = {}
        self.sub_vectors: dict[str, np.ndarray] = {}
        self.segmentations: dict[str, EventSegmentation] = {}
        self._stack = None
        self._offsets = None
        self._sub_stack = None
        self._sub_offsets = None

    # -- construction -------------------------------------------------------

    def add_video(
        self,
        video_id: str,
        vectors: np.ndarray,
        sub_vectors: np.ndarray | None,
        segmentation: EventSegmentation,
    ) -> None:
        self.video_ids.append(video_id)
        self.vectors[video_id] = np.asarray(vectors, dtype=np.float32)
        if sub_vectors is not None:
            self.sub_vectors[video_id] = np.asarray(sub_vectors, dtype=np.float32)
        self.segmentations[video_id] = segmentation
        self._stack = None

    @classmethod
    def build(
        cls, corpus: FeatureCorpus, cfg: RunConfig, params: ParameterSet, mode: str = "event"
    ) -> "CorpusIndex":
        index = cls(mode, cfg.dim)
        with no_grad():
            for video in corpus.videos:
                enc = encode_video(video, cfg, params)
                if mode == "event":
                    vecs = enc.event_reps.data
                    subs = enc.sub_reps.data if enc.sub_reps is not None else None
                else:
                    vecs = enc.frame_reps.data
                    subs = enc.sub_frame_reps.data if enc.sub_frame_reps is not None else None
                index.add_video(video.video_id, vecs, subs, enc.segmentation)
        index.finalize()
        return index

    def finalize(self) -> None:
        """Stack per-video vectors for the scan; call after all adds."""
        if not self.video_ids:
            raise ArgumentError("index is empty")

        def _prep(per_video: dict[str, np.ndarray]):
            mats = [per_video[vid].astype(np.float64) for vid in self.video_ids]
            stack = np.concatenate(mats, axis=0)
            norms = np.linalg.norm(stack, axis=1, keepdims=True)
            stack = stack / np.maximum(norms, _SCAN_EPS)
            offsets = np.cumsum([0] + [m.shape[0] for m in mats])[:-1]
            return stack, offsets

        self._stack, self._offsets = _prep(self.vectors)
        if self.has_subtitles:
            self._sub_stack, self._sub_offsets = _prep(self.sub_vectors)

    @property
    def has_subtitles(self) -> bool:
        return len(self.sub_vectors) == len(self.video_ids) and bool(self.video_ids)

    @property
    def num_videos(self) -> int:
        return len(self.video_ids)

    def vector_count(self) -> int:
        total = sum(v.shape[0] for v in self.vectors.values())
        total += sum(v.shape[0] for v in self.sub_vectors.values())
        return total

    def memory_bytes(self) -> int:
        return self.vector_count() * self.dim * 4

    # -- scoring ------------------------------------------------------------

    def score_all(self, q_frame: np.ndarray, q_sub: np.ndarray | None) -> np.ndarray:
        """Retrieval score for every video: max query-vector cosine,
        averaged with the max query-subtitle cosine when present."""
        if self._stack is None:
            self.finalize()
        qf = q_frame / max(np.linalg.norm(q_frame), _SCAN_EPS)
        scores = np.maximum.reduceat(self._stack @ qf, self._offsets)
        if self.has_subtitles and q_sub is not None:
            qs = q_sub / max(np.linalg.norm(q_sub), _SCAN_EPS)
            sub_scores = np.maximum.reduceat(self._sub_stack @ qs, self._sub_offsets)
            scores = 0.5 * (scores + sub_scores)
        return scores

    # -- persistence ----------------------------------------------------------

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        index_path = out_dir / "index.jsonl"
        with open(index_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"mode": self.mode, "dim": self.dim}) + "\n")
            for vid in self.video_ids:
                seg = self.segmentations[vid]
                rec = {
                    "video_id": vid,
                    "vector_file": f"{vid}.vec.evtf",
                    "spans": [[sp.start, sp.end] for sp in seg.spans],
                    "strategy": seg.strategy,
                    "parameter": seg.parameter,
                }
                write_features(self.vectors[vid], out_dir / rec["vector_file"])
                if vid in self.sub_vectors:
                    rec["subtitle_vector_file"] = f"{vid}.sub.evtf"
                    write_features(self.sub_vectors[vid], out_dir / rec["subtitle_vector_file"])
                fh.write(json.dumps(rec) + "\n")
        return index_path

    @classmethod
    def load(cls, index_dir) -> "CorpusIndex":
        index_dir = Path(index_dir)
        index_path = index_dir / "index.jsonl"
        if not index_path.is_file():
            raise IngestError(index_path)
        lines = [ln for ln in index_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise FormatError("index.jsonl", "header line", "empty file")
        header = json.loads(lines[0])
        index = cls(header["mode"], int(header["dim"]))
        for line in lines[1:]:
            rec = json.loads(line)
            spans = tuple(EventSpan(int(a), int(b)) for a, b in rec["spans"])
            seg = EventSegmentation(spans, rec["strategy"], rec["parameter"])
            vecs = read_features(index_dir / rec["vector_file"])
            subs = None
            if rec.get("subtitle_vector_file"):
                subs = read_features(index_dir / rec["subtitle_vector_file"])
            index.add_video(rec["video_id"], vecs, subs, seg)
        index.finalize()
        return index


def encode_query_vectors(
    token_features: np.ndarray, cfg: RunConfig, params: ParameterSet
) -> tuple[np.ndarray, np.ndarray | None]:
    """Pooled query vectors (frame-oriented, subtitle-oriented) as numpy."""
    with no_grad():
        q = encode_query("q", token_features, cfg, params)
    return q.q_frame.data, None if q.q_sub is None else q.q_sub.data


def retrieve_videos(
    q_frame: np.ndarray,
    q_sub: np.ndarray | None,
    index: CorpusIndex,
    K: int = 10,
) -> list[tuple[str, float]]:
    """Top-K videos by retrieval score, ties broken by ascending id."""
    if index.num_videos == 0:
        raise ArgumentError("cannot retrieve from an empty corpus index")
    scores = index.score_all(q_frame, q_sub)
    ids = np.array(index.video_ids)
    order = np.lexsort((ids, -scores))
    top = order[: max(K, 0)]
    return [(str(ids[i]), float(scores[i])) for i in top]


def generate_moments(
    lf_st: np.ndarray, lf_ed: np.ndarray, l_max: int, top_n: int
) -> list[tuple[int, int, float]]:
    """All spans (i, j) with j - i + 1 <= l_max scored lf_st[i] + lf_ed[j];
    the top_n best, ties broken by ascending (i, j)."""
    if l_max < 1:
        raise ArgumentError(f"l_max must be >= 1, got {l_max}")
    T = len(lf_st)
    score = lf_st[:, None] + lf_ed[None, :]
    ii, jj = np.meshgrid(np.arange(T), np.arange(T), indexing="ij")
    valid = (jj >= ii) & (jj - ii + 1 <= l_max)
    flat_scores = score[valid]
    flat_i = ii[valid]
    flat_j = jj[valid]
    order = np.lexsort((flat_j, flat_i, -flat_scores))[: max(top_n, 0)]
    return [(int(flat_i[o]), int(flat_j[o]), float(flat_scores[o])) for o in order]


def nms(
    moments: list[tuple[int, int, float]], iou_threshold: float
) -> list[tuple[int, int, float]]:
    """Greedy suppression: keep the best remaining moment, drop the rest
    whose IoU with it exceeds the threshold."""
    if not (0.0 <= iou_threshold <= 1.0):
        raise ArgumentError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    pending = sorted(moments, key=lambda m: (-m[2], m[0], m[1]))
    kept: list[tuple[int, int, float]] = []
    while pending:
        best = pending.pop(0)
        kept.append(best)
        pending = [m for m in pending if iou((best[0], best[1]), (m[0], m[1])) <= iou_threshold]
    return kept


def localize_moments(
    video, token_features: np.ndarray, cfg: RunConfig, loc_params: ParameterSet
) -> list[tuple[int, int, float]]:
    """Single-video moment candidates after NMS, scored lf_st + lf_ed."""
    from evret.localizer import encode_fused, frame_confidences

    with no_grad():
        enc = encode_fused(video, token_features, cfg, loc_params)
        lf_st, lf_ed = frame_confidences(enc.frame_reps, enc.sub_frame_reps, loc_params)
    l_max = cfg.l_max if cfg.l_max is not None else video.num_frames
    cands = generate_moments(lf_st.data, lf_ed.data, l_max, cfg.top_n)
    return nms(cands, cfg.nms_threshold)


def combined_moment_score(re: float, lf_st: float, lf_ed: float, temperature: float) -> float:
    """cm = re / t + lf_st + lf_ed."""
    return re / temperature + lf_st + lf_ed


def vcmr(
    query: QueryRecord,
    corpus: FeatureCorpus,
    index: CorpusIndex,
    ret_params: ParameterSet,
    loc_params: ParameterSet,
    cfg: RunConfig,
) -> list[MomentPrediction]:
    """Retrieve top-K videos, localize in each, and rank all candidate
    moments by the combined score."""
    qf, qs = encode_query_vectors(query.token_features, cfg, ret_params)
    ranked = retrieve_videos(qf, qs, index, cfg.top_k)
    predictions = []
    for vid, re in ranked:
        for st, ed, span_score in localize_moments(
            corpus.video(vid), query.token_features, cfg, loc_params
        ):
            cm = re / cfg.temperature + span_score
            predictions.append(MomentPrediction(vid, st, ed, cm))
    predictions.sort(key=lambda p: (-p.score, p.video_id, p.start, p.end))
    return predictions


def svmr(
    query: QueryRecord,
    corpus: FeatureCorpus,
    loc_params: ParameterSet,
    cfg: RunConfig,
) -> list[MomentPrediction]:
    """Moment candidates within the query's ground-truth video."""
    video = corpus.video(query.video_id)
    return [
        MomentPrediction(video.video_id, st, ed, score)
        for st, ed, score in localize_moments(video, query.token_features, cfg, loc_params)
    ]


def dump_predictions(predictions_by_query: dict[str, list[MomentPrediction]], path) -> None:
    """JSONL dump {query_id, video_id, st, ed, score}, sorted by query id
    then rank."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(predictions_by_query):
            for p in predictions_by_query[qid]:
                fh.write(
                    json.dumps(
                        {
                            "query_id": qid,
                            "video_id": p.video_id,
                            "st": p.start,
                            "ed": p.end,
                            "score": p.score,
                        }
                    )
                    + "\n"
                )


def load_predictions(path) -> dict[str, list[MomentPrediction]]:
    path = Path(path)
    if not path.is_file():
        raise IngestError(path)
    out: dict[str, list[MomentPrediction]] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.setdefault(rec["query_id"], []).append(
            MomentPrediction(rec["video_id"], int(rec["st"]), int(rec["ed"]), float(rec["score"]))
        )
    return out
