"""Two-tower event-aware retriever.

Video side: frame and subtitle tokens (with positional and modality
embeddings) run through a frame-level anchor-masked encoder; event
reasoning segments the contextual frame representations; per-span
max-pooled event vectors plus the subtitle representations run through an
event-level anchor-masked encoder. Query side: a vanilla transformer over
token features followed by modality-specific attention pooling into one
frame-oriented and one subtitle-oriented query vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evret.config import RunConfig, resolve_anchors
from evret.corpus import FeatureCorpus, VideoRecord
from evret.errors import ShapeError
from evret.events import EventSegmentation, EventSpan, segment_events
from evret.nn import (
    ALL,
    AnchorMaskSpec,
    ParameterSet,
    Tensor,
    add_encoder_layer_params,
    add_linear,
    concat,
    cosine,
    encoder_layer,
)


@dataclass
class VideoEncoding:
    """Contextual representations of one video.

    ``frame_reps``/``sub_frame_reps`` come from the frame-level encoder;
    ``event_reps``/``sub_reps`` from the event-level encoder. Subtitle
    fields are None for corpora without subtitles.
    """

    video_id: str
    frame_reps: Tensor  # [T x D]
    sub_frame_reps: Tensor | None  # [T x D]
    event_reps: Tensor  # [N x D]
    sub_reps: Tensor | None  # [T x D]
    segmentation: EventSegmentation


@dataclass
class QueryEncoding:
    query_id: str
    token_reps: Tensor  # [L x D]
    q_frame: Tensor  # [D]
    q_sub: Tensor | None  # [D]
    frame_weights: np.ndarray  # [L], softmax pooling weights
    sub_weights: np.ndarray | None


def build_retriever_params(
    cfg: RunConfig, d_raw: int, d_query_raw: int, d_sub_raw: int | None, seed: int
) -> ParameterSet:
    ps = ParameterSet(seed)
    D = cfg.dim
    add_linear(ps, "ret.frame_proj", d_raw, D)
    if d_sub_raw is not None:
        add_linear(ps, "ret.sub_proj", d_sub_raw, D)
    ps.add("ret.pos_emb", (cfg.max_frames, D), fan_in=D)
    ps.add("ret.mod_emb", (2, D), fan_in=D)
    for i in range(cfg.layers):
        add_encoder_layer_params(ps, f"ret.frame.l{i}", D)
    for i in range(cfg.layers):
        add_encoder_layer_params(ps, f"ret.event.l{i}", D)
    add_linear(ps, "ret.q_proj", d_query_raw, D)
    ps.add("ret.q_pos", (cfg.max_tokens, D), fan_in=D)
    for i in range(cfg.layers):
        add_encoder_layer_params(ps, f"ret.query.l{i}", D)
    ps.add("ret.pool_f.w", (D,), fan_in=D)
    if d_sub_raw is not None:
        ps.add("ret.pool_s.w", (D,), fan_in=D)
    return ps


def params_for_corpus(cfg: RunConfig, corpus: FeatureCorpus, seed: int) -> ParameterSet:
    d_raw = corpus.videos[0].frame_features.shape[1]
    d_query = corpus.queries[0].token_features.shape[1]
    d_sub = (
        corpus.videos[0].subtitle_features.shape[1] if corpus.has_subtitles else None
    )
    return build_retriever_params(cfg, d_raw, d_query, d_sub, seed)


def frame_level_tokens(
    video: VideoRecord, cfg: RunConfig, ps: ParameterSet, prefix: str
) -> tuple[Tensor, np.ndarray]:
    """Project raw features, add positional + modality embeddings, and
    return the frame-level token sequence with its time-distance matrix.

    With subtitles the sequence is 2T tokens (frames then subtitles) and
    both tokens of one time step share a positional index, so anchor
    masks always allow same-time cross-modal attention.
    """
    T = video.num_frames
    if T > cfg.max_frames:
        raise ShapeError(f"video {video.video_id} has {T} frames > max_frames {cfg.max_frames}")
    pos = ps[f"{prefix}.pos_emb"][0:T]
    mod = ps[f"{prefix}.mod_emb"]
    x_f = Tensor(video.frame_features) @ ps[f"{prefix}.frame_proj.w"] + ps[f"{prefix}.frame_proj.b"]
    x_f = x_f + pos + mod[0]
    times = np.arange(T, dtype=np.float64)
    if video.subtitle_features is not None:
        x_s = (
            Tensor(video.subtitle_features) @ ps[f"{prefix}.sub_proj.w"]
            + ps[f"{prefix}.sub_proj.b"]
        )
        x_s = x_s + pos + mod[1]
        tokens = concat([x_f, x_s], axis=0)
        times = np.concatenate([times, times])
    else:
        tokens = x_f
    dist = np.abs(times[:, None] - times[None, :])
    return tokens, dist


def event_level_distance(segmentation: EventSegmentation, T: int, with_subs: bool) -> np.ndarray:
    """Distance matrix for the event-level token layout (N events then T
    subtitles): event pairs use event-index distance, pairs involving a
    subtitle use time distance of span centers."""
    N = segmentation.num_events
    if not with_subs:
        idx = np.arange(N, dtype=np.float64)
        return np.abs(idx[:, None] - idx[None, :])
    size = N + T
    centers = np.array([sp.center for sp in segmentation.spans])
    dist = np.empty((size, size))
    ev = np.arange(N, dtype=np.float64)
    dist[:N, :N] = np.abs(ev[:, None] - ev[None, :])
    t = np.arange(T, dtype=np.float64)
    dist[:N, N:] = np.abs(centers[:, None] - t[None, :])
    dist[N:, :N] = dist[:N, N:].T
    dist[N:, N:] = np.abs(t[:, None] - t[None, :])
    return dist


def pool_event(frame_reps: Tensor, span: EventSpan) -> Tensor:
    """Coordinatewise max of the frame representations inside the span."""
    if span.end > frame_reps.shape[0]:
        raise ShapeError(f"span [{span.start}, {span.end}) outside T={frame_reps.shape[0]}")
    return frame_reps[span.start : span.end].max(axis=0)


def pooled_event_tokens(frame_reps: Tensor, segmentation: EventSegmentation) -> Tensor:
    rows = [pool_event(frame_reps, sp).reshape(1, -1) for sp in segmentation.spans]
    return concat(rows, axis=0)


def encode_video(
    video: VideoRecord,
    cfg: RunConfig,
    ps: ParameterSet,
    query_tokens: Tensor | None = None,
    prefix: str = "ret",
) -> VideoEncoding:
    """Hierarchical encoding of one video.

    ``query_tokens`` is None for the two-tower retriever; the one-tower
    localizer passes encoded query tokens so every layer cross-attends.
    """
    T = video.num_frames
    with_subs = video.subtitle_features is not None
    x, dist = frame_level_tokens(video, cfg, ps, prefix)
    frame_spec = AnchorMaskSpec.from_sizes(resolve_anchors(cfg.frame_anchors), cfg.heads)
    for i in range(cfg.layers):
        x = encoder_layer(x, ps, f"{prefix}.frame.l{i}", frame_spec, dist, query_tokens)
    frame_reps = x[0:T]
    sub_frame_reps = x[T : 2 * T] if with_subs else None

    segmentation = segment_events(frame_reps.data, cfg.strategy, cfg.strategy_parameter())
    events = pooled_event_tokens(frame_reps, segmentation)
    if with_subs:
        y = concat([events, sub_frame_reps], axis=0)
    else:
        y = events
    edist = event_level_distance(segmentation, T, with_subs)
    event_spec = AnchorMaskSpec.from_sizes(resolve_anchors(cfg.event_anchors), cfg.heads)
    for i in range(cfg.layers):
        y = encoder_layer(y, ps, f"{prefix}.event.l{i}", event_spec, edist, query_tokens)
    N = segmentation.num_events
    return VideoEncoding(
        video_id=video.video_id,
        frame_reps=frame_reps,
        sub_frame_reps=sub_frame_reps,
        event_reps=y[0:N],
        sub_reps=y[N:] if with_subs else None,
        segmentation=segmentation,
    )


def encode_query_tokens(
    token_features: np.ndarray, cfg: RunConfig, ps: ParameterSet, prefix: str = "ret"
) -> Tensor:
    L = token_features.shape[0]
    if L > cfg.max_tokens:
        raise ShapeError(f"query has {L} tokens > max_tokens {cfg.max_tokens}")
    x = Tensor(token_features) @ ps[f"{prefix}.q_proj.w"] + ps[f"{prefix}.q_proj.b"]
    x = x + ps[f"{prefix}.q_pos"][0:L]
    spec = AnchorMaskSpec(tuple([ALL] * cfg.heads))
    for i in range(cfg.layers):
        x = encoder_layer(x, ps, f"{prefix}.query.l{i}", spec)
    return x


def _pool_modality(token_reps: Tensor, weight: Tensor) -> tuple[Tensor, np.ndarray]:
    scores = token_reps @ weight
    alpha = scores.softmax(axis=-1)
    return alpha @ token_reps, alpha.data.copy()


def encode_query(
    query_id: str, token_features: np.ndarray, cfg: RunConfig, ps: ParameterSet
) -> QueryEncoding:
    token_reps = encode_query_tokens(token_features, cfg, ps)
    q_frame, w_f = _pool_modality(token_reps, ps["ret.pool_f.w"])
    q_sub, w_s = (None, None)
    if "ret.pool_s.w" in ps:
        q_sub, w_s = _pool_modality(token_reps, ps["ret.pool_s.w"])
    return QueryEncoding(
        query_id=query_id,
        token_reps=token_reps,
        q_frame=q_frame,
        q_sub=q_sub,
        frame_weights=w_f,
        sub_weights=w_s,
    )


def _max_cosine(q: np.ndarray, rows: np.ndarray, eps: float = 1e-8) -> float:
    qn = np.linalg.norm(q)
    norms = np.linalg.norm(rows, axis=1)
    denom = np.maximum(norms * qn, eps)
    return float(np.max(rows @ q / denom))


def video_retrieval_score(q: QueryEncoding, v: VideoEncoding) -> float:
    """Retrieval score: the highest query-event cosine, averaged with the
    highest query-subtitle cosine when the corpus has subtitles."""
    visual = _max_cosine(q.q_frame.data, v.event_reps.data)
    if v.sub_reps is None or q.q_sub is None:
        return visual
    textual = _max_cosine(q.q_sub.data, v.sub_reps.data)
    return 0.5 * (visual + textual)


def query_event_similarity(q: QueryEncoding, v: VideoEncoding, event_idx: int) -> Tensor:
    """Differentiable event-unit similarity used by the event branch."""
    sim = cosine(q.q_frame, v.event_reps[event_idx])
    return sim
