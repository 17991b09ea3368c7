"""One-tower event-aware moment localizer.

Shares the retriever's hierarchical layout, but every encoder layer also
cross-attends from video tokens to the encoded query tokens. Two 1-D
convolution heads score each frame as a start/end boundary; two affine
heads do the same for events. Training uses Shared-Norm: the boundary
softmax runs over the concatenated positions of the correct video and
sampled negative videos.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from evret.config import RunConfig
from evret.contrastive import save_periodic_checkpoint
from evret.corpus import FeatureCorpus, QueryRecord, VideoRecord
from evret.errors import ArgumentError, TrainingError
from evret.events import EventSegmentation
from evret.nn import (
    ParameterSet,
    Tensor,
    add_encoder_layer_params,
    add_linear,
    concat,
    conv1d_forward,
    make_optimizer,
    no_grad,
)
from evret.retriever import (
    VideoEncoding,
    encode_query_tokens,
    encode_video,
    pooled_event_tokens,
)

logger = logging.getLogger(__name__)


@dataclass
class ConfidenceProfile:
    lf_st: Tensor  # [T]
    lf_ed: Tensor  # [T]
    le_st: Tensor  # [N]
    le_ed: Tensor  # [N]
    segmentation: EventSegmentation


@dataclass(frozen=True)
class MomentTarget:
    """Boundary supervision: inclusive frame indices plus the events
    containing them."""

    start_frame: int
    end_frame: int
    start_event: int
    end_event: int


def moment_target(moment: tuple[int, int], segmentation: EventSegmentation) -> MomentTarget:
    st, ed = moment
    if not (0 <= st < ed <= segmentation.num_frames):
        raise ArgumentError(f"moment [{st}, {ed}) invalid for T={segmentation.num_frames}")
    end_incl = ed - 1
    return MomentTarget(st, end_incl, segmentation.span_of(st), segmentation.span_of(end_incl))


def build_localizer_params(
    cfg: RunConfig, d_raw: int, d_query_raw: int, d_sub_raw: int | None, seed: int
) -> ParameterSet:
    ps = ParameterSet(seed)
    D = cfg.dim
    add_linear(ps, "loc.frame_proj", d_raw, D)
    if d_sub_raw is not None:
        add_linear(ps, "loc.sub_proj", d_sub_raw, D)
    ps.add("loc.pos_emb", (cfg.max_frames, D), fan_in=D)
    ps.add("loc.mod_emb", (2, D), fan_in=D)
    for i in range(cfg.layers):
        add_encoder_layer_params(ps, f"loc.frame.l{i}", D, cross=True)
    for i in range(cfg.layers):
        add_encoder_layer_params(ps, f"loc.event.l{i}", D, cross=True)
    add_linear(ps, "loc.q_proj", d_query_raw, D)
    ps.add("loc.q_pos", (cfg.max_tokens, D), fan_in=D)
    for i in range(cfg.layers):
        add_encoder_layer_params(ps, f"loc.query.l{i}", D)
    K = cfg.conv_kernel_size
    for head in ("head_st", "head_ed"):
        ps.add(f"loc.{head}.k", (K, D, 1), fan_in=K * D)
        ps.add(f"loc.{head}.b", (1,), fan_in=K * D)
    add_linear(ps, "loc.ehead_st", D, 1)
    add_linear(ps, "loc.ehead_ed", D, 1)
    return ps


def localizer_params_for_corpus(cfg: RunConfig, corpus: FeatureCorpus, seed: int) -> ParameterSet:
    d_raw = corpus.videos[0].frame_features.shape[1]
    d_query = corpus.queries[0].token_features.shape[1]
    d_sub = corpus.videos[0].subtitle_features.shape[1] if corpus.has_subtitles else None
    return build_localizer_params(cfg, d_raw, d_query, d_sub, seed)


def encode_fused(
    video: VideoRecord, token_features: np.ndarray, cfg: RunConfig, ps: ParameterSet
) -> VideoEncoding:
    """Query-conditioned hierarchical encoding of one video."""
    q_tokens = encode_query_tokens(token_features, cfg, ps, prefix="loc")
    return encode_video(video, cfg, ps, query_tokens=q_tokens, prefix="loc")


def frame_confidences(
    frame_reps: Tensor, sub_frame_reps: Tensor | None, ps: ParameterSet
) -> tuple[Tensor, Tensor]:
    feats = frame_reps if sub_frame_reps is None else frame_reps + sub_frame_reps
    lf_st = conv1d_forward(feats, ps["loc.head_st.k"], ps["loc.head_st.b"]).reshape(-1)
    lf_ed = conv1d_forward(feats, ps["loc.head_ed.k"], ps["loc.head_ed.b"]).reshape(-1)
    return lf_st, lf_ed


def event_confidences(
    event_reps: Tensor,
    sub_reps: Tensor | None,
    segmentation: EventSegmentation,
    ps: ParameterSet,
) -> tuple[Tensor, Tensor]:
    feats = event_reps
    if sub_reps is not None:
        feats = feats + pooled_event_tokens(sub_reps, segmentation)
    le_st = (feats @ ps["loc.ehead_st.w"] + ps["loc.ehead_st.b"]).reshape(-1)
    le_ed = (feats @ ps["loc.ehead_ed.w"] + ps["loc.ehead_ed.b"]).reshape(-1)
    return le_st, le_ed


def confidence_profile(enc: VideoEncoding, ps: ParameterSet) -> ConfidenceProfile:
    lf_st, lf_ed = frame_confidences(enc.frame_reps, enc.sub_frame_reps, ps)
    le_st, le_ed = event_confidences(enc.event_reps, enc.sub_reps, enc.segmentation, ps)
    return ConfidenceProfile(lf_st, lf_ed, le_st, le_ed, enc.segmentation)


def _shared_norm_ce(pos_logits: Tensor, neg_logits: list[Tensor], target: int) -> Tensor:
    if not (0 <= target < pos_logits.shape[0]):
        raise ArgumentError(f"target {target} outside positive video's {pos_logits.shape[0]} positions")
    logits = concat([pos_logits] + list(neg_logits)) if neg_logits else pos_logits
    return logits.logsumexp(axis=-1) - logits[target]


def shared_norm_loss(
    pos_profile: ConfidenceProfile,
    target: MomentTarget,
    neg_profiles: list[ConfidenceProfile],
    gamma: float,
) -> Tensor:
    """Cross-entropy over boundary positions of the positive video
    concatenated with all negative videos; frame losses plus
    gamma-weighted event losses."""
    frame_loss = _shared_norm_ce(
        pos_profile.lf_st, [p.lf_st for p in neg_profiles], target.start_frame
    ) + _shared_norm_ce(pos_profile.lf_ed, [p.lf_ed for p in neg_profiles], target.end_frame)
    event_loss = _shared_norm_ce(
        pos_profile.le_st, [p.le_st for p in neg_profiles], target.start_event
    ) + _shared_norm_ce(pos_profile.le_ed, [p.le_ed for p in neg_profiles], target.end_event)
    return frame_loss + gamma * event_loss


def localizer_query_loss(
    query: QueryRecord,
    corpus: FeatureCorpus,
    neg_ids: list[str],
    cfg: RunConfig,
    ps: ParameterSet,
) -> Tensor:
    # The query tokens are encoded once and shared by the positive and
    # all negative videos.
    q_tokens = encode_query_tokens(query.token_features, cfg, ps, prefix="loc")
    pos_enc = encode_video(corpus.video(query.video_id), cfg, ps, q_tokens, prefix="loc")
    pos_profile = confidence_profile(pos_enc, ps)
    neg_profiles = [
        confidence_profile(
            encode_video(corpus.video(vid), cfg, ps, q_tokens, prefix="loc"), ps
        )
        for vid in neg_ids
    ]
    target = moment_target(query.moment, pos_enc.segmentation)
    return shared_norm_loss(pos_profile, target, neg_profiles, cfg.gamma)


def rank_training_videos(
    corpus: FeatureCorpus, cfg: RunConfig, retriever_params: ParameterSet
) -> dict[str, list[str]]:
    """Retriever ranking of all corpus videos for every training query."""
    # Imported here: pipeline depends on this module for inference.
    from evret.pipeline import CorpusIndex, encode_query_vectors, retrieve_videos

    with no_grad():
        index = CorpusIndex.build(corpus, cfg, retriever_params, mode="event")
        rankings = {}
        for q in corpus.queries_for_split("train"):
            qf, qs = encode_query_vectors(q.token_features, cfg, retriever_params)
            ranked = retrieve_videos(qf, qs, index, K=index.num_videos)
            rankings[q.query_id] = [vid for vid, _ in ranked]
    return rankings


def train_localizer(
    corpus: FeatureCorpus,
    retriever_params: ParameterSet,
    cfg: RunConfig,
    log_path=None,
    checkpoint_dir=None,
) -> tuple[ParameterSet, list[dict]]:
    """Shared-Norm training; negatives are drawn per step from the
    retriever's top-ranked training videos, excluding the correct one."""
    queries = list(corpus.queries_for_split("train"))
    if not queries:
        raise ArgumentError("train split is empty")
    ps = localizer_params_for_corpus(cfg, corpus, cfg.seed + 1)
    opt = make_optimizer(cfg.optimizer, ps, cfg.learning_rate)
    rankings = rank_training_videos(corpus, cfg, retriever_params)
    pools = {
        q.query_id: [vid for vid in rankings[q.query_id][: cfg.negative_pool] if vid != q.video_id]
        for q in queries
    }
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(queries))
        epoch_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [queries[i] for i in order[lo : lo + cfg.batch_size]]
            terms = []
            for q in batch:
                pool = pools[q.query_id]
                n_neg = min(cfg.negatives, len(pool))
                chosen = rng.choice(len(pool), size=n_neg, replace=False) if n_neg else []
                neg_ids = [pool[i] for i in chosen]
                terms.append(localizer_query_loss(q, corpus, neg_ids, cfg, ps))
            loss = terms[0]
            for t in terms[1:]:
                loss = loss + t
            loss = loss * (1.0 / len(terms))
            if not np.isfinite(loss.item()):
                raise TrainingError(step)
            ps.zero_grad()
            loss.backward()
            opt.step()
            log.append({"step": step, "epoch": epoch, "L": loss.item()})
            epoch_loss += loss.item()
            step += 1
        logger.info("localizer epoch %d: loss %.6f", epoch, epoch_loss)
        save_periodic_checkpoint(ps, cfg, epoch, checkpoint_dir)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
    return ps, log
