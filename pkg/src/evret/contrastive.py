"""Two-branch contrastive training of the retriever.

Per query: the positive frame is the in-moment frame most similar to the
query, the weak positive is the best frame outside the moment, and each
negative video contributes its single most query-similar frame (hardest
mining). The event branch mirrors this over event units: the positive
event is the span containing the positive frame. Losses are InfoNCE with
a bidirectional (unit-to-query) term; videos sharing a batch act as
negatives for each other's queries.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from evret.config import RunConfig
from evret.corpus import FeatureCorpus, QueryRecord
from evret.errors import ArgumentError, TrainingError
from evret.nn import ParameterSet, Tensor, as_tensor, concat, cosine, make_optimizer
from evret.retriever import (
    QueryEncoding,
    VideoEncoding,
    encode_query,
    encode_video,
    params_for_corpus,
)

logger = logging.getLogger(__name__)


@dataclass
class ContrastiveSample:
    """Mined indices for one query and one branch.

    ``positive``/``weak_positive``/``negatives`` index frames for the
    frame branch and events for the event branch. The ``sub_*`` fields
    carry the subtitle-token (time) indices paired with each event unit;
    they stay None for the frame branch (whose indices already are time
    indices) and for corpora without subtitles.
    """

    branch: str
    positive: int
    weak_positive: int | None
    negatives: list[tuple[str, int]]
    sub_positive: int | None = None
    sub_weak: int | None = None
    sub_negatives: list[tuple[str, int]] | None = None


def _cos_rows(q: np.ndarray, rows: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.linalg.norm(rows, axis=1) * np.linalg.norm(q), eps)
    return rows @ q / denom


def frame_similarity_profile(q: QueryEncoding, v: VideoEncoding) -> np.ndarray:
    """Per-frame query similarity: average of the visual and subtitle
    cosines (visual alone without subtitles)."""
    vis = _cos_rows(q.q_frame.data, v.frame_reps.data)
    if v.sub_frame_reps is None or q.q_sub is None:
        return vis
    return 0.5 * (vis + _cos_rows(q.q_sub.data, v.sub_frame_reps.data))


def sample_frame_branch(
    q: QueryEncoding,
    pos_video: VideoEncoding,
    moment: tuple[int, int],
    negatives: list[VideoEncoding],
) -> ContrastiveSample:
    st, ed = moment
    T = pos_video.frame_reps.shape[0]
    if not (0 <= st < ed <= T):
        raise ArgumentError(f"moment [{st}, {ed}) invalid for T={T}")
    sims = frame_similarity_profile(q, pos_video)
    positive = st + int(np.argmax(sims[st:ed]))
    weak = None
    if ed - st < T:
        masked = sims.copy()
        masked[st:ed] = -np.inf
        weak = int(np.argmax(masked))
    negs = [
        (nv.video_id, int(np.argmax(frame_similarity_profile(q, nv)))) for nv in negatives
    ]
    return ContrastiveSample("frame", positive, weak, negs)


def sample_event_branch(
    q: QueryEncoding,
    pos_video: VideoEncoding,
    negatives: list[VideoEncoding],
    frame_sample: ContrastiveSample,
) -> ContrastiveSample:
    seg = pos_video.segmentation
    positive = seg.span_of(frame_sample.positive)
    weak = None
    if frame_sample.weak_positive is not None:
        candidate = seg.span_of(frame_sample.weak_positive)
        if candidate != positive:
            weak = candidate
    negs = [
        (nv.video_id, int(np.argmax(_cos_rows(q.q_frame.data, nv.event_reps.data))))
        for nv in negatives
    ]
    with_subs = pos_video.sub_reps is not None and q.q_sub is not None
    sub_pos = sub_weak = sub_negs = None
    if with_subs:
        sub_pos = frame_sample.positive
        sub_weak = frame_sample.weak_positive if weak is not None else None
        sub_negs = [
            (nv.video_id, int(np.argmax(_cos_rows(q.q_sub.data, nv.sub_reps.data))))
            for nv in negatives
        ]
    return ContrastiveSample("event", positive, weak, negs, sub_pos, sub_weak, sub_negs)


def similarity_rf(q: QueryEncoding, frame_rep: Tensor, subtitle_rep: Tensor | None) -> Tensor:
    """Average of query-frame and query-subtitle cosines (the subtitle
    term is optional)."""
    sim = cosine(q.q_frame, frame_rep)
    if subtitle_rep is not None and q.q_sub is not None:
        sim = 0.5 * (sim + cosine(q.q_sub, subtitle_rep))
    return sim


def event_unit_similarity(
    q: QueryEncoding, v: VideoEncoding, event_idx: int, sub_idx: int | None
) -> Tensor:
    sim = cosine(q.q_frame, v.event_reps[event_idx])
    if sub_idx is not None and v.sub_reps is not None and q.q_sub is not None:
        sim = 0.5 * (sim + cosine(q.q_sub, v.sub_reps[sub_idx]))
    return sim


def info_nce(pos_sim, neg_sims, t: float) -> Tensor:
    """-log( e^{pos/t} / (e^{pos/t} + sum e^{neg/t}) ); zero when there
    are no negatives."""
    if t <= 0:
        raise ArgumentError(f"temperature must be positive, got {t}")
    if not neg_sims:
        return as_tensor(0.0)
    sims = [as_tensor(pos_sim)] + [as_tensor(s) for s in neg_sims]
    logits = concat([s.reshape(1) for s in sims]) * (1.0 / t)
    return logits.logsumexp(axis=-1) - logits[0]


@dataclass
class BatchItem:
    """Everything one query contributes to a training step."""

    query: QueryRecord
    q_enc: QueryEncoding
    pos_enc: VideoEncoding
    neg_encs: list[VideoEncoding]
    frame_sample: ContrastiveSample
    event_sample: ContrastiveSample


def build_batch_item(
    query: QueryRecord,
    q_enc: QueryEncoding,
    pos_enc: VideoEncoding,
    neg_encs: list[VideoEncoding],
) -> BatchItem:
    fs = sample_frame_branch(q_enc, pos_enc, query.moment, neg_encs)
    es = sample_event_branch(q_enc, pos_enc, neg_encs, fs)
    return BatchItem(query, q_enc, pos_enc, neg_encs, fs, es)


def _frame_rep_pair(v: VideoEncoding, idx: int) -> tuple[Tensor, Tensor | None]:
    sub = v.sub_frame_reps[idx] if v.sub_frame_reps is not None else None
    return v.frame_reps[idx], sub


def _mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def frame_branch_loss(
    items: list[BatchItem], enc_by_id: dict[str, VideoEncoding], t: float, omega: float
) -> Tensor:
    """L^f + omega * L^f_w + L^q over the batch.

    L^q anchors the positive frame and contrasts its own query against
    the other queries in the batch; with a single query it contributes 0.
    """
    pos_terms, weak_terms, bidir_terms = [], [], []
    for i, item in enumerate(items):
        s = item.frame_sample
        neg_sims = [
            similarity_rf(item.q_enc, *_frame_rep_pair(enc_by_id[vid], idx))
            for vid, idx in s.negatives
        ]
        frame_rep, sub_rep = _frame_rep_pair(item.pos_enc, s.positive)
        pos_sim = similarity_rf(item.q_enc, frame_rep, sub_rep)
        pos_terms.append(info_nce(pos_sim, neg_sims, t))
        if s.weak_positive is not None:
            weak_rep, weak_sub = _frame_rep_pair(item.pos_enc, s.weak_positive)
            weak_sim = similarity_rf(item.q_enc, weak_rep, weak_sub)
            weak_terms.append(info_nce(weak_sim, neg_sims, t))
        other_qs = [
            similarity_rf(other.q_enc, frame_rep, sub_rep)
            for j, other in enumerate(items)
            if j != i
        ]
        if other_qs:
            bidir_terms.append(info_nce(pos_sim, other_qs, t))
    loss = _mean(pos_terms)
    if weak_terms:
        loss = loss + omega * _mean(weak_terms)
    if bidir_terms:
        loss = loss + _mean(bidir_terms)
    return loss


def event_branch_loss(
    items: list[BatchItem], enc_by_id: dict[str, VideoEncoding], t: float, omega: float
) -> Tensor:
    pos_terms, weak_terms, bidir_terms = [], [], []
    for i, item in enumerate(items):
        s = item.event_sample
        sub_negs = s.sub_negatives or [(vid, None) for vid, _ in s.negatives]
        neg_sims = [
            event_unit_similarity(item.q_enc, enc_by_id[vid], idx, sub_idx)
            for (vid, idx), (_, sub_idx) in zip(s.negatives, sub_negs)
        ]
        pos_sim = event_unit_similarity(item.q_enc, item.pos_enc, s.positive, s.sub_positive)
        pos_terms.append(info_nce(pos_sim, neg_sims, t))
        if s.weak_positive is not None:
            weak_sim = event_unit_similarity(
                item.q_enc, item.pos_enc, s.weak_positive, s.sub_weak
            )
            weak_terms.append(info_nce(weak_sim, neg_sims, t))
        other_qs = [
            event_unit_similarity(other.q_enc, item.pos_enc, s.positive, s.sub_positive)
            for j, other in enumerate(items)
            if j != i
        ]
        if other_qs:
            bidir_terms.append(info_nce(pos_sim, other_qs, t))
    loss = _mean(pos_terms)
    if weak_terms:
        loss = loss + omega * _mean(weak_terms)
    if bidir_terms:
        loss = loss + _mean(bidir_terms)
    return loss


def total_retriever_loss(frame_loss, event_loss, lam: float) -> Tensor:
    return lam * as_tensor(frame_loss) + as_tensor(event_loss)


def retriever_batch_loss(
    queries: list[QueryRecord],
    corpus: FeatureCorpus,
    cfg: RunConfig,
    ps: ParameterSet,
    fixed_samples: list[tuple[ContrastiveSample, ContrastiveSample]] | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Encode a batch, mine samples, and assemble the total loss.

    Every distinct video in the batch is encoded once; for each query all
    other distinct batch videos act as negative videos. Passing
    ``fixed_samples`` skips mining and reuses the given indices, which
    keeps the loss a smooth function of the parameters (used by the
    finite-difference gradient checks).
    """
    video_ids: list[str] = []
    for q in queries:
        if q.video_id not in video_ids:
            video_ids.append(q.video_id)
    enc_by_id = {vid: encode_video(corpus.video(vid), cfg, ps) for vid in video_ids}
    items = []
    for i, q in enumerate(queries):
        q_enc = encode_query(q.query_id, q.token_features, cfg, ps)
        pos_enc = enc_by_id[q.video_id]
        neg_encs = [enc_by_id[vid] for vid in video_ids if vid != q.video_id]
        if fixed_samples is None:
            items.append(build_batch_item(q, q_enc, pos_enc, neg_encs))
        else:
            fs, es = fixed_samples[i]
            items.append(BatchItem(q, q_enc, pos_enc, neg_encs, fs, es))
    lf = frame_branch_loss(items, enc_by_id, cfg.temperature, cfg.omega)
    le = event_branch_loss(items, enc_by_id, cfg.temperature, cfg.omega)
    return total_retriever_loss(lf, le, cfg.lam), lf, le


def mine_batch_samples(
    queries: list[QueryRecord], corpus: FeatureCorpus, cfg: RunConfig, ps: ParameterSet
) -> list[tuple[ContrastiveSample, ContrastiveSample]]:
    """Mining pass only: the (frame, event) samples for each query."""
    video_ids: list[str] = []
    for q in queries:
        if q.video_id not in video_ids:
            video_ids.append(q.video_id)
    enc_by_id = {vid: encode_video(corpus.video(vid), cfg, ps) for vid in video_ids}
    out = []
    for q in queries:
        q_enc = encode_query(q.query_id, q.token_features, cfg, ps)
        pos_enc = enc_by_id[q.video_id]
        neg_encs = [enc_by_id[vid] for vid in video_ids if vid != q.video_id]
        item = build_batch_item(q, q_enc, pos_enc, neg_encs)
        out.append((item.frame_sample, item.event_sample))
    return out


def train_retriever(
    corpus: FeatureCorpus, cfg: RunConfig, log_path=None, checkpoint_dir=None
) -> tuple[ParameterSet, list[dict]]:
    """Mini-batch training with in-batch negatives; deterministic in
    cfg.seed. Returns the trained parameters and the per-step loss log."""
    queries = list(corpus.queries_for_split("train"))
    if not queries:
        raise ArgumentError("train split is empty")
    ps = params_for_corpus(cfg, corpus, cfg.seed)
    opt = make_optimizer(cfg.optimizer, ps, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(queries))
        epoch_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [queries[i] for i in order[lo : lo + cfg.batch_size]]
            loss, lf, le = retriever_batch_loss(batch, corpus, cfg, ps)
            if not np.isfinite(loss.item()):
                raise TrainingError(step)
            ps.zero_grad()
            loss.backward()
            opt.step()
            log.append(
                {"step": step, "epoch": epoch, "L_F": lf.item(), "L_E": le.item(), "L": loss.item()}
            )
            epoch_loss += loss.item()
            step += 1
        logger.info("retriever epoch %d: loss %.6f", epoch, epoch_loss)
        save_periodic_checkpoint(ps, cfg, epoch, checkpoint_dir)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
    return ps, log


def save_periodic_checkpoint(ps: ParameterSet, cfg: RunConfig, epoch: int, checkpoint_dir) -> None:
    if checkpoint_dir is None or cfg.checkpoint_every <= 0:
        return
    if (epoch + 1) % cfg.checkpoint_every == 0:
        from pathlib import Path

        from evret.nn import save_checkpoint

        save_checkpoint(ps, Path(checkpoint_dir) / f"epoch{epoch + 1:04d}")
