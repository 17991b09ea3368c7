"""Gradient verification suite for every training loss.

Small fixed instances: a two-video corpus with subtitles so all loss
terms are exercised (positive, weak positive, hardest negatives,
bidirectional, both branches; frame and event Shared-Norm heads). The
window strategy keeps segmentation independent of the parameters and
mined sample indices are frozen, so each loss is smooth around the
evaluation point.
"""

from __future__ import annotations

import dataclasses

from evret.config import RunConfig
from evret.contrastive import mine_batch_samples, retriever_batch_loss
from evret.corpus import synthesize_corpus
from evret.localizer import localizer_params_for_corpus, localizer_query_loss
from evret.nn import ParameterSet, gradient_check, no_grad
from evret.retriever import params_for_corpus

GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_STEP = 1e-4


def _tiny_config() -> RunConfig:
    return RunConfig(
        dim=8,
        layers=1,
        heads=2,
        frame_anchors=[2, "all"],
        event_anchors=[1, "all"],
        conv_kernel_size=3,
        max_frames=8,
        max_tokens=8,
        strategy="window",
        window=3,
        temperature=0.01,
    )


def _tiny_corpus(seed: int):
    return synthesize_corpus(
        seed,
        M=2,
        T=6,
        D_raw=6,
        events_per_video=2,
        queries_per_video=1,
        with_subtitles=True,
        min_tokens=2,
        max_tokens=3,
    )


def retriever_loss_case(seed: int = 19) -> tuple:
    """(loss_fn, params) for the full two-branch contrastive loss."""
    cfg = _tiny_config()
    corpus = _tiny_corpus(seed)
    queries = list(corpus.queries_for_split("train"))
    ps = params_for_corpus(cfg, corpus, seed)
    with no_grad():
        samples = mine_batch_samples(queries, corpus, cfg, ps)

    def loss_fn(params: ParameterSet):
        loss, _, _ = retriever_batch_loss(queries, corpus, cfg, params, fixed_samples=samples)
        return loss

    return loss_fn, ps


def localizer_loss_case(seed: int = 53) -> tuple:
    """(loss_fn, params) for the Shared-Norm loss with one positive and
    one negative video."""
    cfg = dataclasses.replace(_tiny_config(), gamma=0.8)
    corpus = _tiny_corpus(seed)
    query = corpus.queries_for_split("train")[0]
    neg_ids = [v.video_id for v in corpus.videos if v.video_id != query.video_id][:1]
    ps = localizer_params_for_corpus(cfg, corpus, seed)

    def loss_fn(params: ParameterSet):
        return localizer_query_loss(query, corpus, neg_ids, cfg, params)

    return loss_fn, ps


def run_gradcheck(step: float = GRADCHECK_STEP) -> dict[str, float]:
    """Max relative finite-difference error per training loss."""
    results = {}
    for name, case in (
        ("retriever_contrastive", retriever_loss_case),
        ("localizer_shared_norm", localizer_loss_case),
    ):
        loss_fn, ps = case()
        results[name] = gradient_check(loss_fn, ps, step=step)
    return results
