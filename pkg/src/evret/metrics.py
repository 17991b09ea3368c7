"""Evaluation: span IoU, recall metrics for VR/SVMR/VCMR, and the
event-oracle overlap analysis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evret.corpus import FeatureCorpus
from evret.errors import ArgumentError
from evret.events import segment_events

VR_KS = (1, 5, 10, 100)
MOMENT_KS = (1, 5, 10, 100)
MOMENT_IOUS = (0.5, 0.7)


def iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """Intersection over union of two inclusive frame spans."""
    a_st, a_ed = a
    b_st, b_ed = b
    if a_st > a_ed or b_st > b_ed:
        raise ArgumentError(f"invalid inclusive span: {a} vs {b}")
    inter = min(a_ed, b_ed) - max(a_st, b_st) + 1
    if inter <= 0:
        return 0.0
    union = (a_ed - a_st + 1) + (b_ed - b_st + 1) - inter
    return inter / union


def recall_vr(rankings: dict[str, list[str]], ground_truth: dict[str, str], K: int) -> float:
    """Percent of queries whose correct video appears in the top K."""
    if not ground_truth:
        raise ArgumentError("no queries to evaluate")
    hits = sum(
        1 for qid, gt_vid in ground_truth.items() if gt_vid in rankings.get(qid, [])[:K]
    )
    return 100.0 * hits / len(ground_truth)


def recall_moment(
    predictions: dict[str, list[tuple[str, int, int]]],
    ground_truth: dict[str, tuple[str, int, int]],
    K: int,
    mu: float,
    require_video: bool = True,
) -> float:
    """Percent of queries with a top-K prediction of IoU >= mu against the
    ground-truth moment; ``require_video`` additionally demands the right
    video (VCMR rule; SVMR predictions are already within it)."""
    if not ground_truth:
        raise ArgumentError("no queries to evaluate")
    hits = 0
    for qid, (gt_vid, gt_st, gt_ed) in ground_truth.items():
        for vid, st, ed in predictions.get(qid, [])[:K]:
            if require_video and vid != gt_vid:
                continue
            if iou((st, ed), (gt_st, gt_ed)) >= mu:
                hits += 1
                break
    return 100.0 * hits / len(ground_truth)


def event_oracle_overlap(
    corpus: FeatureCorpus,
    strategy: str,
    parameter: float,
    mus: tuple[float, ...] = MOMENT_IOUS,
) -> dict[float, float]:
    """For each query, the best IoU between any extracted event span and
    its moment; reports the percent exceeding each threshold.

    Events are extracted from the raw frame features (no trained model),
    so this measures how well untrained segmentation can cover moments.
    """
    if not corpus.queries:
        raise ArgumentError("no queries to evaluate")
    segs = {
        v.video_id: segment_events(v.frame_features, strategy, parameter) for v in corpus.videos
    }
    best: list[float] = []
    for q in corpus.queries:
        seg = segs[q.video_id]
        moment = (q.moment[0], q.moment[1] - 1)
        best.append(max(iou((sp.start, sp.end - 1), moment) for sp in seg.spans))
    best_arr = np.array(best)
    return {mu: float(100.0 * np.mean(best_arr >= mu)) for mu in mus}


@dataclass
class EvalReport:
    """Recall metrics over one split, as percentages."""

    num_queries: int
    vr: dict[int, float] | None = None
    svmr: dict[tuple[int, float], float] | None = None
    vcmr: dict[tuple[int, float], float] | None = None
    config_echo: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        if self.vr is not None:
            for k, v in sorted(self.vr.items()):
                out.append({"task": "VR", "K": k, "iou": None, "value": round(v, 2)})
        for task, table in (("SVMR", self.svmr), ("VCMR", self.vcmr)):
            if table is None:
                continue
            for (k, mu), v in sorted(table.items()):
                out.append({"task": task, "K": k, "iou": mu, "value": round(v, 2)})
        return out

    def to_table(self) -> str:
        lines = [f"{'task':<6} {'K':>4} {'IoU':>5} {'R@K (%)':>9}"]
        for row in self.rows():
            mu = "-" if row["iou"] is None else f"{row['iou']:.1f}"
            lines.append(f"{row['task']:<6} {row['K']:>4} {mu:>5} {row['value']:>9.2f}")
        lines.append(f"queries: {self.num_queries}")
        return "\n".join(lines)


def evaluate(
    corpus: FeatureCorpus,
    split: str,
    rankings: dict[str, list[str]] | None = None,
    svmr_predictions: dict[str, list[tuple[str, int, int]]] | None = None,
    vcmr_predictions: dict[str, list[tuple[str, int, int]]] | None = None,
    config_echo: dict | None = None,
) -> EvalReport:
    """Compute every metric for which predictions were supplied."""
    queries = corpus.queries_for_split(split)
    if not queries:
        raise ArgumentError(f"split {split!r} has no queries")
    gt_video = {q.query_id: q.video_id for q in queries}
    gt_moment = {
        q.query_id: (q.video_id, q.moment[0], q.moment[1] - 1) for q in queries
    }
    report = EvalReport(num_queries=len(queries), config_echo=config_echo or {})
    if rankings is not None:
        report.vr = {k: recall_vr(rankings, gt_video, k) for k in VR_KS}
    if svmr_predictions is not None:
        report.svmr = {
            (k, mu): recall_moment(svmr_predictions, gt_moment, k, mu, require_video=False)
            for k in MOMENT_KS
            for mu in MOMENT_IOUS
        }
    if vcmr_predictions is not None:
        report.vcmr = {
            (k, mu): recall_moment(vcmr_predictions, gt_moment, k, mu, require_video=True)
            for k in MOMENT_KS
            for mu in MOMENT_IOUS
        }
    return report
