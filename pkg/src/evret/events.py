"""Event reasoning: segment a frame sequence into contiguous events.

Three strategies over the temporal self-similarity matrix (TSM) of frame
representations: contrastive convolution along the diagonal, K-means on
TSM columns with an index feature, and a fixed-size window.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from evret.corpus import write_features
from evret.errors import ArgumentError, NumericError

TSM_EPS = 1e-8

# 5x5 contrastive kernel: +1 on the same-side 2x2 quadrants, -1 on the
# cross quadrants, 0 on the center row and column. Centered on a diagonal
# position it scores within-segment agreement minus cross-segment
# similarity, peaking where two homogeneous segments meet.
CONTRASTIVE_KERNEL = np.array(
    [
        [1, 1, 0, -1, -1],
        [1, 1, 0, -1, -1],
        [0, 0, 0, 0, 0],
        [-1, -1, 0, 1, 1],
        [-1, -1, 0, 1, 1],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class EventSpan:
    start: int  # inclusive frame index
    end: int  # exclusive frame index

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ArgumentError(f"invalid span [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start

    @property
    def center(self) -> float:
        return (self.start + self.end - 1) / 2.0


@dataclass(frozen=True)
class EventSegmentation:
    spans: tuple[EventSpan, ...]
    strategy: str
    parameter: float

    def __post_init__(self):
        if not self.spans:
            raise ArgumentError("segmentation must contain at least one span")
        if self.spans[0].start != 0:
            raise ArgumentError("first span must start at 0")
        for a, b in zip(self.spans, self.spans[1:]):
            if a.end != b.start:
                raise ArgumentError(f"spans not contiguous at frame {a.end}")

    @property
    def num_events(self) -> int:
        return len(self.spans)

    @property
    def num_frames(self) -> int:
        return self.spans[-1].end

    def span_of(self, frame: int) -> int:
        """Index of the span containing ``frame``."""
        if not (0 <= frame < self.num_frames):
            raise ArgumentError(f"frame {frame} outside [0, {self.num_frames})")
        for i, sp in enumerate(self.spans):
            if frame < sp.end:
                return i
        raise AssertionError("unreachable")


def _spans_from_cuts(cuts: list[int], T: int) -> tuple[EventSpan, ...]:
    edges = [0] + sorted(set(c for c in cuts if 0 < c < T)) + [T]
    return tuple(EventSpan(a, b) for a, b in zip(edges, edges[1:]))


def build_tsm(frames: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities of frame representations.

    The denominator is floored at 1e-8, so an all-zero row has similarity
    0 to every other row; its diagonal entry is defined as 1.
    """
    F = np.asarray(frames, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 1:
        raise ArgumentError(f"frames must be [T x D], got shape {F.shape}")
    if not np.all(np.isfinite(F)):
        raise NumericError("non-finite frame representations")
    norms = np.linalg.norm(F, axis=1)
    denom = np.maximum(np.outer(norms, norms), TSM_EPS)
    tsm = (F @ F.T) / denom
    for i in np.flatnonzero(norms == 0.0):
        tsm[i, i] = 1.0
    return tsm


def convolution_boundary_scores(tsm: np.ndarray) -> np.ndarray:
    """Contrastive-kernel response at every diagonal position, with the
    TSM zero-padded outside its borders."""
    T = tsm.shape[0]
    padded = np.pad(tsm, 2)
    return np.array(
        [float(np.sum(CONTRASTIVE_KERNEL * padded[i : i + 5, i : i + 5])) for i in range(T)]
    )


def boundaries_convolution(tsm: np.ndarray, delta: float) -> EventSegmentation:
    """Cut events where the diagonal kernel response exceeds the score
    mean by more than ``delta``.

    Candidates are restricted to positions where the 5x5 kernel fully
    overlaps the TSM ([2, T-3]); zero-padded corner positions otherwise
    score high on any input. A sharp transition raises the response at
    both positions adjacent to it (the kernel's center row/column is
    zero), so each maximal run of above-threshold candidates is collapsed
    to its midpoint and the span is cut immediately before that frame.
    """
    if delta < 0:
        raise ArgumentError(f"delta must be >= 0, got {delta}")
    T = tsm.shape[0]
    scores = convolution_boundary_scores(tsm)
    excess = scores - scores.mean()
    candidates = [i for i in range(2, T - 2) if excess[i] > delta]
    cuts = []
    run: list[int] = []
    for i in candidates + [-1]:
        if run and i != run[-1] + 1:
            cuts.append(run[len(run) // 2])
            run = []
        if i >= 0:
            run.append(i)
    return EventSegmentation(_spans_from_cuts(cuts, T), "convolution", delta)


def boundaries_kmeans(tsm: np.ndarray, k: int, beta: float = 1.0) -> EventSegmentation:
    """K-means over TSM columns augmented with a scaled index feature;
    contiguity is enforced by cutting wherever the label changes."""
    T = tsm.shape[0]
    if not (1 <= k <= T):
        raise ArgumentError(f"k must be in [1, {T}], got {k}")
    feats = np.concatenate([tsm.T, (beta * np.arange(T) / T)[:, None]], axis=1)
    centers = feats[[(j * T) // k for j in range(k)]].copy()
    labels = np.full(T, -1)
    for _ in range(100):
        d2 = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = feats[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    cuts = [i for i in range(1, T) if labels[i] != labels[i - 1]]
    return EventSegmentation(_spans_from_cuts(cuts, T), "kmeans", k)


def boundaries_window(T: int, w: int) -> EventSegmentation:
    """Even division into windows of ``w`` frames plus a short remainder."""
    if T < 1:
        raise ArgumentError("T must be >= 1")
    if w < 1:
        raise ArgumentError(f"window size must be >= 1, got {w}")
    spans = tuple(EventSpan(i, min(i + w, T)) for i in range(0, T, w))
    return EventSegmentation(spans, "window", w)


def segment_events(frame_reps: np.ndarray, strategy: str, parameter: float) -> EventSegmentation:
    """Dispatch on strategy name; builds the TSM when needed."""
    if strategy == "window":
        return boundaries_window(np.asarray(frame_reps).shape[0], int(parameter))
    tsm = build_tsm(frame_reps)
    if strategy == "convolution":
        return boundaries_convolution(tsm, float(parameter))
    if strategy == "kmeans":
        return boundaries_kmeans(tsm, int(parameter))
    raise ArgumentError(f"unknown strategy {strategy!r}")


def dump_segmentation_debug(tsm: np.ndarray, out_dir, name: str) -> None:
    """Write the TSM and its boundary scores in the binary matrix codec."""
    out_dir = Path(out_dir)
    write_features(tsm, out_dir / f"{name}.tsm.evtf")
    scores = convolution_boundary_scores(tsm)
    write_features(scores.reshape(1, -1), out_dir / f"{name}.scores.evtf")
