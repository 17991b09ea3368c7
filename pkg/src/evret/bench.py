"""Retrieval efficiency and memory benchmark.

Compares event-mode against frame-mode indexes built from the same
parameters: stored-vector counts, the exact memory formula
count * D * 4 bytes, and steady-state top-10 scan latency.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from evret.config import RunConfig
from evret.corpus import FeatureCorpus
from evret.errors import ArgumentError
from evret.nn import ParameterSet, no_grad
from evret.pipeline import CorpusIndex, encode_query_vectors, retrieve_videos

HEADER_BYTES = 16


@dataclass
class BenchReport:
    mode: str
    retrieval_latency_ms: float
    vector_count: int
    memory_bytes: int
    num_queries: int
    repetitions: int
    localization_latency_ms: float | None = None
    throughput_qps: float | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "retrieval_latency_ms": self.retrieval_latency_ms,
            "vector_count": self.vector_count,
            "memory_bytes": self.memory_bytes,
            "num_queries": self.num_queries,
            "repetitions": self.repetitions,
            "localization_latency_ms": self.localization_latency_ms,
            "throughput_qps": self.throughput_qps,
        }


def bench_retrieval(
    index: CorpusIndex,
    query_vectors: list[tuple[np.ndarray, np.ndarray | None]],
    repetitions: int = 3,
    warmup: int = 5,
    top_k: int = 10,
) -> BenchReport:
    """Mean wall-clock latency of top-K retrieval over the given queries.

    Index build and model load are excluded; at least ``warmup`` queries
    run before timing starts.
    """
    if not query_vectors:
        raise ArgumentError("bench_retrieval needs at least one query")
    if repetitions < 1:
        raise ArgumentError("repetitions must be >= 1")
    index.finalize()
    for qf, qs in (query_vectors * ((warmup // len(query_vectors)) + 1))[:warmup]:
        retrieve_videos(qf, qs, index, top_k)
    elapsed = 0.0
    runs = 0
    for _ in range(repetitions):
        for qf, qs in query_vectors:
            t0 = time.perf_counter()
            retrieve_videos(qf, qs, index, top_k)
            elapsed += time.perf_counter() - t0
            runs += 1
    return BenchReport(
        mode=index.mode,
        retrieval_latency_ms=1e3 * elapsed / runs,
        vector_count=index.vector_count(),
        memory_bytes=index.memory_bytes(),
        num_queries=len(query_vectors),
        repetitions=repetitions,
    )


def bench_throughput(
    index: CorpusIndex,
    query_vectors: list[tuple[np.ndarray, np.ndarray | None]],
    threads: int,
    repetitions: int = 3,
    top_k: int = 10,
) -> float:
    """Queries per second with ``threads`` concurrent workers; latency is
    measured single-threaded, this measures aggregate throughput."""
    from concurrent.futures import ThreadPoolExecutor

    if threads < 1:
        raise ArgumentError("threads must be >= 1")
    index.finalize()
    jobs = query_vectors * repetitions
    with ThreadPoolExecutor(max_workers=threads) as pool:
        t0 = time.perf_counter()
        list(pool.map(lambda qv: retrieve_videos(qv[0], qv[1], index, top_k), jobs))
        elapsed = time.perf_counter() - t0
    return len(jobs) / elapsed


def measure_localization_latency(
    corpus: FeatureCorpus,
    queries,
    loc_params: ParameterSet,
    cfg: RunConfig,
    videos_per_query: int = 10,
) -> float:
    """Mean per-query latency (ms) of localizing over ``videos_per_query``
    videos, the second-stage cost."""
    from evret.pipeline import localize_moments

    if not queries:
        raise ArgumentError("need at least one query")
    vids = corpus.videos[:videos_per_query]
    t0 = time.perf_counter()
    with no_grad():
        for q in queries:
            for v in vids:
                localize_moments(v, q.token_features, cfg, loc_params)
    return 1e3 * (time.perf_counter() - t0) / len(queries)


def index_bytes_on_disk(index_dir) -> int:
    """Total vector payload bytes of a saved index (file sizes minus the
    16-byte codec headers)."""
    index_dir = Path(index_dir)
    return sum(p.stat().st_size - HEADER_BYTES for p in index_dir.glob("*.evtf"))


def bench_modes(
    corpus: FeatureCorpus,
    cfg: RunConfig,
    ret_params: ParameterSet,
    num_queries: int = 50,
    repetitions: int = 3,
    threads: int = 0,
) -> dict[str, BenchReport]:
    """Build event- and frame-mode indexes from the same parameters and
    benchmark both on the same queries. ``threads`` > 0 additionally
    measures parallel throughput."""
    queries = corpus.queries[:num_queries]
    if not queries:
        raise ArgumentError("corpus has no queries")
    qvecs = [encode_query_vectors(q.token_features, cfg, ret_params) for q in queries]
    reports = {}
    for mode in ("event", "frame"):
        index = CorpusIndex.build(corpus, cfg, ret_params, mode=mode)
        rep = bench_retrieval(index, qvecs, repetitions=repetitions, top_k=cfg.top_k)
        if threads > 0:
            rep.throughput_qps = bench_throughput(index, qvecs, threads, repetitions, cfg.top_k)
        reports[mode] = rep
    return reports
