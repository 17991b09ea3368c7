"""Command-line lifecycle: gen, ingest, train-retriever, train-localizer,
build-index, retrieve, localize, vcmr, eval, bench, gradcheck.

Every subcommand accepts --config (a single-object JSON file) plus flag
overrides of any config key; flags win. Artifacts land under --out.
Set EVRET_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from evret import bench as bench_mod
from evret import metrics as metrics_mod
from evret import report as report_mod
from evret.config import RunConfig, parse_config, require_corpus
from evret.contrastive import train_retriever
from evret.corpus import load_corpus, synthesize_corpus, write_corpus
from evret.errors import EvretError
from evret.events import build_tsm, convolution_boundary_scores
from evret.localizer import localizer_params_for_corpus, train_localizer
from evret.nn import load_checkpoint, save_checkpoint
from evret.pipeline import (
    CorpusIndex,
    dump_predictions,
    encode_query_vectors,
    load_predictions,
    retrieve_videos,
    svmr,
    vcmr,
)
from evret.retriever import params_for_corpus
from evret.verification import GRADCHECK_TOLERANCE, run_gradcheck

logger = logging.getLogger("evret")

_FLAG_FIELDS = [f for f in dataclasses.fields(RunConfig)]


def _parse_anchor_list(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        out.append(part if part == "all" else int(part))
    return out


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in _FLAG_FIELDS:
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name in ("frame_anchors", "event_anchors"):
            parser.add_argument(flag, dest=f.name, type=_parse_anchor_list, default=None)
        elif f.type in ("int", "int | None"):
            parser.add_argument(flag, dest=f.name, type=int, default=None)
        elif f.type == "float":
            parser.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=str, default=None)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    flags = {f.name: getattr(args, f.name) for f in _FLAG_FIELDS if hasattr(args, f.name)}
    return parse_config(args.config, flags)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_retriever(cfg: RunConfig, corpus, ckpt_dir):
    ps = params_for_corpus(cfg, corpus, cfg.seed)
    load_checkpoint(ps, ckpt_dir)
    return ps


def _load_localizer(cfg: RunConfig, corpus, ckpt_dir):
    ps = localizer_params_for_corpus(cfg, corpus, cfg.seed + 1)
    load_checkpoint(ps, ckpt_dir)
    return ps


# -- verbs ----------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config_from_args(args)
    corpus = synthesize_corpus(
        cfg.seed,
        M=cfg.videos,
        T=cfg.frames,
        D_raw=cfg.feature_dim,
        events_per_video=cfg.events_per_video,
        queries_per_video=cfg.queries_per_video,
        noise_sigma=cfg.noise_sigma,
        with_subtitles=cfg.with_subtitles,
    )
    manifest = write_corpus(corpus, _out_dir(args))
    print(f"wrote corpus: {manifest} ({corpus.num_videos} videos, {len(corpus.queries)} queries)")
    return 0


def cmd_ingest(args) -> int:
    cfg = _config_from_args(args)
    corpus = load_corpus(require_corpus(cfg))
    subs = "with subtitles" if corpus.has_subtitles else "no subtitles"
    frames = sum(v.num_frames for v in corpus.videos)
    print(
        f"ok: {corpus.num_videos} videos, {frames} frames, "
        f"{len(corpus.queries)} queries, {subs}"
    )
    return 0


def cmd_train_retriever(args) -> int:
    cfg = _config_from_args(args)
    corpus = load_corpus(require_corpus(cfg))
    out = _out_dir(args)
    ps, log = train_retriever(
        corpus,
        cfg,
        log_path=out / "retriever_log.jsonl",
        checkpoint_dir=out / "retriever_checkpoints" if cfg.checkpoint_every else None,
    )
    save_checkpoint(ps, out / "retriever")
    report_mod.save_loss_curves(log, out / "retriever_loss.png")
    print(f"trained retriever: {len(log)} steps, final loss {log[-1]['L']:.6f}")
    return 0


def cmd_train_localizer(args) -> int:
    cfg = _config_from_args(args)
    corpus = load_corpus(require_corpus(cfg))
    out = _out_dir(args)
    ret_ps = _load_retriever(cfg, corpus, args.retriever)
    ps, log = train_localizer(
        corpus,
        ret_ps,
        cfg,
        log_path=out / "localizer_log.jsonl",
        checkpoint_dir=out / "localizer_checkpoints" if cfg.checkpoint_every else None,
    )
    save_checkpoint(ps, out / "localizer")
    report_mod.save_loss_curves(log, out / "localizer_loss.png")
    print(f"trained localizer: {len(log)} steps, final loss {log[-1]['L']:.6f}")
    return 0


def cmd_build_index(args) -> int:
    cfg = _config_from_args(args)
    corpus = load_corpus(require_corpus(cfg))
    out = _out_dir(args)
    ret_ps = _load_retriever(cfg, corpus, args.retriever)
    index = CorpusIndex.build(corpus, cfg, ret_ps, mode=args.mode)
    index_dir = out / f"index_{args.mode}"
    index.save(index_dir)
    if args.dump_tsm:
        from evret.events import dump_segmentation_debug

        debug_dir = out / "tsm_debug"
        for video in corpus.videos:
            tsm = build_tsm(video.frame_features)
            dump_segmentation_debug(tsm, debug_dir, video.video_id)
            report_mod.save_tsm_heatmap(
                tsm, convolution_boundary_scores(tsm), debug_dir / f"{video.video_id}.png"
            )
    print(
        f"built {args.mode} index: {index.num_videos} videos, "
        f"{index.vector_count()} vectors, {index.memory_bytes()} bytes -> {index_dir}"
    )
    return 0


def cmd_retrieve(args) -> int:
    cfg = _config_from_args(args)
    corpus = load_corpus(require_corpus(cfg))
    out = _out_dir(args)
    ret_ps = _load_retriever(cfg, corpus, args.retriever)
    if args.index:
        index = CorpusIndex.load(args.index)
    else:
        index = CorpusIndex.build(corpus, cfg, ret_ps, mode="event")
    path = out / "rankings.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for q in corpus.queries_for_split(cfg.split):
            qf, qs = encode_query_vectors(q.token_features, cfg, ret_ps)
            ranked = retrieve_videos(qf, qs, index, cfg.top_k)
            fh.write(
                json.dumps(
                    {
                        "query_id": q.query_id,
                        "ranking": [vid for vid, _ in ranked],
                        "scores": [score for _, score in ranked],
                    }
                )
                + "\n"
            )
    print(f"wrote {path}")
    return 0


def cmd_localize(args) -> int:
    cfg = _config_from_args(args)
    corpus = load_corpus(require_corpus(cfg))
    out = _out_dir(args)
    loc_ps = _load_localizer(cfg, corpus, args.localizer)
    preds = {
        q.query_id: svmr(q, corpus, loc_ps, cfg) for q in corpus.queries_for_split(cfg.split)
    }
    path = out / "svmr_predictions.jsonl"
    dump_predictions(preds, path)
    print(f"wrote {path}")
    return 0


def cmd_vcmr(args) -> int:
    cfg = _config_from_args(args)
    corpus = load_corpus(require_corpus(cfg))
    out = _out_dir(args)
    ret_ps = _load_retriever(cfg, corpus, args.retriever)
    loc_ps = _load_localizer(cfg, corpus, args.localizer)
    if args.index:
        index = CorpusIndex.load(args.index)
    else:
        index = CorpusIndex.build(corpus, cfg, ret_ps, mode="event")
    preds = {
        q.query_id: vcmr(q, corpus, index, ret_ps, loc_ps, cfg)
        for q in corpus.queries_for_split(cfg.split)
    }
    path = out / "vcmr_predictions.jsonl"
    dump_predictions(preds, path)
    print(f"wrote {path}")
    return 0


def _rankings_from_file(path) -> dict[str, list[str]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["query_id"]] = rec["ranking"]
    return out


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    corpus = load_corpus(require_corpus(cfg))
    out = _out_dir(args)
    rankings = _rankings_from_file(args.rankings) if args.rankings else None

    def _pred_tuples(path):
        by_query = load_predictions(path)
        return {
            qid: [(p.video_id, p.start, p.end) for p in preds]
            for qid, preds in by_query.items()
        }

    svmr_preds = _pred_tuples(args.svmr) if args.svmr else None
    vcmr_preds = _pred_tuples(args.vcmr) if args.vcmr else None
    report = metrics_mod.evaluate(
        corpus,
        cfg.split,
        rankings=rankings,
        svmr_predictions=svmr_preds,
        vcmr_predictions=vcmr_preds,
        config_echo=cfg.echo(),
    )
    with open(out / "eval_report.jsonl", "w", encoding="utf-8") as fh:
        for row in report.rows():
            fh.write(json.dumps(row) + "\n")
        fh.write(json.dumps({"num_queries": report.num_queries, "config": report.config_echo}) + "\n")
    report_mod.save_recall_bars(report, out / "eval_report.png")
    print(report.to_table())
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    corpus = load_corpus(require_corpus(cfg))
    out = _out_dir(args)
    if args.retriever:
        ret_ps = _load_retriever(cfg, corpus, args.retriever)
    else:
        ret_ps = params_for_corpus(cfg, corpus, cfg.seed)
    reports = bench_mod.bench_modes(
        corpus,
        cfg,
        ret_ps,
        num_queries=args.queries,
        repetitions=args.repetitions,
        threads=args.threads,
    )
    if args.localizer:
        loc_ps = _load_localizer(cfg, corpus, args.localizer)
        loc_ms = bench_mod.measure_localization_latency(
            corpus, corpus.queries[: args.queries], loc_ps, cfg, videos_per_query=cfg.top_k
        )
        for rep in reports.values():
            rep.localization_latency_ms = loc_ms
    with open(out / "bench_report.jsonl", "w", encoding="utf-8") as fh:
        for mode, rep in reports.items():
            fh.write(json.dumps(rep.to_dict()) + "\n")
    report_mod.save_bench_bars(reports, out / "bench_report.png")
    print(f"{'mode':<7} {'latency_ms':>12} {'vectors':>9} {'bytes':>12}")
    for mode, rep in reports.items():
        print(
            f"{mode:<7} {rep.retrieval_latency_ms:>12.4f} "
            f"{rep.vector_count:>9d} {rep.memory_bytes:>12d}"
        )
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck()
    failed = False
    for name, err in results.items():
        status = "PASS" if err <= GRADCHECK_TOLERANCE else "FAIL"
        failed = failed or status == "FAIL"
        print(f"{name}: max relative error {err:.3e} {status}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evret", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, fn, **extra_flags):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default="out", help="output directory")
        for flag, kwargs in extra_flags.items():
            p.add_argument(flag, **kwargs)
        _add_config_flags(p)
        p.set_defaults(fn=fn)
        return p

    add("gen", cmd_gen)
    add("ingest", cmd_ingest)
    add("train-retriever", cmd_train_retriever)
    add("train-localizer", cmd_train_localizer, **{"--retriever": {"required": True}})
    add(
        "build-index",
        cmd_build_index,
        **{
            "--retriever": {"required": True},
            "--mode": {"choices": ["event", "frame"], "default": "event"},
            "--dump-tsm": {"action": "store_true"},
        },
    )
    add(
        "retrieve",
        cmd_retrieve,
        **{"--retriever": {"required": True}, "--index": {"default": None}},
    )
    add("localize", cmd_localize, **{"--localizer": {"required": True}})
    add(
        "vcmr",
        cmd_vcmr,
        **{
            "--retriever": {"required": True},
            "--localizer": {"required": True},
            "--index": {"default": None},
        },
    )
    add(
        "eval",
        cmd_eval,
        **{
            "--rankings": {"default": None},
            "--svmr": {"default": None},
            "--vcmr": {"default": None},
        },
    )
    add(
        "bench",
        cmd_bench,
        **{
            "--retriever": {"default": None},
            "--localizer": {"default": None},
            "--queries": {"type": int, "default": 50},
            "--repetitions": {"type": int, "default": 3},
            "--threads": {"type": int, "default": 0},
        },
    )
    add("gradcheck", cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("EVRET_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except EvretError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
