"""Corpus storage: binary feature codec, JSONL manifests, validation, and
a deterministic synthetic-corpus generator.

On-disk layout of a corpus directory:

    videos.jsonl    one JSON object per line:
                    {video_id, num_frames, feature_file,
                     subtitle_feature_file?, frame_duration_s}
    queries.jsonl   {query_id, video_id, token_feature_file,
                     moment: [st, ed], split?}
    features/       .evtf feature matrices referenced above

Feature files: 4 magic bytes "EVTF", uint32 version=1, uint32 T, uint32 D
(little-endian), then T*D float32 little-endian values in row-major order.
All paths in manifests are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from evret.errors import ArgumentError, FormatError, IngestError, NumericError, ValidationError

MAGIC = b"EVTF"
VERSION = 1
HEADER_BYTES = 16

_VIDEO_KEYS = {"video_id", "num_frames", "feature_file", "subtitle_feature_file", "frame_duration_s"}
_QUERY_KEYS = {"query_id", "video_id", "token_feature_file", "moment", "split"}


def write_features(matrix: np.ndarray, path) -> None:
    """Write a real matrix to the binary feature format (float32)."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ArgumentError(f"feature matrix must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"non-finite values in matrix written to {path}")
    rows, cols = m.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", MAGIC, VERSION, rows, cols))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    """Read a matrix written by :func:`write_features`; returns float32."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError:
        raise IngestError(path) from None
    if len(raw) < HEADER_BYTES:
        raise FormatError("header", f">= {HEADER_BYTES} bytes", f"{len(raw)} bytes")
    magic, version, rows, cols = struct.unpack("<4sIII", raw[:HEADER_BYTES])
    if magic != MAGIC:
        raise FormatError("magic", MAGIC, magic)
    if version != VERSION:
        raise FormatError("version", VERSION, version)
    expected = HEADER_BYTES + rows * cols * 4
    if len(raw) != expected:
        raise FormatError("payload bytes", expected - HEADER_BYTES, len(raw) - HEADER_BYTES)
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_BYTES).reshape(rows, cols).copy()
    data.setflags(write=False)
    return data


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    frame_features: np.ndarray
    subtitle_features: np.ndarray | None = None
    frame_duration_s: float = 1.5

    @property
    def num_frames(self) -> int:
        return self.frame_features.shape[0]

    def validate(self) -> None:
        if self.frame_features.ndim != 2 or self.num_frames < 1:
            raise ValidationError(self.video_id, "frame_features must be [T x D] with T >= 1")
        if not np.all(np.isfinite(self.frame_features)):
            raise ValidationError(self.video_id, "frame features must be finite")
        if self.subtitle_features is not None:
            if self.subtitle_features.shape[0] != self.num_frames:
                raise ValidationError(
                    self.video_id,
                    f"subtitle rows {self.subtitle_features.shape[0]} != num_frames {self.num_frames}",
                )
            if not np.all(np.isfinite(self.subtitle_features)):
                raise ValidationError(self.video_id, "subtitle features must be finite")
        if self.frame_duration_s <= 0:
            raise ValidationError(self.video_id, "frame_duration_s must be positive")


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    video_id: str
    token_features: np.ndarray
    moment: tuple[int, int]  # half-open frame span [st, ed)
    split: str = "train"

    @property
    def num_tokens(self) -> int:
        return self.token_features.shape[0]

    def validate(self, video: VideoRecord) -> None:
        if self.token_features.ndim != 2 or self.num_tokens < 1:
            raise ValidationError(self.query_id, "token_features must be [L x D] with L >= 1")
        if not np.all(np.isfinite(self.token_features)):
            raise ValidationError(self.query_id, "token features must be finite")
        st, ed = self.moment
        if not (0 <= st < ed <= video.num_frames):
            raise ValidationError(
                self.query_id, f"moment [{st}, {ed}) outside video range [0, {video.num_frames})"
            )
        if self.split not in ("train", "val"):
            raise ValidationError(self.query_id, f"unknown split {self.split!r}")


@dataclass(frozen=True)
class FeatureCorpus:
    videos: tuple[VideoRecord, ...]
    queries: tuple[QueryRecord, ...]
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._by_id.update({v.video_id: v for v in self.videos})

    @property
    def num_videos(self) -> int:
        return len(self.videos)

    @property
    def has_subtitles(self) -> bool:
        return bool(self.videos) and all(v.subtitle_features is not None for v in self.videos)

    def video(self, video_id: str) -> VideoRecord:
        return self._by_id[video_id]

    def queries_for_split(self, split: str) -> tuple[QueryRecord, ...]:
        return tuple(q for q in self.queries if q.split == split)

    def validate(self) -> None:
        seen: set[str] = set()
        for v in self.videos:
            if v.video_id in seen:
                raise ValidationError(v.video_id, "duplicate video_id")
            seen.add(v.video_id)
            v.validate()
        with_subs = sum(1 for v in self.videos if v.subtitle_features is not None)
        if with_subs not in (0, len(self.videos)):
            raise ValidationError("corpus", "subtitle availability must be uniform across videos")
        qseen: set[str] = set()
        for q in self.queries:
            if q.query_id in qseen:
                raise ValidationError(q.query_id, "duplicate query_id")
            qseen.add(q.query_id)
            if q.video_id not in self._by_id:
                raise ValidationError(q.query_id, f"video_id {q.video_id!r} does not resolve")
            q.validate(self._by_id[q.video_id])


def _read_jsonl(path: Path, allowed: set[str], required: set[str]) -> list[dict]:
    records = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            raise FormatError(f"{path.name}:{line_no}", "JSON object", line[:60]) from None
        if not isinstance(obj, dict):
            raise FormatError(f"{path.name}:{line_no}", "JSON object", type(obj).__name__)
        for key in obj:
            if key not in allowed:
                raise FormatError(f"{path.name}:{line_no} key", sorted(allowed), key)
        for key in required:
            if key not in obj:
                raise FormatError(f"{path.name}:{line_no} key {key!r}", "present", "absent")
        records.append(obj)
    return records


def load_corpus(manifest_path) -> FeatureCorpus:
    """Load and validate a corpus from its videos manifest.

    Accepts either the videos.jsonl path or the corpus directory; the
    queries file is the sibling queries.jsonl.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "videos.jsonl"
    if not manifest_path.is_file():
        raise IngestError(manifest_path)
    base = manifest_path.parent
    queries_path = manifest_path.with_name("queries.jsonl")
    if not queries_path.is_file():
        raise IngestError(queries_path)

    videos = []
    for obj in _read_jsonl(manifest_path, _VIDEO_KEYS, {"video_id", "num_frames", "feature_file"}):
        frames = read_features(base / obj["feature_file"])
        if frames.shape[0] != obj["num_frames"]:
            raise FormatError(
                f"num_frames of {obj['video_id']}", obj["num_frames"], frames.shape[0]
            )
        subs = None
        if obj.get("subtitle_feature_file"):
            subs = read_features(base / obj["subtitle_feature_file"])
        videos.append(
            VideoRecord(
                video_id=obj["video_id"],
                frame_features=frames,
                subtitle_features=subs,
                frame_duration_s=float(obj.get("frame_duration_s", 1.5)),
            )
        )

    queries = []
    for obj in _read_jsonl(
        queries_path, _QUERY_KEYS, {"query_id", "video_id", "token_feature_file", "moment"}
    ):
        tokens = read_features(base / obj["token_feature_file"])
        moment = obj["moment"]
        if not (isinstance(moment, list) and len(moment) == 2):
            raise FormatError(f"moment of {obj['query_id']}", "[st, ed]", moment)
        queries.append(
            QueryRecord(
                query_id=obj["query_id"],
                video_id=obj["video_id"],
                token_features=tokens,
                moment=(int(moment[0]), int(moment[1])),
                split=obj.get("split", "train"),
            )
        )

    corpus = FeatureCorpus(videos=tuple(videos), queries=tuple(queries))
    corpus.validate()
    return corpus


def write_corpus(corpus: FeatureCorpus, out_dir) -> Path:
    """Write a corpus directory loadable by :func:`load_corpus`."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "videos.jsonl", "w", encoding="utf-8") as fh:
        for v in corpus.videos:
            rec = {
                "video_id": v.video_id,
                "num_frames": v.num_frames,
                "feature_file": f"features/{v.video_id}.frames.evtf",
                "frame_duration_s": v.frame_duration_s,
            }
            write_features(v.frame_features, out_dir / rec["feature_file"])
            if v.subtitle_features is not None:
                rec["subtitle_feature_file"] = f"features/{v.video_id}.subs.evtf"
                write_features(v.subtitle_features, out_dir / rec["subtitle_feature_file"])
            fh.write(json.dumps(rec) + "\n")
    with open(out_dir / "queries.jsonl", "w", encoding="utf-8") as fh:
        for q in corpus.queries:
            rec = {
                "query_id": q.query_id,
                "video_id": q.video_id,
                "token_feature_file": f"features/{q.query_id}.tokens.evtf",
                "moment": [q.moment[0], q.moment[1]],
                "split": q.split,
            }
            write_features(q.token_features, out_dir / rec["token_feature_file"])
            fh.write(json.dumps(rec) + "\n")
    return out_dir / "videos.jsonl"


def corpus_equal(a: FeatureCorpus, b: FeatureCorpus) -> bool:
    """Field-by-field, bit-exact equality of two corpora."""
    if len(a.videos) != len(b.videos) or len(a.queries) != len(b.queries):
        return False
    for va, vb in zip(a.videos, b.videos):
        if va.video_id != vb.video_id or va.frame_duration_s != vb.frame_duration_s:
            return False
        if not np.array_equal(va.frame_features, vb.frame_features):
            return False
        if (va.subtitle_features is None) != (vb.subtitle_features is None):
            return False
        if va.subtitle_features is not None and not np.array_equal(
            va.subtitle_features, vb.subtitle_features
        ):
            return False
    for qa, qb in zip(a.queries, b.queries):
        if (qa.query_id, qa.video_id, qa.moment, qa.split) != (
            qb.query_id,
            qb.video_id,
            qb.moment,
            qb.split,
        ):
            return False
        if not np.array_equal(qa.token_features, qb.token_features):
            return False
    return True


def _block_bounds(total: int, parts: int) -> list[int]:
    return [(j * total) // parts for j in range(parts + 1)]


def _block_prototypes(rng: np.random.Generator, dim: int, blocks: int) -> np.ndarray:
    """Unit prototypes on disjoint coordinate slices (exactly orthogonal)."""
    bounds = _block_bounds(dim, blocks)
    protos = np.zeros((blocks, dim))
    for b in range(blocks):
        lo, hi = bounds[b], bounds[b + 1]
        v = rng.normal(size=hi - lo)
        protos[b, lo:hi] = v / np.linalg.norm(v)
    return protos


def synthesize_corpus(
    seed: int,
    M: int = 8,
    T: int = 16,
    D_raw: int = 32,
    events_per_video: int = 2,
    queries_per_video: int = 4,
    *,
    noise_sigma: float = 0.1,
    with_subtitles: bool = False,
    zero_subtitle_every: int | None = None,
    min_tokens: int = 3,
    max_tokens: int = 6,
    frame_duration_s: float = 1.5,
    val_fraction: float = 0.0,
) -> FeatureCorpus:
    """Generate a block-structured corpus, deterministic in ``seed``.

    Each video is ``events_per_video`` contiguous blocks of frames; frames
    within a block are its prototype vector plus N(0, noise_sigma**2)
    noise. Prototypes of different blocks live on disjoint coordinate
    slices, so with zero noise their cosine similarity is exactly zero.
    Each query is a handful of noisy copies of one block's prototype and
    its moment is exactly that block's span.
    """
    if M < 1 or T < 1 or D_raw < 1:
        raise ArgumentError("M, T and D_raw must be positive")
    if not (1 <= events_per_video <= T):
        raise ArgumentError(f"events_per_video {events_per_video} must be in [1, {T}]")
    if D_raw < events_per_video:
        raise ArgumentError("D_raw must be >= events_per_video for disjoint prototypes")
    if queries_per_video < 0 or noise_sigma < 0:
        raise ArgumentError("queries_per_video and noise_sigma must be nonnegative")
    if not (1 <= min_tokens <= max_tokens):
        raise ArgumentError("need 1 <= min_tokens <= max_tokens")

    rng = np.random.default_rng(seed)
    cuts = _block_bounds(T, events_per_video)
    videos = []
    queries = []
    qcount = 0
    for m in range(M):
        protos = _block_prototypes(rng, D_raw, events_per_video)
        frames = np.empty((T, D_raw))
        for b in range(events_per_video):
            lo, hi = cuts[b], cuts[b + 1]
            frames[lo:hi] = protos[b] + noise_sigma * rng.normal(size=(hi - lo, D_raw))
        subs = None
        if with_subtitles:
            sub_protos = _block_prototypes(rng, D_raw, events_per_video)
            subs = np.empty((T, D_raw))
            for b in range(events_per_video):
                lo, hi = cuts[b], cuts[b + 1]
                subs[lo:hi] = sub_protos[b] + noise_sigma * rng.normal(size=(hi - lo, D_raw))
            if zero_subtitle_every:
                subs[::zero_subtitle_every] = 0.0
            subs = subs.astype(np.float32)
        video_id = f"v{m:04d}"
        videos.append(
            VideoRecord(
                video_id=video_id,
                frame_features=frames.astype(np.float32),
                subtitle_features=subs,
                frame_duration_s=frame_duration_s,
            )
        )
        for qi in range(queries_per_video):
            block = qi % events_per_video
            L = int(rng.integers(min_tokens, max_tokens + 1))
            tokens = protos[block] + noise_sigma * rng.normal(size=(L, D_raw))
            split = "val" if val_fraction > 0 and qi >= queries_per_video * (1 - val_fraction) else "train"
            queries.append(
                QueryRecord(
                    query_id=f"q{qcount:05d}",
                    video_id=video_id,
                    token_features=tokens.astype(np.float32),
                    moment=(cuts[block], cuts[block + 1]),
                    split=split,
                )
            )
            qcount += 1

    corpus = FeatureCorpus(videos=tuple(videos), queries=tuple(queries))
    corpus.validate()
    return corpus
