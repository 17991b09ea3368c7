"""Run configuration: documented defaults, file/flag parsing, validation.

A config file is a single JSON object (the same key-value style as the
corpus manifests). Flags override file values; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from evret.errors import MissingRequiredError, TypeMismatchError, UnknownKeyError
from evret.nn.layers import ALL

_STRATEGY_PARAM = {"convolution": "delta", "kmeans": "kmeans_k", "window": "window"}


@dataclass
class RunConfig:
    # corpus / synthesis
    corpus: str | None = None
    videos: int = 8
    frames: int = 16
    feature_dim: int = 32
    events_per_video: int = 2
    queries_per_video: int = 4
    noise_sigma: float = 0.1
    with_subtitles: bool = False
    # event reasoning
    strategy: str = "convolution"
    delta: float = 0.3
    kmeans_k: int = 10
    kmeans_beta: float = 1.0
    window: int = 5
    # model sizes
    dim: int = 32
    layers: int = 2
    heads: int = 4
    frame_anchors: list = field(default_factory=lambda: [3, 6, 9, "all"])
    event_anchors: list = field(default_factory=lambda: [1, 2, 3, "all"])
    conv_kernel_size: int = 5
    max_frames: int = 64
    max_tokens: int = 16
    # training
    epochs: int = 120
    batch_size: int = 8
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    seed: int = 0
    omega: float = 0.5
    lam: float = 0.8
    gamma: float = 0.8
    temperature: float = 0.01
    negatives: int = 5
    negative_pool: int = 100
    checkpoint_every: int = 0
    # inference
    top_k: int = 10
    l_max: int | None = None
    top_n: int = 100
    nms_threshold: float = 0.5
    split: str = "train"

    def strategy_parameter(self) -> float:
        key = _STRATEGY_PARAM.get(self.strategy)
        if key is None:
            raise TypeMismatchError("strategy", f"unknown strategy {self.strategy!r}")
        return getattr(self, key)

    def echo(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

_POSITIVE = {
    "videos", "frames", "feature_dim", "events_per_video", "dim", "layers", "heads",
    "conv_kernel_size", "max_frames", "max_tokens", "epochs", "batch_size",
    "learning_rate", "temperature", "top_k", "top_n", "kmeans_k", "window",
}


def resolve_anchors(raw: list) -> list:
    out = []
    for a in raw:
        if a == "all" or a is ALL:
            out.append(ALL)
        elif isinstance(a, int) and a >= 1:
            out.append(a)
        else:
            raise TypeMismatchError("anchors", f"entries must be positive ints or 'all', got {a!r}")
    return out


def _check_type(key: str, value):
    f = _FIELDS[key]
    if key in ("frame_anchors", "event_anchors"):
        if not isinstance(value, list) or not value:
            raise TypeMismatchError(key, f"expected non-empty list, got {value!r}")
        resolve_anchors(value)
        return value
    if f.type in ("int", "int | None"):
        if value is None and f.type == "int | None":
            return value
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeMismatchError(key, f"expected int, got {value!r}")
        return value
    if f.type == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatchError(key, f"expected number, got {value!r}")
        return float(value)
    if f.type == "bool":
        if not isinstance(value, bool):
            raise TypeMismatchError(key, f"expected bool, got {value!r}")
        return value
    if f.type in ("str", "str | None"):
        if value is None and f.type == "str | None":
            return value
        if not isinstance(value, str):
            raise TypeMismatchError(key, f"expected string, got {value!r}")
        return value
    return value


def parse_config(path=None, flags: dict | None = None) -> RunConfig:
    """Build a RunConfig from documented defaults, an optional JSON file,
    and flag overrides (flags win)."""
    cfg = RunConfig()
    explicit: dict[str, object] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8").strip()
        if text:
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as e:
                raise TypeMismatchError("config file", f"invalid JSON: {e}") from None
            if not isinstance(obj, dict):
                raise TypeMismatchError("config file", "expected a single JSON object")
            explicit.update(obj)
    if flags:
        explicit.update({k: v for k, v in flags.items() if v is not None})

    for key, value in explicit.items():
        if key not in _FIELDS:
            raise UnknownKeyError(key)
        setattr(cfg, key, _check_type(key, value))

    _validate(cfg, set(explicit))
    return cfg


def _validate(cfg: RunConfig, explicit: set[str]) -> None:
    if cfg.strategy not in _STRATEGY_PARAM:
        raise TypeMismatchError("strategy", f"must be one of {sorted(_STRATEGY_PARAM)}")
    own = _STRATEGY_PARAM[cfg.strategy]
    for strat, key in _STRATEGY_PARAM.items():
        if key != own and key in explicit:
            raise TypeMismatchError(
                key, f"parameter of strategy {strat!r} conflicts with strategy {cfg.strategy!r}"
            )
    for key in _POSITIVE:
        value = getattr(cfg, key)
        if value is not None and value <= 0:
            raise TypeMismatchError(key, f"must be positive, got {value}")
    for key in ("delta", "omega", "lam", "gamma", "noise_sigma"):
        if getattr(cfg, key) < 0:
            raise TypeMismatchError(key, f"must be >= 0, got {getattr(cfg, key)}")
    if not (0.0 <= cfg.nms_threshold <= 1.0):
        raise TypeMismatchError("nms_threshold", f"must be in [0, 1], got {cfg.nms_threshold}")
    if cfg.negatives < 0 or cfg.negative_pool < 1:
        raise TypeMismatchError("negatives", "negatives >= 0 and negative_pool >= 1 required")
    if cfg.optimizer not in ("sgd", "adam"):
        raise TypeMismatchError("optimizer", f"must be 'sgd' or 'adam', got {cfg.optimizer!r}")
    if cfg.split not in ("train", "val"):
        raise TypeMismatchError("split", f"must be 'train' or 'val', got {cfg.split!r}")
    if cfg.l_max is not None and cfg.l_max < 1:
        raise TypeMismatchError("l_max", f"must be >= 1, got {cfg.l_max}")
    if cfg.dim % cfg.heads != 0:
        raise TypeMismatchError("dim", f"dim {cfg.dim} must be divisible by heads {cfg.heads}")
    if cfg.conv_kernel_size % 2 == 0:
        raise TypeMismatchError("conv_kernel_size", "must be odd")


def require_corpus(cfg: RunConfig) -> str:
    if not cfg.corpus:
        raise MissingRequiredError("corpus")
    return cfg.corpus
