"""Event-aware video corpus moment retrieval at desk scale."""

from evret.config import RunConfig, parse_config
from evret.corpus import (
    FeatureCorpus,
    QueryRecord,
    VideoRecord,
    load_corpus,
    read_features,
    synthesize_corpus,
    write_corpus,
    write_features,
)
from evret.events import (
    EventSegmentation,
    EventSpan,
    boundaries_convolution,
    boundaries_kmeans,
    boundaries_window,
    build_tsm,
    segment_events,
)

__version__ = "0.1.0"
