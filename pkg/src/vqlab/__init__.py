"""Visual query localization laboratory.

Synthetic egocentric-style video benchmark, query-conditioned detection
heads, negative/pseudo-positive sampling strategies, a detection-then-
tracking localization pipeline, and the matching metric suite.
"""

from .core import (
    AnnotationRecord,
    Box,
    DatasetError,
    Detection,
    Frame,
    ResponseTrack,
    ScoreTimeline,
    VideoClip,
    VisualQuery,
    iou,
    load_dataset,
    save_dataset,
    temporal_iou,
    tube_iou,
)
from .features import FeatureExtractor, Proposal, ProposalSet, propose
from .heads import HeadConfig, HeadOutput, QueryConditionedHead, conditional_projection
from .localize import (
    HeadScorer,
    OracleScorer,
    PeakConfig,
    TrackerConfig,
    most_recent_peak,
    track_bidirectional,
    vq2d_pipeline,
)
from .metrics import detection_ap, fp_rate_on_negatives, vq2d_metrics
from .sampling import SamplerConfig, TrainingPair, bps_sample, nufs_sample
from .synthgen import SceneSpec, generate
from .train import TrainConfig, TrainingDiverged, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
