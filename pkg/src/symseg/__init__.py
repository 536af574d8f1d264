"""Segmentation with a discrete sender/receiver symbol channel."""

from .analysis import (
    SentenceLog,
    encode_position,
    fit_linear,
    fit_logistic,
    fit_multinomial,
    mine_prefixes,
    table2_report,
)
from .backbone import Backbone, BackboneConfig
from .channel import (
    ChannelConfig,
    FusionHead,
    Message,
    Receiver,
    Sender,
    Sentence,
    Vocabulary,
    gumbel_softmax,
)
from .config import AnalysisConfig, ConfigError, RunConfig, load_run_config
from .grad import GradError, NonFiniteError, ShapeError, Tape, Tensor, ops
from .model import SegmentationModel, load_checkpoint, save_checkpoint
from .synthdata import (
    GenerateSpec,
    RegionStats,
    SegmentationSample,
    generate,
    load_dataset,
    region_stats,
    save_dataset,
)
from .training import (
    EpochReport,
    TrainConfig,
    dice_loss,
    dsc,
    evaluate_dsc,
    largest_component,
    predict,
    train,
)

__version__ = "0.1.0"
