"""Desk-scale lab for joint ranking/calibration optimization of CTR models."""

from .context import (
    ContextBatch,
    ContextPolicy,
    Sample,
    assign_context,
    build_mask,
    drop_for_rank,
    stream_batcher,
)
from .data import CsvSchema, LabeledSample, SynthConfig, generate, read_csv, write_csv
from .errors import (
    ConfigError,
    CtrLabError,
    DataError,
    InputError,
    StreamError,
    TrainingError,
    UndefinedMetricError,
)
from .harness import (
    ExperimentConfig,
    RunResult,
    paired_ttest,
    sweep_alpha,
    sweep_context,
    sweep_droprate,
    train_eval,
    user_group_report,
)
from .losses import (
    EbmConditionals,
    JrcWeights,
    LossInputs,
    LossResult,
    calib_loss,
    combined_loss,
    ebm_conditionals,
    jrc_loss,
    listnet_loss,
    loss_for_kind,
    pointwise_loss,
    predict_ctr,
    rank_loss,
    ranknet_loss,
)
from .metrics import (
    MetricsReport,
    Prediction,
    auc,
    compute_report,
    ece,
    gauc,
    logloss,
    pcoc,
)
from .model import (
    LogitPair,
    ModelConfig,
    ModelParams,
    adam_step,
    backward,
    forward,
    init_model,
    sgd_step,
)

__version__ = "0.1.0"
