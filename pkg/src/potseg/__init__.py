"""Desk-scale road-pothole segmentation on a from-scratch autodiff core.

The package is organized bottom-up:

- `autodiff`: float64 tensors, reverse-mode gradients, gradient checking;
- `blocks`: backbone, pyramid pooling, channel attention, fusion, model;
- `metrics`: confusion matrices, mIoU/mFsc, Markdown reports;
- `data`: dataset loading, synthetic scene generation, checkpoints;
- `training`: SGD loop, evaluation, four-variant ablation runner;
- `config`: flat key=value files shared by the CLI and checkpoints;
- `gradsuite`: randomized finite-difference suites for ops and blocks;
- `cli`: the `potseg` command.
"""

from .autodiff import (
    GradCheckReport,
    Parameter,
    Tensor,
    add,
    backward,
    bilinear_upsample,
    concat_channels,
    conv2d,
    cross_entropy_loss,
    global_avg_pool,
    grad_check,
    matmul,
    mul,
    relu,
    reshape,
    same_padding,
    sigmoid,
    softmax_rows,
    sum_all,
    transpose2d,
)
from .blocks import (
    VARIANT_LABELS,
    VARIANTS,
    AsppBlock,
    AttentionMap,
    CamBlock,
    Conv2d,
    DilatedBackbone,
    Layer,
    ModelConfig,
    MsffmBlock,
    PotholeNet,
    ResidualBlock,
    ablation_variant,
)
from .config import CliConfig, parse_config, render_config
from .data import (
    CheckpointMeta,
    Sample,
    ellipse_mask,
    load_checkpoint,
    load_dataset,
    load_image,
    load_mask,
    read_checkpoint_meta,
    save_checkpoint,
    synth_generate,
)
from .errors import (
    ArgumentError,
    CapacityError,
    CheckpointError,
    DataError,
    DimensionError,
    FormatError,
    LabelError,
    NumericalError,
    PotsegError,
    StateError,
)
from .gradsuite import run_entry, run_suite, suite_report
from .metrics import (
    POTHOLE_CLASS,
    ConfusionMatrix,
    ablation_table,
    evaluation_report,
    format_percent,
    fsc_from_iou,
)
from .training import (
    SCHEDULES,
    EvalResult,
    HistoryRow,
    SgdState,
    TrainConfig,
    evaluate,
    history_csv,
    inverse_frequency_weights,
    predict_mask,
    run_ablation,
    schedule_lr,
    sgd_step,
    train,
)

__version__ = "0.1.0"
