"""Checkpoint fusion toolkit.

Merge a fine-tuned model back into its pre-trained parent by keeping only a
small, high-importance patch of fine-tuned parameters, compensating the
retained entries for everything that reverts, and optionally stitching
patches from several tasks onto one parent.
"""

from .checkpoint import (
    Checkpoint,
    PatchLayer,
    TaskPatch,
    load_checkpoint,
    load_task_patch,
    read_checkpoint,
    read_task_patch,
    save_checkpoint,
    save_task_patch,
    write_checkpoint,
    write_task_patch,
)
from .errors import ModelTailorError, NumericalError, ValidationError
from .hessian import CalibrationRecord, HessianState, build_hessian, eliminate, inv_diag
from .metrics import EvalReport, avg, hscore, retention
from .multitask import AggregatePatch, apply_patch, stitch, stitch_report
from .tailor import (
    FusionConfig,
    LayerPatch,
    LayerScores,
    decorate,
    fuse_layer,
    fuse_scores,
    retained_budget,
    salience,
    select_mask,
    sensitivity,
    tailor_model,
)
from .toymodel import (
    MlpSpec,
    TaskDataset,
    TrainConfig,
    capture_activations,
    evaluate,
    gen_task,
    init_model,
    train,
)

__version__ = "0.1.0"
