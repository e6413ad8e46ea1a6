"""Run configuration, training, AP evaluation, diagnostics and the CLI."""
from .commands import (
    ABLATION_GRID,
    DEFAULT_VARIANTS,
    SPLITS,
    AblationResult,
    build_arrays,
    cmd_ablate,
    cmd_eval,
    cmd_gen,
    cmd_train,
    cmd_viz_queries,
    cmd_viz_sampling,
    dir_checksum,
    run_ablation,
    split_plan,
)
from .config import RunConfig, parse_kv
from .evaluate import (
    IOU_THRESHOLDS,
    RECALL_POINTS,
    Detections,
    EvalReport,
    average_precision,
    evaluate,
    interpolated_ap,
)
from .train import (
    SplitArrays,
    Trainer,
    batch_at,
    evaluate_split,
    format_log,
    grad_check_batch,
    load_checkpoint,
    lr_at,
    predict,
    save_checkpoint,
)
from .viz import box_rect, to_pixel, viz_queries, viz_sampling

__all__ = [
    "ABLATION_GRID", "AblationResult", "DEFAULT_VARIANTS", "Detections", "EvalReport",
    "IOU_THRESHOLDS", "RECALL_POINTS", "RunConfig", "SPLITS", "SplitArrays", "Trainer",
    "average_precision", "batch_at", "box_rect", "build_arrays", "cmd_ablate", "cmd_eval",
    "cmd_gen", "cmd_train", "cmd_viz_queries", "cmd_viz_sampling", "dir_checksum", "evaluate",
    "evaluate_split", "format_log", "grad_check_batch", "interpolated_ap", "load_checkpoint",
    "lr_at", "parse_kv", "predict", "run_ablation", "save_checkpoint", "split_plan", "to_pixel",
    "viz_queries", "viz_sampling",
]
