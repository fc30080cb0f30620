"""Region- and context-aware knowledge distillation for 3-d segmentation.

Importing the package honors RECO_KD_THREADS before numpy loads: the value
caps the BLAS thread pools backing the conv kernels. Results are deterministic
for a fixed thread count; reruns must use the same setting (run manifests
record it).
"""

import os as _os

_threads = _os.environ.get("RECO_KD_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import errors  # noqa: E402
from .rng import Stream, derive_seed  # noqa: E402
from .tensor import (  # noqa: E402
    Tensor,
    concat,
    conv3d,
    group_norm,
    log_softmax,
    reduce_max,
    reduce_mean,
    reduce_sum,
    softmax_temperature,
    upsample_conv,
    upsample_nearest,
)
from .volumes import (  # noqa: E402
    ImageVolume,
    LabelVolume,
    class_stats,
    downsample_labels,
    generate_phantom,
)
from .nifti import read_nifti1, write_nifti1  # noqa: E402
from .masks import (  # noqa: E402
    build_activation_masks,
    build_region_masks,
    build_scale_mask,
    build_stage_masks,
)
from .losses import (  # noqa: E402
    AdapterParams,
    DistillConfig,
    GCBlockParams,
    gc_block,
    loss_ac,
    loss_feat,
    loss_ms_ca,
    loss_ms_sard,
    loss_sard,
    loss_task,
    loss_total,
)
from .models import (  # noqa: E402
    NetworkPlan,
    NetworkState,
    build_network,
    count_params_flops,
    derive_student_plan,
    export_infer,
    forward_with_taps,
    load_checkpoint,
    save_checkpoint,
)
from .metrics import EvalReport, dice_scores, evaluate, hd95  # noqa: E402
from .training import (  # noqa: E402
    TrainConfig,
    TrainResult,
    distill_student,
    run_ablation,
    train_network,
    train_teacher,
)
from .config import CONFIG_SCHEMA, load_config  # noqa: E402
from .gradcheck import run_gradient_check  # noqa: E402

__all__ = [
    "errors",
    "Stream",
    "derive_seed",
    "Tensor",
    "concat",
    "conv3d",
    "group_norm",
    "log_softmax",
    "reduce_max",
    "reduce_mean",
    "reduce_sum",
    "softmax_temperature",
    "upsample_conv",
    "upsample_nearest",
    "ImageVolume",
    "LabelVolume",
    "class_stats",
    "downsample_labels",
    "generate_phantom",
    "read_nifti1",
    "write_nifti1",
    "build_activation_masks",
    "build_region_masks",
    "build_scale_mask",
    "build_stage_masks",
    "AdapterParams",
    "DistillConfig",
    "GCBlockParams",
    "gc_block",
    "loss_ac",
    "loss_feat",
    "loss_ms_ca",
    "loss_ms_sard",
    "loss_sard",
    "loss_task",
    "loss_total",
    "NetworkPlan",
    "NetworkState",
    "build_network",
    "count_params_flops",
    "derive_student_plan",
    "export_infer",
    "forward_with_taps",
    "load_checkpoint",
    "save_checkpoint",
    "EvalReport",
    "dice_scores",
    "evaluate",
    "hd95",
    "TrainConfig",
    "TrainResult",
    "distill_student",
    "run_ablation",
    "train_network",
    "train_teacher",
    "CONFIG_SCHEMA",
    "load_config",
    "run_gradient_check",
    "__version__",
]
