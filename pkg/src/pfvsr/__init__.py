"""Progressive-fusion video super-resolution on a small autodiff core.

The package trains and evaluates multi-frame 4x upscalers built from
progressive fusion residual blocks, wired into five temporal frameworks
that differ in how hidden state flows between frames (sliding window,
unidirectional recurrence, their hybrid, and two-pass designs where a
first network sweeps the clip forward or backward and a second network
refines every frame using the first pass's states from both sides).
"""
from .checkpoint import CheckpointError, load_model, save_model
from .estimator import VideoSuperResolver, check_clip, check_clip_list
from .generator import (FRAMEWORKS, ConfigError, Model, ModelConfig,
                        count_parameters, count_weights, net_plans,
                        parse_model_name)
from .metrics import (EvalProtocol, EvalReport, benchmark_time, count_flops,
                      psnr, sequence_psnr, sequence_ssim, ssim, to_luminance)
from .resample import bicubic_upsample, bicubic_upsample_array, gaussian_blur
from .scheduler import (MASKABLE_INPUTS, NotAnInputError, RunResult,
                        ScheduleTrace, VideoSequence, ablate_input,
                        input_membership, run_model)
from .tensor import (GradientTape, ShapeError, Tensor, backward, load_tensor,
                     save_tensor, set_debug_checks)
from .training import (ArraySource, DegradeConfig, LossConfig, LrSchedule,
                       SyntheticSource, TrainConfig, TrainingDiverged,
                       TrainResult, bicubic_psnr, charbonnier, clip_loss,
                       degrade_clip, evaluate_psnr, load_frame_dir, lr_at,
                       save_frame_dir, synth_clip, train, write_loss_csv)

__version__ = "0.1.0"

__all__ = [
    "ArraySource", "CheckpointError", "ConfigError", "DegradeConfig",
    "EvalProtocol", "EvalReport", "FRAMEWORKS", "GradientTape", "LossConfig",
    "LrSchedule", "MASKABLE_INPUTS", "Model", "ModelConfig", "NotAnInputError",
    "RunResult", "ScheduleTrace", "ShapeError", "SyntheticSource", "Tensor",
    "TrainConfig", "TrainResult", "TrainingDiverged", "VideoSequence",
    "VideoSuperResolver", "ablate_input", "backward", "benchmark_time",
    "bicubic_psnr", "bicubic_upsample", "bicubic_upsample_array",
    "charbonnier", "check_clip", "check_clip_list", "clip_loss",
    "count_flops", "count_parameters", "count_weights", "degrade_clip",
    "evaluate_psnr", "gaussian_blur", "input_membership", "load_frame_dir",
    "load_model", "load_tensor", "lr_at", "net_plans", "parse_model_name",
    "psnr", "run_model", "save_frame_dir", "save_model", "save_tensor",
    "sequence_psnr", "sequence_ssim", "set_debug_checks", "ssim",
    "synth_clip", "to_luminance", "train", "write_loss_csv",
]
