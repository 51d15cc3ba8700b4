"""Pedestrian crossing-intention prediction at desk scale.

A from-scratch stack: autodiff tensors, GRU+attention layers, the seven-input
feature pipeline, multi-camera stitching and fusion, the intention network in
single- and multi-camera variants, RMSProp training, a synthetic scenario
generator with known ground truth, and an evaluation CLI.
"""

from .tensor import Tensor, Tape, backward, finite_diff_check
from .layers import AttentionParams, GruParams, init_attention, init_gru
from .features import CLASSES, Instance, Sample
from .multicam import (StitchLayout, camera_of_global_x, make_layout,
                       shift_coords, stitch)
from .synth import (GenConfig, ablation_gen, beta_gen, build_dataset,
                    build_sample, default_gen, emit_dataset, etc_dataset,
                    generate_scenario, load_dataset, scenario_track)
from .model import (ModelConfig, build_model, desk_config, forward,
                    reference_alpha_config, reference_beta_config, predict)
from .training import (Checkpoint, TrainConfig, desk_train, load_checkpoint,
                       reference_alpha_train, reference_beta_train, save_checkpoint,
                       train)
from .evaluate import (ablation_run, permutation_importance, run_gradcheck,
                       temporal_sweep)
from .metrics import MetricReport, metrics

__all__ = [
    "Tensor", "Tape", "backward", "finite_diff_check",
    "AttentionParams", "GruParams", "init_attention", "init_gru",
    "CLASSES", "Instance", "Sample",
    "StitchLayout", "camera_of_global_x", "make_layout", "shift_coords",
    "stitch",
    "GenConfig", "ablation_gen", "beta_gen", "build_dataset", "build_sample",
    "default_gen", "emit_dataset", "etc_dataset", "generate_scenario",
    "load_dataset", "scenario_track",
    "ModelConfig", "build_model", "desk_config", "forward",
    "reference_alpha_config", "reference_beta_config", "predict",
    "Checkpoint", "TrainConfig", "desk_train", "load_checkpoint",
    "reference_alpha_train", "reference_beta_train", "save_checkpoint", "train",
    "ablation_run", "permutation_importance", "run_gradcheck",
    "temporal_sweep",
    "MetricReport", "metrics",
]
__version__ = "0.1.0"
