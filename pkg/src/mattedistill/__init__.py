"""Trimap-privileged teacher/student distillation for alpha matting.

A self-contained numpy/scipy implementation: a minimal reverse-mode
autodiff core, synthetic composite data, twin encoder-decoder matting
networks (the teacher sees the trimap, the student does not), semantic
and local distillation losses, region-balanced supervised losses, and
the standard matting metrics, plus training loops and a CLI.
"""

from .tensor import Tensor, tensor, parameter, backward
from .synth import (CompositeSample, composite, make_sample, make_trimap,
                    region_mask, scaling_mask, generate_dataset,
                    load_dataset, save_dataset)
from .nets import (NetParams, GcParams, AttnParams, init_net_params,
                   widen_input, gc_block, spatial_attention,
                   student_forward, teacher_forward)
from .distill import (DistillConfig, DistillParams, init_distill_params,
                      clsd_loss, ald_feature_loss, ald_attention_loss,
                      ald_loss, distill_loss)
from .alpha_loss import alpha_loss, gradient_magnitude
from .metrics import evaluate, report, MetricsReport
from .train import (TrainConfig, OptState, lr_at, sgd_step, config_from_json,
                    train_teacher, train_student, evaluate_checkpoint,
                    ConfigError, NumericError)
from .gradcheck import check_gradients, run_gradient_checks

__version__ = "0.1.0"
