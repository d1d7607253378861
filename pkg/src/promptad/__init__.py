"""Prompt-guided feature-reconstruction anomaly detection.

One model serves every object class: a frozen backbone produces feature
grids, a transformer encoder/decoder reconstructs them under the guidance
of a normal image prompt, and a supervised refiner sharpens the
reconstruction error into a pixel anomaly map. Everything runs on the
package's own numpy-based autodiff engine.
"""

from .errors import (ConfigError, DatasetError, FormatError, MetricError,
                     NumericError, PromptADError, ShapeError, SynthesisError)
from .features import BackboneSpec, extract_features, pool_feature
from .fileio import load_container, load_feature_file, save_container, save_feature_file
from .inference import PromptPool, ScoreMap, build_prompt_pool, score, select_prompt
from .losses import LossReport, dice_loss, rec_loss, res_loss, total_loss
from .metrics import EvalRecord, ScoredImage, evaluate, pr_auc, roc_auc
from .model import ModelConfig, ReconstructionModel, nma_mask
from .optim import AdamW, adamw_step, clip_grad_norm
from .synthesis import (AnomalySample, SynthesisParams, cutpaste, perlin_blend,
                        perlin_field, synthesize)
from .tensor import Tensor, set_default_dtype
from .trainer import (DatasetIndex, TrainConfig, Trainer, load_checkpoint, lr_at,
                      sample_prompt, save_checkpoint, scan_dataset, scan_test_split)

__version__ = "0.1.0"
