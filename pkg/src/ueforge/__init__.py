"""Desk-scale laboratory for unlearnable examples.

Generates error-minimizing and shallow-semantic-camouflage perturbations via
bilevel optimization, trains staged convolutional classifiers under scratch,
pretrain-finetune, and semantic-focused-pretrain regimes with layer freezing,
and computes feature-space and spectral diagnostics.
"""

from . import autodiff, data, diagnostics, generation, harness, model, training
from .autodiff import SGD, Tape, Tensor, backward, no_grad
from .data import Dataset, gen_data, load_dataset, save_dataset
from .diagnostics import (ConsistencyCurve, SpectralProfile, cosine_similarity,
                          feature_residual, mean_power_spectrum,
                          power_spectrum_2d, ptr, radial_psd,
                          relative_spectral_density)
from .errors import (ConfigError, DimensionError, FormatError, InputError,
                     NumericsError, StageError, UEForgeError, UsageError)
from .generation import (GenConfig, PerturbationSet, apply_perturbations,
                         generate_emn, generate_ssc, load_perturbations,
                         save_perturbations)
from .harness import GridResult, RunResult, RunSpec, grid, run
from .model import (FreezeMask, StagedNet, apply_freeze, forward,
                    load_checkpoint, save_checkpoint, shallow_forward)
from .training import EvalReport, TrainConfig, evaluate, sf_pretrain, train

__version__ = "0.1.0"
