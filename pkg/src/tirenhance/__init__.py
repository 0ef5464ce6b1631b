"""Thermal-infrared image enhancement with prompt-conditioned progressive restoration."""

from .backbone import BackboneConfig, UNetBackbone, build_backbone, forward_restore, injection_sites
from .degradation import (BlurParams, ContrastParams, DegradationSpec, FixedPatternParams, RandomNoiseParams,
                          TrainingSequence, compose_eq1, generate_sequence, sample_spec)
from .evaluation import EvalReport, build_test_subsets, evaluate_dataset
from .experiments import OverfitConfig, OverfitResult, run_overfit
from .io import DatasetManifest, Image, load_image, save_image
from .metrics import psnr, ssim
from .prompts import ConditionedModel, PromptConfig, modulate, wrap_backbone
from .spt import ModelSpec, SPTTrainer, TrainConfig, spt_step

__version__ = "0.1.0"
