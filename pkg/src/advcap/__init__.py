"""FGSM robustness experiments for a patch-encoder / causal-decoder image captioner."""

from .attack import AdversarialBatch, AttackConfig, difference_image, fgsm, input_gradient
from .bleu import BleuReport, EvalPair, brevity_penalty, clipped_ngram_precision, corpus_bleu
from .model import (CaptionBatch, CaptionModel, ImageBatch, ModelConfig, decode_logits, embed_patches,
                    encode_image, forward_loss, generate_caption, load_checkpoint, save_checkpoint,
                    set_group_trainable)
from .training import TrainConfig, TrainedArtifact, build_adversarial_dataset, run_trials, train_baseline, train_phase

__version__ = "0.1.0"
