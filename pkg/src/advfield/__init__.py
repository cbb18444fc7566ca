"""Adversarial bias-field and deformation augmentation for image segmentation."""
from .adversary import AttackConfig, AttackResult, attack_bias, attack_morph, attack_sequential, attack_vat
from .data import Sample, SynthConfig, generate, load_dataset, save_dataset, split
from .distance import composite, contour, kl
from .estimators import AdversarialBiasField, AdversarialMorph, AdversarialSegmenter, RandomBiasField
from .metrics import dice, mean_dice
from .segnet import SegNet, SegNetConfig
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "attack_bias", "attack_morph", "attack_sequential", "attack_vat",
    "Sample", "SynthConfig", "generate", "load_dataset", "save_dataset", "split",
    "composite", "contour", "kl",
    "AdversarialBiasField", "AdversarialMorph", "AdversarialSegmenter", "RandomBiasField",
    "dice", "mean_dice", "SegNet", "SegNetConfig", "TrainConfig", "train",
]
