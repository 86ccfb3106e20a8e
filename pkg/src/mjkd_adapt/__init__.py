"""Select-and-adapt unsupervised domain adaptation with a multi-layer joint
kernelized distance (MJKD) and conditional adversarial training."""

from .data_synth import LabeledDataset, ShiftSpec, generate_pair, load_dataset, save_dataset
from .kernel_metric import CategoryBank, KernelSpec, build_bank, mjkd, relative_distance
from .network import AdaptationModel, Discriminator, FeatureStack, init_discriminator, init_model
from .selection import SelectionReport, SplitUpdate, apply_selection, select_balanced
from .trainer import TrainConfig, adversarial_train, evaluate, lr_at, pretrain

__version__ = "0.1.0"
