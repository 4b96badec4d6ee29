"""Contrast-phase CT translation with a convolutional transformer cycle-GAN,
plus the registration pipeline that consumes its translations."""

from .data import PhantomSpec, Structure, Volume, generate_phantom_triple, load_volume, preprocess, save_volume
from .discriminator import Discriminator
from .generator import EXPECTED_PARAMETERS, Generator, GeneratorConfig
from .metrics import evaluate_translation, mae, rmse, ssim
from .registration import RegistrationNet, cascade_register, compose, translate_then_register, warp
from .training import CyTranState, TrainConfig, checkpoint_load, checkpoint_save, train_epoch

__version__ = "0.1.0"
