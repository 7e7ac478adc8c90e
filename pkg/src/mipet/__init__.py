"""Disentangling VAEs with invertible, partially equivariant latent transforms
and exponential-family conversion of the transformed latents."""

from .config import ExperimentConfig
from .data import FactorDataset, MiniSpritesConfig, gen_minisprites
from .estimator import MIPETVAE
from .matexp import IPEUnit, matrix_exp
from .metrics import RepresentationTable, dci, fvm, mig, sap, welch_ttest
from .model import MipetModel, mipet_forward

__all__ = [
    "ExperimentConfig",
    "FactorDataset",
    "IPEUnit",
    "MIPETVAE",
    "MiniSpritesConfig",
    "MipetModel",
    "RepresentationTable",
    "dci",
    "fvm",
    "gen_minisprites",
    "matrix_exp",
    "mig",
    "mipet_forward",
    "sap",
    "welch_ttest",
]

__version__ = "0.1.0"
