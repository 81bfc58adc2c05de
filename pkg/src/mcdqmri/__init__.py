"""Monte Carlo dropout uncertainty for deep-learning DTI parameter maps.

Synthetic phantoms, a numpy 3D U-Net with decoder dropout (DU-Net),
stochastic-pass averaging and coefficient-of-variation uncertainty maps.
"""

from .dti import DiffusionScheme, fit_volume
from .dunet import DUNet, DUNetConfig, build_dunet, build_unet, load_checkpoint, save_checkpoint
from .mcdropout import Ensemble, infer_volume, mc_predict, uncertainty_map
from .phantom import PhantomSpec, generate_phantom
from .train import TrainConfig, train
from .volume import BlockSpec, Mask, TissueLabels, Volume

__version__ = "0.1.0"

__all__ = [
    "BlockSpec", "DUNet", "DUNetConfig", "DiffusionScheme", "Ensemble", "Mask", "PhantomSpec", "TissueLabels",
    "TrainConfig", "Volume", "build_dunet", "build_unet", "fit_volume", "generate_phantom", "infer_volume",
    "load_checkpoint", "mc_predict", "save_checkpoint", "train", "uncertainty_map",
]
