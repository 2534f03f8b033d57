"""Synthetic lymph-node lesion generation via truncated-SDF latent diffusion."""

from lnforge.volume import Mask, Volume, VolumeFormatError, load_volume, save_volume

__version__ = "0.1.0"

__all__ = ["Mask", "Volume", "VolumeFormatError", "load_volume", "save_volume", "__version__"]
