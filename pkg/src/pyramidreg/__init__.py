"""Unsupervised deformable 3D registration with a coarse-to-fine field pyramid."""

from .backbone import Backbone, forward_dual
from .losses import LossConfig, dice, nlcc, smoothness, total_loss
from .pyramid import RegistrationNet, RegistrationOutput, run_pyramid, single_field_variant
from .synthdata import PhantomSpec, make_pair, make_phantom, random_smooth_field
from .training import TrainConfig, init_params, register, train
from .warping import compose, upsample_field, warp_nearest, warp_trilinear

__all__ = [
    "Backbone", "forward_dual", "LossConfig", "dice", "nlcc", "smoothness", "total_loss",
    "RegistrationNet", "RegistrationOutput", "run_pyramid", "single_field_variant",
    "PhantomSpec", "make_pair", "make_phantom", "random_smooth_field",
    "TrainConfig", "init_params", "register", "train",
    "compose", "upsample_field", "warp_nearest", "warp_trilinear",
]
