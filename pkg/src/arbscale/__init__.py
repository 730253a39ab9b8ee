"""Scale-arbitrary invertible image downscaling in numpy.

An encoder shrinks an image by any factor in (1, 4] to an ordinary 8-bit
RGB image that looks like a bicubic downscale; a paired decoder restores
the original resolution from that image alone.
"""
from .crm import CrmParams, ResampleRate, crm_resample, project_coordinate, relative_offset
from .evaluation import EvalReport, difference_map, eval_model, psnr, routing_map, ssim
from .imaging import ImageU8, compute_scale_for_cap, load_image, save_image
from .model import Hyper, ModelState, ScaleSpec, decode, encode, init_model, lr_dims, quantize, soft_round
from .numerics import GradTape, Tensor, grad_check
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CrmParams", "ResampleRate", "crm_resample", "project_coordinate", "relative_offset",
    "EvalReport", "difference_map", "eval_model", "psnr", "routing_map", "ssim",
    "ImageU8", "compute_scale_for_cap", "load_image", "save_image",
    "Hyper", "ModelState", "ScaleSpec", "decode", "encode", "init_model", "lr_dims", "quantize", "soft_round",
    "GradTape", "Tensor", "grad_check",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
