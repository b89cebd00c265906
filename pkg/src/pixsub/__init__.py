"""Super-resolution under a hard image-formation constraint.

A refiner proposes an HR image, the proposal is blurred and its
un-decimated pixels are overwritten with the LR observation, and the
result feeds the next stage of the cascade.
"""

from pixsub.cascade import CascadeConfig, StageTrace, run_cascade, train_cascade, train_soft_constraint
from pixsub.degrade import (
    DegradeSpec,
    Kernel,
    add_noise,
    bicubic_resize,
    convolve,
    decimate,
    degrade,
    gaussian_kernel,
)
from pixsub.formation import constraint_residual, pixel_substitute, zero_upsample
from pixsub.image import Image, load_image, save_image, to_luma
from pixsub.metrics import MetricsReport, evaluate_sr, psnr, ssim
from pixsub.refine import RefinerSpec, refine_bicubic, refine_gradprior, refine_ibp

__version__ = "0.1.0"
