"""Semi-supervised liver segmentation with appearance and contrast robustness, on synthetic phantoms."""

from .volume import Mask, Volume, read_mask, read_volume, write_volume
from .backbone import ModelParams, init_params, load_checkpoint, save_checkpoint, seg_forward, map_forward
from .appearance import StyleBank, compute_histogram, match_histogram, random_style_transfer
from .contrast import contrast_loss, enhance_and_stack, ssim3d, train_contrast_mapper
from .mean_teacher import TrainConfig, ema_update, ramp_lambda, train, train_step
from .pseudo import finetune, generate_pseudo_labels
from .cotta import AdaptConfig, AdaptState, adapt_step, run_stream, stochastic_restore
from .postproc import connected_components, dice_score, hausdorff_mm, trim_mask
from .phantom import PhantomSpec, generate_phantom_dataset

__version__ = "0.1.0"
