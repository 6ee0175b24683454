"""Low-dose to standard-dose PET volume recovery with a classification-guided 3D GAN."""
from .estimator import DoseEstimator
from .metrics import nrmse, psnr, ssim3d
from .nets import NetConfig
from .trainer import TrainConfig, fit, predict

__all__ = ["DoseEstimator", "NetConfig", "TrainConfig", "fit", "nrmse", "predict", "psnr", "ssim3d"]
__version__ = "0.1.0"
