"""Reconstruct images from fMRI voxel patterns.

Pipeline: an image encoder supplies feature vectors, ridge regression
decodes them from voxels, a deconvolutional network renders a coarse image
and a per-category conditional GAN refines it. A linear-Gaussian voxel
simulator stands in for recorded fMRI.
"""

__version__ = "0.1.0"

from .tensor_io import (DatasetManifest, SampleRecord, load_image, load_manifest, read_tensor, resize_bilinear,
                        save_image, save_manifest, write_tensor)
from .synth import SynthConfig, VoxelForwardModel, gen_toy_dataset, make_forward_model, simulate_voxels
from .encoder import Encoder, EncoderSpec, EncoderTrainConfig, build_encoder, encode, train_encoder
from .ridge import RidgeModel, fit_ridge, predict_features, regression_metrics
from .recon import ReconNet, ReconSpec, ReconTrainConfig, build_recon, recon_forward, recon_loss, train_recon
from .cgan import (DiscSpec, GanConfig, GanRegistry, GanTrainer, GenSpec, build_gan, disc_forward, gan_losses,
                   gan_step, gen_forward, train_gan)
from .pipeline import (EvalReport, PipelineBundle, evaluate_decoding, evaluate_reconstruction,
                       reconstruct_from_voxels)
