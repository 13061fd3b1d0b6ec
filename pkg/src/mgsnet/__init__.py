"""Modality-guided deformable convolution for salient object detection.

Depth (or a second modality) steers the sampling grid of a deformable 3x3
convolution inside a residual bottleneck branch of a small saliency network.
"""

from .deform import bilinear_sample, deform_conv_backward, deform_conv_forward
from .geometry import (CameraIntrinsics, backproject, fit_local_plane, geometric_offsets,
                       learned_offsets, learned_offsets_backward)
from .mgs import MgsParams, mgs_backward, mgs_forward, residual_merge
from .net import NetConfig, SaliencyNet, infer, synth_dataset, synth_sample, train
from .ops import ConvParams, bce_loss, conv2d_backward, conv2d_forward

__version__ = "0.1.0"
