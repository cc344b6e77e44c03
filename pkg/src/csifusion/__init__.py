"""csifusion: camera-aided semi-supervised CSI positioning.

A sandbox implementation of matching-based semi-supervised training for
channel-fingerprint position regressors: camera detections provide unlabeled
radio samples with candidate labels, a combinatorial matcher assigns them,
and a meta-learned per-sample weighting guards the gradient updates against
wrong assignments.
"""

from .channel import (
    ChannelConfig,
    PilotBlock,
    csi_to_real,
    estimate_csi,
    make_pilot,
    real_to_csi,
    synthesize_channel,
)
from .geometry import (
    CameraConfig,
    in_field_of_view,
    pixel_to_polar,
    polar_to_pixel,
    polar_to_world,
    world_to_pixel,
    world_to_polar,
)
from .network import ArchSpec, forward, init_params, mse_and_grad, sgd_step

__version__ = "0.1.0"
