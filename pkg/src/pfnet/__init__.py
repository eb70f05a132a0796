"""pfnet: feed-forward image transformation networks under perceptual losses.

Trains small convolutional image-to-image networks against feature and
Gram-matrix statistics of a fixed loss network, and provides the image-space
projected L-BFGS optimizer that the feed-forward networks approximate.
"""

import os

# PF_THREADS caps BLAS worker threads; must be exported before numpy loads.
_threads = os.environ.get("PF_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

from .autodiff import Tensor, Parameter, Tape, backward  # noqa: E402
from .image import ImagePlane  # noqa: E402
from .networks import (  # noqa: E402
    LayerSpec,
    NetworkSpec,
    Checkpoint,
    build_style_net,
    build_sr_net,
    build_mini_lossnet,
    build_identity_lossnet,
    forward,
    loss_net_features,
    save_checkpoint,
    load_checkpoint,
)
from .losses import (  # noqa: E402
    ObjectiveSpec,
    LossBreakdown,
    feature_loss,
    gram,
    style_loss,
    pixel_loss,
    tv_loss,
    evaluate_objective,
)
from .optimize import OptimizeConfig, IterTrace, optimize_image, invert_features, invert_style  # noqa: E402
from .training import TrainConfig, AdamState, TrainLog, adam_step, make_sr_pair, train_style, train_sr  # noqa: E402

__version__ = "0.1.0"
