"""Tri-planar CNN ensemble for hippocampus-style segmentation.

Three orientation-specialized 2D networks consume 3-channel slice triplets;
their activation volumes are averaged, thresholded at 0.5, and cleaned by
keeping the two largest connected components. Ships with a deterministic
phantom generator so the whole pipeline is testable without clinical data.
"""

__version__ = "0.1.0"

from .volumes import (  # noqa: F401
    LabelMask,
    SlicePlane,
    Volume,
    load_mask,
    load_volume,
    normalize_minmax,
    save_mask,
    save_volume,
    to_canonical,
)
from .losses import (  # noqa: F401
    BoundarySchedule,
    boundary_loss,
    dice_coefficient,
    dice_loss,
    generalized_dice_loss,
    signed_distance_map,
)
from .network import (  # noqa: F401
    NetworkConfig,
    NetworkEnsemble,
    SegmentationNet,
    build_network,
    load_checkpoint,
    load_ensemble,
    predict_slice,
    save_checkpoint,
)
from .sampling import AugmentConfig, SamplerConfig, augment_patch, epoch_stream, sample_patch  # noqa: F401
from .fusion import ActivationVolume, binarize, consensus, predict_orientation, segment_volume  # noqa: F401
from .postprocess import keep_largest, label_components, remove_false_positives  # noqa: F401
from .metrics import EvalRecord, aggregate, consensus_vs_single_report, evaluate_volume  # noqa: F401
from .phantoms import PhantomCase, PhantomSpec, Split, generate, split_holdout  # noqa: F401
from .training import (  # noqa: F401
    TrainConfig,
    TrainReport,
    ablation_grid,
    train_ensemble,
    train_network,
)
