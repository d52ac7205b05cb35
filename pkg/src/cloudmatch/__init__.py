"""Semi-supervised cloud segmentation with scene mixing and view consistency."""
from .augment import AugConfig, RectMask, make_views, mix, sample_rect_mask, strong_augment, weak_augment
from .backbone import SegmentationModel, TinySegNet
from .config import TrainConfig
from .errors import CloudMatchError, ContractError, DimensionError, InputError
from .losses import (
    AdaptiveThreshold,
    LossWeights,
    make_pseudolabel,
    supervised_loss,
    total_loss,
    view_consistency_loss,
    w2s_loss,
)
from .metrics import ConfusionCounts, accumulate, scores
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
