"""Bidirectional uncertainty-aware region learning for semi-supervised segmentation."""

from .errors import BiregionError, CheckpointError, ConfigError, FormatError, ShapeError
from .region_learning import crl_loss, masked_seg_loss, split_regions, url_loss
from .training import AblationFlags, TrainConfig
from .uncertainty import entropy_map, percentile_threshold, region_mask, uncertainty_mask

__version__ = "0.1.0"
