"""Tracking association and VPQ evaluation for video panoptic segmentation."""
from .association import (
    Assignment, FusionWeights, TrackerConfig, TrackMemory, TrackedVideo, fuse, greedy_assign, mutual_check,
    temporal_rescue, track_sequence,
)
from .flow import FlowField, read_flo, warp_mask, write_flo
from .masks import Category, InstanceMask, SegmentationMap, bounding_box, crop_scale_pad, extract_instances, read_segmap, write_segmap
from .pixel_tracker import CorrelationMatrix, dice, pixel_correlation
from .vpq import VpqReport, vpq_report, vpq_window

__version__ = "0.1.0"
