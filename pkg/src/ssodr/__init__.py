"""Self-supervised object detection and retrieval from weakly labeled region proposals."""

from ssodr.core import Box, Dataset, FrameRecord, GroundTruth, RegionRecord, iou

__all__ = ["Box", "Dataset", "FrameRecord", "GroundTruth", "RegionRecord", "iou"]
__version__ = "0.1.0"
