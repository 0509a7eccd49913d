"""Anchor-free, NMS-free 3D object detection on LiDAR BEV maps.

The package covers the full pipeline at desk scale: synthetic labeled scenes,
voxelization, heatmap/regression target encoding, all training objectives
with analytic gradients, keypoint-sampled confidence alignment, max-pool peak
decoding, and AP/NDS metrics, plus a small trainable dense reference head.
"""

from .geom import Box3D, bev_corners, bilinear_sample, corners_3d, iou_3d, rotated_iou_bev, wrap_angle
from .infer import Detection, InferConfig, detect, kswarp, peak_filter
from .losses import LossConfig, balanced_l1, focal_heatmap_loss, total_loss
from .pointcloud import LabeledScene, PointCloud, SceneSpec, augment_global, synth_scene
from .targets import EncoderConfig, TargetSet, encode_targets, gaussian_radius
from .voxelize import GridConfig, VoxelGrid, bev_collapse, voxelize_mean

__version__ = "0.1.0"
