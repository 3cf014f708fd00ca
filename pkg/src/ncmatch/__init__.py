"""Coarse-to-fine image matching with 4D neighbourhood consensus, plus a
relative-pose evaluation harness."""

from .consensus import (DescriptorMap, ScoreTensors, correlate, match_scores, ncn_filter,
                        pair_loss, soft_mutual_nn)
from .geometry import (CameraIntrinsics, Pose, decompose_essential, five_point,
                       ransac_essential, rotation_error, success_ratios, translation_error)
from .keypoints import Keypoint, decode_response, nms, top_k_per_block
from .matching import coarse_matches, knn_ratio_match, refine_matches
from .tensor4d import Conv4Kernel, Conv4Stack, conv4d, conv4d_stack, transpose_pairs

__version__ = "0.1.0"
