"""Keypoint-based retinal image registration with contrastive descriptors.

Pipeline: heatmap keypoints (crossovers and bifurcations), a small dense
descriptor CNN trained with multi-positive contrastive losses, class-wise
mutual matching and a RANSAC homography. Evaluation uses Registration
Score curves and VTKRS.
"""
from .contrastive import LossConfig, LossOutput, MultiviewBatch, mp_infonce_loss, supcon_loss, triplet_loss
from .descnet import AugmentationSpec, ConvDescriptorNet, TrainConfig, evaluate_matching_precision, train, train_step
from .descriptors import DescriptorSet, MatchSet, SimilarityCounter, mutual_match_classwise, sample_descriptors, top_n_matches
from .evalkit import RegistrationCase, aggregate, case_error, registration_score, vtkrs
from .geometry import RansacConfig, apply_homography, estimate_homography, ransac_homography
from .keypoints import KeypointSet, PeakConfig, TargetConfig, extract_keypoints, make_target_heatmaps
from .pipeline import register_pair, run_benchmark
from .synth import VesselTreeSpec, generate_case, generate_tree

__version__ = "0.1.0"
