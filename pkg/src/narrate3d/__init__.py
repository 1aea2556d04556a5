"""Align independently reconstructed 3D models, transfer keypoints between
them and ground narration text in the shared frame."""

from .alignment import (
    AlignmentFailure,
    AlignmentGraph,
    Correspondences3D,
    EdgeEstimate,
    RansacConfig,
    Registration,
    build_alignment_graph,
    fit_similarity_umeyama,
    lift_matches,
    path_transform,
    register_all,
    shortest_path,
    solver_u,
)
from .geometry import CameraModel, SimilarityTransform3, backproject_ray, project, triangulate
from .matching import FlowField, GlobalDescriptor, LocalFeatureSet, MatchSet, flow_filter, mutual_nn_match, retrieve_frame_pairs
from .reconstruction import Keypoints3D, Reconstruction

__version__ = "0.1.0"
