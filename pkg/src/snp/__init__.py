"""Depth-conditioned, pose-preserving ControlNet guidance with a toy backend and evaluation tools."""
from .backend import DenoiserBackend, SplitMix64, ToyBackend, ToyBackendSpec
from .errors import BackendError, BackendUnavailable, ContractViolation, NonFiniteLatentError, NumericalError
from .evaluation import (EvalReport, PoseAngles, binned_pose_report, clip_similarity, frechet_distance,
                         pose_error)
from .guidance import (GuidanceConfig, LatentState, PromptPair, cfg_combine, control_active, initial_latent,
                       sample, snp_step)
from .routing import ControlFeatureSet, default_pose_mask, route_features
from .wcm import DepthCondition, WcmConfig, WeightMaps, build_weight_maps, detect_edges, dilate

__version__ = "0.1.0"

__all__ = [
    "DenoiserBackend", "SplitMix64", "ToyBackend", "ToyBackendSpec",
    "BackendError", "BackendUnavailable", "ContractViolation", "NonFiniteLatentError", "NumericalError",
    "EvalReport", "PoseAngles", "binned_pose_report", "clip_similarity", "frechet_distance", "pose_error",
    "GuidanceConfig", "LatentState", "PromptPair", "cfg_combine", "control_active", "initial_latent", "sample",
    "snp_step",
    "ControlFeatureSet", "default_pose_mask", "route_features",
    "DepthCondition", "WcmConfig", "WeightMaps", "build_weight_maps", "detect_edges", "dilate",
]
