"""Robust subspace tracking with sparse outliers (NORST) and synthetic experiments."""
from .datagen import SceneConfig, SyntheticScene, assemble_scene, load_scene, perturbed_basis, save_scene
from .linalg import orthonormal_basis, sin_theta_max, top_r_singular_vectors
from .sparse_recovery import CsSolverConfig, FrameResult, projected_cs_step
from .tracker import (
    NorstParams,
    TrackerState,
    TrackResult,
    detection_statistic,
    init_from_estimate,
    smoothing_pass,
    static_rpca_mode,
    step,
    track_norst,
    track_norst_nodet,
    track_st_missing,
)

__all__ = [
    "CsSolverConfig", "FrameResult", "NorstParams", "SceneConfig", "SyntheticScene", "TrackResult",
    "TrackerState", "assemble_scene", "detection_statistic", "init_from_estimate", "load_scene",
    "orthonormal_basis", "perturbed_basis", "projected_cs_step", "save_scene", "sin_theta_max",
    "smoothing_pass", "static_rpca_mode", "step", "top_r_singular_vectors", "track_norst",
    "track_norst_nodet", "track_st_missing",
]
