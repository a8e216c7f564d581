"""Tubular centerline extraction by ranked multi-hypothesis template
tracking on 3-d gray-value volumes."""

from __future__ import annotations

from .fitting import (FitOptions, FitResult, ResidualModel, fit_template,
                      fit_templates, solve_linear, tracking_score)
from .metrics import (SampledCenterline, centerline_distance,
                      overlap_measures, resample, resample_tree,
                      tree_distance, tree_overlap)
from .mht import HypothesisNode, HypothesisTree, rank_scores
from .phantom import (BranchSpec, GapSpec, PhantomCase, PhantomSpec,
                      render)
from .template import (TemplateParams, WeightWindow, orthonormal_frame,
                       profile, sample_stencil, window_for)
from .tracker import (AuditLog, BifurcationConfig, Branch,
                      CenterlineTree, TrackerConfig, detect_bifurcation,
                      fit_seed, predict, preset, track_tree)
from .volume import (FunctionField, Volume, gv_to_hu, hu_to_gv,
                     read_volume, write_metaimage)

__version__ = "0.1.0"

__all__ = [
    "AuditLog", "BifurcationConfig", "Branch", "BranchSpec",
    "CenterlineTree", "FitOptions", "FitResult", "FunctionField",
    "GapSpec", "HypothesisNode", "HypothesisTree", "PhantomCase",
    "PhantomSpec", "ResidualModel", "SampledCenterline",
    "TemplateParams", "TrackerConfig", "Volume", "WeightWindow",
    "centerline_distance", "detect_bifurcation", "fit_seed",
    "fit_template", "fit_templates", "gv_to_hu", "hu_to_gv",
    "orthonormal_frame", "overlap_measures", "predict", "preset",
    "profile", "rank_scores", "read_volume", "render", "resample",
    "resample_tree", "sample_stencil", "solve_linear", "track_tree",
    "tracking_score", "tree_distance", "tree_overlap", "window_for",
    "write_metaimage", "__version__",
]
