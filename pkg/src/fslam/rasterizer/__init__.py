"""Tiled splat rasterizer: projection, compositing, and analytic gradients."""

from .projection import (DEFAULT_CONFIG, ProjectedGaussian, ProjectionCache,
                         RenderConfig, TileBins, bin_tiles, planar_depth_coeffs,
                         project_gaussian, project_map)
from .forward import (RenderOutput, RenderRecording, TileRecord, composite_pixel,
                      normals_from_depth, render_frame, replay_tile)
from .backward import ParamGrads, backward_render

__all__ = [
    "DEFAULT_CONFIG", "RenderConfig", "ProjectedGaussian", "ProjectionCache",
    "TileBins", "bin_tiles", "planar_depth_coeffs", "project_gaussian",
    "project_map", "RenderOutput", "RenderRecording", "TileRecord",
    "composite_pixel", "normals_from_depth", "render_frame", "replay_tile",
    "ParamGrads", "backward_render",
]
