"""Tile-based differentiable splatting of feature Gaussians on the CPU."""

from .projection import CULLED, ProjectedGaussian, project, project_batch
from .render import (
    GaussianGrads,
    RenderAdjoints,
    RenderOutput,
    render,
    render_backward,
)
from .reference import render_reference

__all__ = [
    "CULLED",
    "ProjectedGaussian",
    "project",
    "project_batch",
    "RenderOutput",
    "RenderAdjoints",
    "GaussianGrads",
    "render",
    "render_backward",
    "render_reference",
]
